use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use pcflow_core::data::{write_atomic, ScenePair};
use pcflow_core::{Error, Result};

const SIZE: u32 = 640;
const MARGIN: f64 = 16.0;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const SOURCE: Rgb<u8> = Rgb([40, 80, 220]);
const WARPED: Rgb<u8> = Rgb([30, 170, 60]);
const WRONG: Rgb<u8> = Rgb([220, 30, 30]);

/// Top-down (x, y) view. Returns the image and the number of red points.
pub fn render(source: &[[f32; 3]], flow: &[[f32; 3]], gt: &[[f32; 3]], threshold: f64) -> (RgbImage, usize) {
    let warped: Vec<[f64; 3]> = source
        .iter()
        .zip(flow)
        .map(|(p, f)| [0, 1, 2].map(|a| f64::from(p[a]) + f64::from(f[a])))
        .collect();
    let src: Vec<[f64; 3]> = source.iter().map(|p| p.map(f64::from)).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in src.iter().chain(&warped) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (f64::from(SIZE) - 2.0 * MARGIN) / span;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, BACKGROUND);
    let mut dot = |p: &[f64; 3], color: Rgb<u8>| {
        let x = (MARGIN + (p[0] - lo[0]) * scale).round() as i64;
        let y = (f64::from(SIZE) - MARGIN - (p[1] - lo[1]) * scale).round() as i64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (px, py) = (x + dx, y + dy);
                if (0..i64::from(SIZE)).contains(&px) && (0..i64::from(SIZE)).contains(&py) {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    };
    for p in &src {
        dot(p, SOURCE);
    }
    let mut red = 0;
    for (i, w) in warped.iter().enumerate() {
        let err = (0..3)
            .map(|a| (f64::from(flow[i][a]) - f64::from(gt[i][a])).powi(2))
            .sum::<f64>()
            .sqrt();
        if err > threshold {
            red += 1;
            dot(w, WRONG);
        } else {
            dot(w, WARPED);
        }
    }
    (img, red)
}

pub fn plot(pair_path: &Path, pred_path: Option<&Path>, out: &Path, threshold: f64) -> Result<()> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument("--threshold must be non-negative".into()));
    }
    let pair = ScenePair::load(pair_path)?;
    let flow = match pred_path {
        Some(p) => {
            let pred = ScenePair::load(p)?;
            if pred.flow.len() != pair.flow.len() {
                return Err(Error::Shape {
                    context: "prediction",
                    expected: format!("{}x3", pair.flow.len()),
                    actual: format!("{}x3", pred.flow.len()),
                });
            }
            pred.flow
        }
        None => pair.flow.clone(),
    };
    let (img, red) = render(&pair.pos1, &flow, &pair.flow, threshold);
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    write_atomic(out, &bytes)?;
    println!("wrote {} ({red} points with end-point error above {threshold})", out.display());
    Ok(())
}

//! Random resampling of scene pairs and per-level ground truth.

use pcflow_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::archive::Archive;
use super::scene::ScenePair;
use crate::backbone::PyramidGeometry;
use crate::error::{Error, Result};

fn draw(rng: &mut ChaCha8Rng, len: usize, n: usize, replace: bool) -> Vec<usize> {
    if replace {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    } else {
        rand::seq::index::sample(rng, len, n).into_vec()
    }
}

/// Draws `n_points` source and `n_points` target points uniformly, the two
/// frames independently; flow and mask follow the source draw. Extra arrays
/// are dropped since their rows no longer line up.
pub fn resample_to(pair: &ScenePair, n_points: usize, seed: u64, with_replacement: bool) -> Result<ScenePair> {
    if n_points == 0 {
        return Err(Error::invalid("resample_to: n_points must be positive"));
    }
    let (n, m) = (pair.source_len(), pair.target_len());
    if !with_replacement && n_points > n.min(m) {
        return Err(Error::invalid(format!(
            "resample_to: cannot draw {n_points} points without replacement from frames of {n} and {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = draw(&mut rng, n, n_points, with_replacement);
    let tgt = draw(&mut rng, m, n_points, with_replacement);
    Ok(ScenePair {
        pos1: src.iter().map(|&i| pair.pos1[i]).collect(),
        pos2: tgt.iter().map(|&j| pair.pos2[j]).collect(),
        flow: src.iter().map(|&i| pair.flow[i]).collect(),
        mask: pair.mask.as_ref().map(|mk| src.iter().map(|&i| mk[i]).collect()),
        intrinsics: pair.intrinsics,
        extras: Archive::new(),
    })
}

/// GT flow of every pyramid level, gathered through the sampling indices.
pub fn downsample_gt(gt: &Tensor, pyramid: &PyramidGeometry) -> Result<Vec<Tensor>> {
    if gt.rows() != pyramid.positions[0].len() {
        return Err(Error::shape("downsample_gt", pyramid.positions[0].len(), gt.rows()));
    }
    (0..pyramid.levels())
        .map(|l| {
            let idx = pyramid.composed_indices(l);
            if let Some(&bad) = idx.iter().find(|&&i| i >= gt.rows()) {
                return Err(Error::invalid(format!("downsample_gt: index {bad} out of range")));
            }
            Ok(gt.select_rows(&idx))
        })
        .collect()
}

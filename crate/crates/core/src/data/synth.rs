//! Synthetic multi-object scenes under per-object rigid motion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::scene::ScenePair;
use crate::config::SynthConfig;
use crate::error::Result;
use crate::geom::PointSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Plane,
    Box,
    Sphere,
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// `R − I` for a rotation of `angle` about the unit `axis` (Rodrigues).
/// Exactly zero for a zero angle.
fn rotation_minus_identity(axis: [f64; 3], angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let (s, c) = angle.sin_cos();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: f64 = (0..3).map(|t| k[i][t] * k[t][j]).sum();
            m[i][j] = s * k[i][j] + (1.0 - c) * k2;
        }
    }
    m
}

fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let mut m = rotation_minus_identity(axis, angle);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    m
}

fn uniform_up_to(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(0.0..=max)
    } else {
        0.0
    }
}

/// Samples `n` points on a primitive of characteristic size `size`
/// centred at the origin.
fn sample_surface(kind: Primitive, size: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let h = size / 2.0;
    match kind {
        Primitive::Plane => (0..n)
            .map(|_| [rng.random_range(-h..h), rng.random_range(-h..h), 0.0])
            .collect(),
        Primitive::Sphere => (0..n)
            .map(|_| {
                let u = unit_vector(rng);
                [u[0] * h, u[1] * h, u[2] * h]
            })
            .collect(),
        Primitive::Box => {
            let half = [h, rng.random_range(0.5 * h..h), rng.random_range(0.5 * h..h)];
            // Face pairs normal to x, y, z, weighted by area.
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum();
            (0..n)
                .map(|_| {
                    let mut pick = rng.random_range(0.0..total);
                    let mut axis = 0;
                    while axis < 2 && pick >= areas[axis] {
                        pick -= areas[axis];
                        axis += 1;
                    }
                    let mut p = [0.0; 3];
                    for (a, v) in p.iter_mut().enumerate() {
                        *v = if a == axis {
                            if rng.random_bool(0.5) {
                                half[a]
                            } else {
                                -half[a]
                            }
                        } else {
                            rng.random_range(-half[a]..half[a])
                        };
                    }
                    p
                })
                .collect()
        }
    }
}

/// Points of every object before motion, already normalised to a scene of
/// unit diameter centred at the origin.
fn sample_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 3]>> {
    let mut placed: Vec<([f64; 3], f64)> = Vec::new();
    let mut objects = Vec::with_capacity(cfg.object_count);
    for _ in 0..cfg.object_count {
        let kind = match rng.random_range(0..3) {
            0 => Primitive::Plane,
            1 => Primitive::Box,
            _ => Primitive::Sphere,
        };
        let size = rng.random_range(0.25..0.4);
        let reach = size * 0.9;
        let mut center = [0.0; 3];
        for attempt in 0..100 {
            center = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let clear = placed.iter().all(|(c, r)| {
                let d = ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2) + (c[2] - center[2]).powi(2)).sqrt();
                d > r + reach + 0.05
            });
            if clear || attempt == 99 {
                break;
            }
        }
        placed.push((center, reach));
        let orient = rotation(unit_vector(rng), rng.random_range(0.0..std::f64::consts::PI));
        let pts: Vec<[f64; 3]> = sample_surface(kind, size, cfg.points_per_object, rng)
            .into_iter()
            .map(|p| {
                let q = mat_vec(&orient, p);
                [q[0] + center[0], q[1] + center[1], q[2] + center[2]]
            })
            .collect();
        objects.push(pts);
    }
    let all = PointSet::new(objects.iter().flatten().copied().collect()).expect("finite synthetic points");
    let d = all.diameter();
    let scale = if d > 0.0 { 1.0 / d } else { 1.0 };
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in all.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    for obj in &mut objects {
        for p in obj.iter_mut() {
            for a in 0..3 {
                p[a] = (p[a] - mid[a]) * scale;
            }
        }
    }
    objects
}

/// One scene pair, fully determined by `cfg` (including its seed).
///
/// Target point `j` is a shuffled copy of a moved source point, so the pair
/// is in exact correspondence unless noise or occlusion is configured.
pub fn synth_rigid_scene(cfg: &SynthConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = sample_objects(cfg, &mut rng);
    let mut pos1 = Vec::new();
    let mut flow = Vec::new();
    for obj in &objects {
        let n = obj.len() as f64;
        let c = obj.iter().fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
        let axis = unit_vector(&mut rng);
        let angle = uniform_up_to(&mut rng, cfg.rotation_max);
        let dir = unit_vector(&mut rng);
        let len = uniform_up_to(&mut rng, cfg.translation_max);
        let t = [dir[0] * len, dir[1] * len, dir[2] * len];
        let r = rotation_minus_identity(axis, angle);
        for p in obj {
            let m = mat_vec(&r, [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            let f = [m[0] + t[0], m[1] + t[1], m[2] + t[2]];
            pos1.push(p.map(|v| v as f32));
            flow.push(f.map(|v| v as f32));
        }
    }
    let n = pos1.len();
    let moved: Vec<[f32; 3]> = pos1
        .iter()
        .zip(&flow)
        .map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
        .collect();
    let moved: Vec<[f32; 3]> = if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        moved
            .iter()
            .map(|p| p.map(|v| (f64::from(v) + noise.sample(&mut rng)) as f32))
            .collect()
    } else {
        moved
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let dropped = ((cfg.occlusion_fraction * n as f64).round() as usize).min(n - 1);
    let (kept, gone) = order.split_at(n - dropped);
    let pos2 = kept.iter().map(|&i| moved[i]).collect();
    let mut pair = ScenePair::new(pos1, pos2, flow)?;
    if cfg.occlusion_fraction > 0.0 {
        let mut mask = vec![true; n];
        for &i in gone {
            mask[i] = false;
        }
        pair = pair.with_mask(mask)?;
    }
    Ok(pair)
}

/// Seed of scene `index` in a set generated from `base` (SplitMix64).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes seeded by [`scene_seed`] from `cfg.seed`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| {
            synth_rigid_scene(&SynthConfig {
                seed: scene_seed(cfg.seed, i as u64),
                ..cfg.clone()
            })
        })
        .collect()
}

//! Randomised checks shared by the integration tests and the acceptance run.
//! Each returns `Err` with a description of the first failure.

use pcflow_autograd::Tensor;
use pcflow_core::backbone::{LevelVars, PointConv};
use pcflow_core::config::{Aggregation, ModelConfig};
use pcflow_core::geom::{fps, knn, knn_radius, NeighborSet, PointSet};
use pcflow_core::global_fusion::GlobalFusion;
use pcflow_core::losses::{cfs_loss, lfc_loss, supervised_loss, without_self};
use pcflow_core::metrics::compute_metrics;
use pcflow_core::nn::{Ctx, ParamStore};
use pcflow_core::refinement::{upsample, warp, CostVolume, ReEmbedding, WarpedFrame};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{cloud, oracle, randomize, random_tensor, rng};

pub type Check = Result<(), String>;

/// Points on a coarse grid when `ties` is set, so equal distances are common.
fn instance_points(n: usize, ties: bool, r: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let mut p = [r.random::<f64>(), r.random(), r.random()];
            if ties {
                p = p.map(|v| (v * 4.0).floor() / 4.0);
            }
            p
        })
        .collect()
}

/// fps, knn and knn_radius against exhaustive references on `count` random
/// instances with `n ≤ 64` and `k ≤ 8`.
pub fn kernel_instances(count: u64) -> Check {
    for seed in 0..count {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..=64);
        let nq = r.random_range(1..=64);
        let ties = seed % 2 == 1;
        let refs = instance_points(n, ties, &mut r);
        let queries = instance_points(nq, ties, &mut r);
        let k = r.random_range(1..=8usize.min(n));
        let m = r.random_range(1..=n);
        let start = r.random_range(0..n);
        let radius = r.random_range(0.05..0.6);
        let (rs, qs) = (PointSet::new(refs.clone()).unwrap(), PointSet::new(queries.clone()).unwrap());
        let got = fps(&rs, m, start).map_err(|e| e.to_string())?;
        if got != oracle::fps(&refs, m, start) {
            return Err(format!("fps instance {seed}"));
        }
        if knn(&qs, &rs, k).unwrap().groups != oracle::knn(&queries, &refs, k) {
            return Err(format!("knn instance {seed}"));
        }
        if knn_radius(&qs, &rs, k, radius).unwrap().groups != oracle::knn_radius(&queries, &refs, k, radius) {
            return Err(format!("knn_radius instance {seed}"));
        }
    }
    Ok(())
}

/// Metric report against a per-point loop, compared exactly.
pub fn metric_instances(count: u64) -> Check {
    for seed in 0..count {
        let mut r = rng(2000 + seed);
        let n = r.random_range(1..=64);
        let scale = [0.01, 0.1, 1.0][seed as usize % 3];
        let gt: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0))).collect();
        let pred: Vec<[f64; 3]> = gt.iter().map(|g| g.map(|v| v + scale * r.random_range(-1.0..1.0))).collect();
        let rep = compute_metrics(&Tensor::from_points(&pred), &Tensor::from_points(&gt), None).unwrap();
        let o = oracle::metrics(&pred, &gt);
        if [rep.epe3d, rep.as3d, rep.ar3d, rep.out3d] != o || rep.count != n {
            return Err(format!("metrics instance {seed}: {rep:?} vs {o:?}"));
        }
    }
    Ok(())
}

pub fn warp_zero_is_identity() -> Check {
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, false);
    let p = random_tensor(20, 3, 1);
    let pv = ctx.constant(p.clone());
    let z = ctx.constant(Tensor::zeros(20, 3));
    let w = warp(&mut ctx, pv, z).map_err(|e| e.to_string())?;
    let same = ctx.value(w).data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    same.then_some(()).ok_or_else(|| "warp(p, 0) differs from p".into())
}

fn fusion(heads: usize, seed: u64) -> (ParamStore, GlobalFusion) {
    let cfg = ModelConfig {
        level_sizes: vec![16, 8],
        widths: vec![3, 6],
        heads,
        attention_dim: 8,
        pe_width: 4,
        embedding_width: 5,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let gf = GlobalFusion::new(&mut store, &cfg, Aggregation::Attentive, &mut rng(seed));
    randomize(&mut store, 1.0, seed + 1);
    (store, gf)
}

fn rows_sum_to_one(t: &Tensor, what: &str) -> Check {
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("{what} row {r} sums to {s}"));
        }
    }
    Ok(())
}

pub fn attention_rows_sum_to_one() -> Check {
    for (heads, seed) in [(1, 3), (2, 5), (4, 7)] {
        let (store, gf) = fusion(heads, seed);
        let mut ctx = Ctx::new(&store, false);
        let v = [random_tensor(7, 6, seed), random_tensor(5, 6, seed + 1), cloud(7, seed).to_tensor(), cloud(5, seed + 1).to_tensor()]
            .map(|t| ctx.constant(t));
        let dca = gf.dca_fusion(&mut ctx, v[0], v[1]).map_err(|e| e.to_string())?;
        let e = gf.embed_fused(&mut ctx, &dca, v[2], v[3]).map_err(|e| e.to_string())?;
        rows_sum_to_one(ctx.value(dca.attn_s_to_t), "attn_s_to_t")?;
        rows_sum_to_one(ctx.value(dca.attn_t_to_s), "attn_t_to_s")?;
        rows_sum_to_one(ctx.value(e.weights), "W")?;
    }
    Ok(())
}

fn shuffled(n: &NeighborSet, seed: u64) -> NeighborSet {
    let mut r = rng(seed);
    let mut out = n.clone();
    for g in &mut out.groups {
        g.shuffle(&mut r);
    }
    out
}

fn close_rel(a: &Tensor, b: &Tensor, tol: f64, what: &str) -> Check {
    for (x, y) in a.data().iter().zip(b.data()) {
        if (x - y).abs() > tol * x.abs().max(y.abs()).max(1.0) {
            return Err(format!("{what}: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Pointconv, both re-embeddings, the cost volume, the adaptive losses and
/// upsampling evaluated with shuffled neighbour groups; the global embedding
/// with permuted target points.
pub fn neighbor_order_invariance() -> Check {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let pc = PointConv::new(&mut store, "pc", 4, 5, 4, &mut r);
    let temporal = ReEmbedding::new(&mut store, "t", 4, 4, 4, &mut r);
    let spatial = ReEmbedding::new(&mut store, "s", 4, 4, 4, &mut r);
    let cv = CostVolume::new(&mut store, "cv", 4, &mut r);
    randomize(&mut store, 0.7, 12);
    let (sp, tp) = (cloud(24, 13), cloud(20, 14));
    let (sf, tf) = (random_tensor(24, 4, 15), random_tensor(20, 4, 16));
    let flow = random_tensor(24, 3, 17);
    let to_t = knn(&sp, &tp, 6).unwrap();
    let to_s = knn(&sp, &sp, 6).unwrap();
    let local = knn_radius(&sp, &sp, 8, 0.4).unwrap();
    let eval = |to_t: &NeighborSet, to_s: &NeighborSet, local: &NeighborSet| -> Vec<Tensor> {
        let mut ctx = Ctx::new(&store, false);
        let v = [sp.to_tensor(), sf.clone(), tp.to_tensor(), tf.clone(), flow.clone()].map(|t| ctx.constant(t));
        let query = WarpedFrame {
            positions: v[0],
            features: v[1],
        };
        let target = LevelVars {
            positions: v[2],
            features: v[3],
        };
        let own = LevelVars {
            positions: v[0],
            features: v[1],
        };
        let outs = [
            pc.forward(&mut ctx, v[2], v[3], v[0], to_t).unwrap(),
            temporal.forward(&mut ctx, query, target, to_t).unwrap(),
            spatial.forward(&mut ctx, query, own, to_s).unwrap(),
            cv.forward(&mut ctx, query, target, to_t, to_s).unwrap(),
            lfc_loss(&mut ctx, v[4], &without_self(local), None).unwrap().value,
            cfs_loss(&mut ctx, v[1], v[1], local, 0.95, None).unwrap().value,
        ];
        outs.iter().map(|&o| ctx.value(o).clone()).collect()
    };
    let base = eval(&to_t, &to_s, &local);
    for seed in 0..5 {
        let other = eval(&shuffled(&to_t, seed), &shuffled(&to_s, seed + 50), &shuffled(&local, seed + 100));
        for (i, (a, b)) in base.iter().zip(&other).enumerate() {
            close_rel(a, b, 1e-6, &format!("group aggregation {i}"))?;
        }
    }

    // Coarse-point order in upsampling.
    let coarse = cloud(9, 18);
    let values = random_tensor(9, 3, 19);
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut rng(20));
    let up = |c: &PointSet, v: &Tensor| {
        let mut ctx = Ctx::new(&store, false);
        let vv = ctx.constant(v.clone());
        let u = upsample(&mut ctx, c, &sp, vv, 3, 1e-8).unwrap();
        ctx.value(u).clone()
    };
    close_rel(&up(&coarse, &values), &up(&coarse.select(&perm), &values.select_rows(&perm)), 1e-6, "upsample")?;

    // Target permutation in the global embedding.
    let (gstore, gf) = fusion(2, 21);
    let (gs, gt) = (random_tensor(6, 6, 22), random_tensor(7, 6, 23));
    let (gsp, gtp) = (cloud(6, 24), cloud(7, 25));
    let mut perm: Vec<usize> = (0..7).collect();
    perm.shuffle(&mut rng(26));
    let embed = |t: &Tensor, tpos: &PointSet| {
        let mut ctx = Ctx::new(&gstore, false);
        let v = [gs.clone(), t.clone(), gsp.to_tensor(), tpos.to_tensor()].map(|x| ctx.constant(x));
        let e = gf.embed(&mut ctx, v[0], v[1], v[2], v[3]).unwrap();
        ctx.value(e.aggregated).clone()
    };
    close_rel(&embed(&gt, &gtp), &embed(&gt.select_rows(&perm), &gtp.select(&perm)), 1e-5, "global embedding")
}

pub fn losses_vanish_on_their_optimum() -> Check {
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, false);
    let gts = [random_tensor(16, 3, 30), random_tensor(4, 3, 31)];
    let preds: Vec<_> = gts.iter().map(|g| ctx.constant(g.clone())).collect();
    let sup = supervised_loss(&mut ctx, &preds, &gts, None, &[0.02, 0.04]).unwrap();
    if ctx.value(sup).item() != 0.0 {
        return Err(format!("supervised loss at pred = gt is {}", ctx.value(sup).item()));
    }
    let p = cloud(32, 32);
    let nb = knn_radius(&p, &p, 8, 0.5).unwrap();
    let constant = ctx.constant(Tensor::from_rows(&vec![[0.3, -0.1, 0.7]; 32]));
    let lfc = lfc_loss(&mut ctx, constant, &without_self(&nb), None).unwrap();
    if ctx.value(lfc.value).item() != 0.0 || lfc.all_empty {
        return Err(format!("lfc loss of a constant flow is {}", ctx.value(lfc.value).item()));
    }
    // Target features are positive multiples of the source rows, so every
    // similarity is one and clears the threshold.
    let f = random_tensor(32, 5, 33);
    let scale: Vec<f64> = (0..32).map(|i| 0.5 + i as f64 / 8.0).collect();
    let mut g = f.clone();
    for (i, s) in scale.iter().enumerate() {
        g.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    let same = knn_radius(&p, &p, 1, 0.5).unwrap();
    let (fv, gv) = (ctx.constant(f), ctx.constant(g));
    let cfs = cfs_loss(&mut ctx, fv, gv, &same, 0.95, None).unwrap();
    if ctx.value(cfs.value).item() != 0.0 {
        return Err(format!("cfs loss with all similarities above the threshold is {}", ctx.value(cfs.value).item()));
    }
    Ok(())
}

pub fn relaxed_accuracy_dominates_strict(count: u64) -> Check {
    for seed in 0..count {
        let mut r = rng(3000 + seed);
        let n = r.random_range(1..=50);
        let scale = r.random_range(0.0..0.5);
        let pred = random_tensor(n, 3, seed).map(|v| v * scale);
        let gt = random_tensor(n, 3, seed + 7777);
        let rep = compute_metrics(&pred, &gt, None).unwrap();
        if rep.ar3d < rep.as3d {
            return Err(format!("instance {seed}: AR3D {} < AS3D {}", rep.ar3d, rep.as3d));
        }
    }
    Ok(())
}

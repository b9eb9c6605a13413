//! Finite-difference cases on small instances with reduced widths. Each
//! returns the worst relative error over inputs and parameters.

use pcflow_autograd::Var;
use pcflow_core::backbone::{LevelVars, PointConv};
use pcflow_core::config::{Aggregation, ModelConfig};
use pcflow_core::geom::{knn, knn_radius, NeighborSet};
use pcflow_core::global_fusion::GlobalFusion;
use pcflow_core::losses::{cfs_loss, lfc_loss, supervised_loss};
use pcflow_core::nn::ParamStore;
use pcflow_core::refinement::{
    Coarse, CostVolume, FlowPredictor, LevelRefiner, ReEmbedding, RefineCounts, RefinerShape, WarpedFrame,
};

use super::{cloud, grad_check, project, randomize, random_tensor, rng};

pub fn pointconv() -> f64 {
    let mut store = ParamStore::new();
    let pc = PointConv::new(&mut store, "pc", 3, 4, 3, &mut rng(1));
    randomize(&mut store, 0.7, 2);
    let (p, c) = (cloud(8, 3), cloud(4, 4));
    let nb = knn(&c, &p, 3).unwrap();
    grad_check(&store, &[p.to_tensor(), random_tensor(8, 3, 5), c.to_tensor()], |ctx, v| {
        let out = pc.forward(ctx, v[0], v[1], v[2], &nb).unwrap();
        project(ctx, out, 6)
    })
}

fn fusion_module(aggregation: Aggregation) -> f64 {
    let cfg = ModelConfig {
        level_sizes: vec![8, 4],
        widths: vec![3, 4],
        heads: 2,
        attention_dim: 4,
        pe_width: 3,
        embedding_width: 4,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let gf = GlobalFusion::new(&mut store, &cfg, aggregation, &mut rng(7));
    randomize(&mut store, 0.6, 8);
    let inputs = [random_tensor(4, 4, 9), random_tensor(3, 4, 10), cloud(4, 11).to_tensor(), cloud(3, 12).to_tensor()];
    grad_check(&store, &inputs, |ctx, v| {
        let out = gf.embed(ctx, v[0], v[1], v[2], v[3]).unwrap();
        project(ctx, out.aggregated, 13)
    })
}

pub fn global_fusion() -> f64 {
    fusion_module(Aggregation::Attentive)
}

pub fn global_fusion_maxpool() -> f64 {
    fusion_module(Aggregation::Maxpool)
}

fn reembedding(spatial: bool) -> f64 {
    let (n, m, dq, dr) = (6, 5, 4, 3);
    let mut store = ParamStore::new();
    let re = ReEmbedding::new(&mut store, "re", dq, if spatial { dq } else { dr }, 3, &mut rng(14));
    randomize(&mut store, 0.5, 15);
    let qp = cloud(n, 16);
    let rp = if spatial { qp.clone() } else { cloud(m, 17) };
    let nb = knn(&qp, &rp, 3).unwrap();
    let mut inputs = vec![qp.to_tensor(), random_tensor(n, dq, 18)];
    if !spatial {
        inputs.push(rp.to_tensor());
        inputs.push(random_tensor(m, dr, 19));
    }
    grad_check(&store, &inputs, |ctx, v| {
        let query = WarpedFrame {
            positions: v[0],
            features: v[1],
        };
        let reference = if spatial {
            LevelVars {
                positions: v[0],
                features: v[1],
            }
        } else {
            LevelVars {
                positions: v[2],
                features: v[3],
            }
        };
        let out = re.forward(ctx, query, reference, &nb).unwrap();
        project(ctx, out, 20)
    })
}

pub fn temporal_reembedding() -> f64 {
    reembedding(false)
}

pub fn spatial_reembedding() -> f64 {
    reembedding(true)
}

pub fn cost_volume() -> f64 {
    let d = 3;
    let mut store = ParamStore::new();
    let cv = CostVolume::new(&mut store, "cv", d, &mut rng(21));
    randomize(&mut store, 0.5, 22);
    let (wp, tp) = (cloud(6, 23), cloud(5, 24));
    let tg = knn(&wp, &tp, 3).unwrap();
    let sg = knn(&wp, &wp, 3).unwrap();
    let inputs = [wp.to_tensor(), random_tensor(6, d, 25), tp.to_tensor(), random_tensor(5, d, 26)];
    grad_check(&store, &inputs, |ctx, v| {
        let out = cv
            .forward(
                ctx,
                WarpedFrame {
                    positions: v[0],
                    features: v[1],
                },
                LevelVars {
                    positions: v[2],
                    features: v[3],
                },
                &tg,
                &sg,
            )
            .unwrap();
        project(ctx, out, 27)
    })
}

pub fn predict_flow() -> f64 {
    let mut store = ParamStore::new();
    let fp = FlowPredictor::new(&mut store, "fp", 4, 3, 3, &mut rng(28));
    randomize(&mut store, 0.6, 29);
    let p = cloud(8, 30);
    let nb = knn(&p, &p, 3).unwrap();
    grad_check(&store, &[random_tensor(8, 4, 31), p.to_tensor()], |ctx, v| {
        let out = fp.forward(ctx, v[0], v[1], &nb).unwrap();
        project(ctx, out, 32)
    })
}

pub fn refine_level() -> f64 {
    let (d, dc) = (3, 2);
    let mut store = ParamStore::new();
    let lr = LevelRefiner::new(
        &mut store,
        "lr",
        RefinerShape {
            width: d,
            coarse_width: dc,
            weight_hidden: 3,
            temporal: true,
            spatial: true,
            counts: RefineCounts {
                str_k: 3,
                cost_k_target: 2,
                cost_k_self: 2,
                flow_k: 3,
                upsample_k: 2,
            },
            eps: 1e-8,
        },
        &mut rng(33),
    );
    randomize(&mut store, 0.4, 34);
    let (s, t, c) = (cloud(8, 35), cloud(8, 36), cloud(4, 37));
    let inputs = [
        random_tensor(8, d, 38),
        random_tensor(8, d, 39),
        random_tensor(4, 3, 40).map(|x| 0.05 * x),
        random_tensor(4, dc, 41),
    ];
    grad_check(&store, &inputs, |ctx, v| {
        let sp = ctx.constant(s.to_tensor());
        let tp = ctx.constant(t.to_tensor());
        let out = lr
            .forward(
                ctx,
                &s,
                LevelVars {
                    positions: sp,
                    features: v[0],
                },
                &t,
                LevelVars {
                    positions: tp,
                    features: v[1],
                },
                Some(Coarse {
                    positions: &c,
                    flow: v[2],
                    features: v[3],
                }),
            )
            .unwrap();
        let a = project(ctx, out.flow, 42);
        let b = project(ctx, out.features, 43);
        ctx.graph.add(a, b)
    })
}

pub fn supervised() -> f64 {
    let store = ParamStore::new();
    let gts = [random_tensor(6, 3, 44), random_tensor(3, 3, 45)];
    let masks = vec![vec![true, false, true, true, true, false], vec![true, true, false]];
    grad_check(&store, &[random_tensor(6, 3, 46), random_tensor(3, 3, 47)], |ctx, v: &[Var]| {
        supervised_loss(ctx, v, &gts, Some(&masks), &[0.02, 0.04]).unwrap()
    })
}

pub fn lfc() -> f64 {
    let store = ParamStore::new();
    let p = cloud(10, 48);
    let nb = without_self_radius(&p, 4, 0.6);
    grad_check(&store, &[random_tensor(10, 3, 49)], |ctx, v| lfc_loss(ctx, v[0], &nb, None).unwrap().value)
}

fn without_self_radius(p: &pcflow_core::geom::PointSet, k: usize, r: f64) -> NeighborSet {
    pcflow_core::losses::without_self(&knn_radius(p, p, k, r).unwrap())
}

pub fn cfs() -> f64 {
    let store = ParamStore::new();
    let p = cloud(10, 50);
    let nb = knn_radius(&p, &p, 4, 0.6).unwrap();
    // Threshold 1 keeps every pair on the active side of the hinge.
    grad_check(&store, &[random_tensor(10, 4, 51), random_tensor(10, 4, 52)], |ctx, v| {
        cfs_loss(ctx, v[0], v[1], &nb, 1.0, None).unwrap().value
    })
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("pointconv", pointconv()),
        ("global fusion (attentive)", global_fusion()),
        ("global fusion (maxpool)", global_fusion_maxpool()),
        ("temporal re-embedding", temporal_reembedding()),
        ("spatial re-embedding", spatial_reembedding()),
        ("cost volume", cost_volume()),
        ("predict flow", predict_flow()),
        ("refine level", refine_level()),
        ("supervised loss", supervised()),
        ("lfc loss", lfc()),
        ("cfs loss", cfs()),
    ]
}

//! Hierarchical supervised loss and the two domain-adaptive losses.

use std::rc::Rc;

use pcflow_autograd::{Tensor, Var};

use crate::config::{AblationConfig, LossConfig};
use crate::error::{Error, Result};
use crate::geom::{knn_radius, NeighborSet, PointSet};
use crate::model::{ForwardOutput, SceneGeometry};
use crate::nn::Ctx;

/// Added to cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// `Σ_l δ_l / N_l Σ_i ‖gt_i − pred_i‖`. Masked-out points are skipped and
/// `N_l` counts only valid points.
pub fn supervised_loss(ctx: &mut Ctx, preds: &[Var], gts: &[Tensor], masks: Option<&[Vec<bool>]>, deltas: &[f64]) -> Result<Var> {
    if preds.len() != gts.len() || deltas.len() < preds.len() {
        return Err(Error::shape(
            "supervised_loss levels",
            format!("{} predictions and deltas", preds.len()),
            format!("{} gt, {} deltas", gts.len(), deltas.len()),
        ));
    }
    if let Some(m) = masks {
        if m.len() != preds.len() {
            return Err(Error::shape("supervised_loss masks", preds.len(), m.len()));
        }
    }
    let mut total: Option<Var> = None;
    for (l, (&pred, gt)) in preds.iter().zip(gts).enumerate() {
        if ctx.value(pred).shape() != gt.shape() {
            return Err(Error::shape(
                "supervised_loss level",
                format!("{:?}", gt.shape()),
                format!("{:?}", ctx.value(pred).shape()),
            ));
        }
        let gt = ctx.constant(gt.clone());
        let diff = ctx.graph.sub(gt, pred);
        let norms = ctx.graph.row_norm(diff);
        let norms = match masks {
            Some(m) => {
                let keep: Vec<usize> = (0..m[l].len()).filter(|&i| m[l][i]).collect();
                if m[l].len() != ctx.value(norms).rows() {
                    return Err(Error::shape("supervised_loss mask length", ctx.value(norms).rows(), m[l].len()));
                }
                if keep.is_empty() {
                    continue;
                }
                ctx.graph.gather_rows(norms, keep.into())
            }
            None => norms,
        };
        let n = ctx.value(norms).rows() as f64;
        let s = ctx.graph.sum(norms);
        let term = ctx.graph.scale(s, deltas[l] / n);
        total = Some(match total {
            Some(t) => ctx.graph.add(t, term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| ctx.constant(Tensor::scalar(0.0))))
}

/// Result of an adaptive loss: the scalar and whether every group was empty.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveLoss {
    pub value: Var,
    pub all_empty: bool,
}

/// Sum of the per-group means of `per_pair` values divided by the number of
/// valid query points; an empty group adds zero.
fn mean_of_group_means(ctx: &mut Ctx, per_pair: Var, neighbors: &NeighborSet, valid: Option<&[bool]>) -> AdaptiveLoss {
    let pairs = neighbors.pairs();
    let count = valid.map_or(neighbors.query_count(), |v| v.iter().filter(|&&b| b).count());
    if pairs.neighbor.is_empty() || count == 0 {
        return AdaptiveLoss {
            value: ctx.constant(Tensor::scalar(0.0)),
            all_empty: true,
        };
    }
    let g = &mut ctx.graph;
    let means = g.segment_mean(per_pair, &pairs.segments);
    let s = g.sum(means);
    AdaptiveLoss {
        value: g.scale(s, 1.0 / count as f64),
        all_empty: false,
    }
}

fn check_valid(valid: Option<&[bool]>, n: usize) -> Result<()> {
    match valid {
        Some(v) if v.len() != n => Err(Error::shape("loss mask", n, v.len())),
        _ => Ok(()),
    }
}

/// Local flow consistency: mean over the valid points of the mean flow
/// difference to their neighbours. Masked-out points should have empty
/// groups.
pub fn lfc_loss(ctx: &mut Ctx, flow: Var, neighbors: &NeighborSet, valid: Option<&[bool]>) -> Result<AdaptiveLoss> {
    if neighbors.query_count() != ctx.value(flow).rows() {
        return Err(Error::shape("lfc_loss groups", ctx.value(flow).rows(), neighbors.query_count()));
    }
    check_valid(valid, neighbors.query_count())?;
    if neighbors.pair_count() == 0 {
        return Ok(mean_of_group_means(ctx, flow, neighbors, valid));
    }
    let pairs = neighbors.pairs();
    let g = &mut ctx.graph;
    let a = g.gather_rows(flow, pairs.query.clone());
    let b = g.gather_rows(flow, pairs.neighbor.clone());
    let d = g.sub(a, b);
    let norms = g.row_norm(d);
    Ok(mean_of_group_means(ctx, norms, neighbors, valid))
}

/// `F(cos(f_i, g_j) − TH)` with `F(x) = max(−x, 0)`, averaged per group and
/// then over the valid points.
pub fn cfs_loss(
    ctx: &mut Ctx,
    features: Var,
    target_features: Var,
    neighbors: &NeighborSet,
    threshold: f64,
    valid: Option<&[bool]>,
) -> Result<AdaptiveLoss> {
    if ctx.value(features).cols() != ctx.value(target_features).cols() {
        return Err(Error::shape(
            "cfs_loss widths",
            ctx.value(features).cols(),
            ctx.value(target_features).cols(),
        ));
    }
    if neighbors.query_count() != ctx.value(features).rows() {
        return Err(Error::shape("cfs_loss groups", ctx.value(features).rows(), neighbors.query_count()));
    }
    check_valid(valid, neighbors.query_count())?;
    if neighbors.pair_count() == 0 {
        return Ok(mean_of_group_means(ctx, features, neighbors, valid));
    }
    let pairs = neighbors.pairs();
    let cs = cosine_similarity(ctx, features, target_features, &pairs.query, &pairs.neighbor);
    let g = &mut ctx.graph;
    let shifted = g.add_scalar(cs, -threshold);
    let neg = g.scale(shifted, -1.0);
    let penalty = g.relu(neg);
    Ok(mean_of_group_means(ctx, penalty, neighbors, valid))
}

/// Row-wise cosine similarity between `a[ia[p]]` and `b[ib[p]]`.
pub fn cosine_similarity(ctx: &mut Ctx, a: Var, b: Var, ia: &Rc<[usize]>, ib: &Rc<[usize]>) -> Var {
    let g = &mut ctx.graph;
    let x = g.gather_rows(a, ia.clone());
    let y = g.gather_rows(b, ib.clone());
    let xy = g.mul(x, y);
    let dot = g.row_sum(xy);
    let nx = g.row_norm(x);
    let ny = g.row_norm(y);
    let denom = g.mul(nx, ny);
    let denom = g.add_scalar(denom, COSINE_EPS);
    g.div(dot, denom)
}

/// Penalty applied to `cos − TH`.
pub fn similarity_penalty(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

pub fn total_loss(ctx: &mut Ctx, sup: Var, lfc: Var, cfs: Var, lambdas: [f64; 3]) -> Var {
    let g = &mut ctx.graph;
    let a = g.scale(sup, lambdas[0]);
    let b = g.scale(lfc, lambdas[1]);
    let c = g.scale(cfs, lambdas[2]);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// Drops each query's own index from its group.
pub fn without_self(neighbors: &NeighborSet) -> NeighborSet {
    NeighborSet {
        groups: neighbors
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| g.iter().copied().filter(|&j| j != i).collect())
            .collect(),
        k_max: neighbors.k_max,
        radius: neighbors.radius,
    }
}

/// Per-scene supervision precomputed once: GT per level and the
/// neighbourhoods of both adaptive losses.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub gt_levels: Vec<Tensor>,
    pub masks: Option<Vec<Vec<bool>>>,
    /// Radius neighbours of every source point among the other source points.
    pub lfc_groups: NeighborSet,
    /// Radius neighbours of every GT-warped source point in the target.
    pub cfs_groups: NeighborSet,
}

impl LossTargets {
    /// `gt` and `mask` are at full resolution and follow the source points
    /// of `geo`.
    pub fn new(geo: &SceneGeometry, gt: &Tensor, mask: Option<&[bool]>, cfg: &LossConfig) -> Result<Self> {
        let source = &geo.source.positions[0];
        let target = &geo.target.positions[0];
        if gt.shape() != (source.len(), 3) {
            return Err(Error::shape("gt flow", format!("{}x3", source.len()), format!("{:?}", gt.shape())));
        }
        let levels = geo.source.levels();
        let index: Vec<Vec<usize>> = (0..levels).map(|l| geo.source.composed_indices(l)).collect();
        let gt_levels = index.iter().map(|idx| gt.select_rows(idx)).collect();
        let masks = match mask {
            Some(m) => {
                if m.len() != source.len() {
                    return Err(Error::shape("mask", source.len(), m.len()));
                }
                Some(index.iter().map(|idx| idx.iter().map(|&i| m[i]).collect()).collect())
            }
            None => None,
        };
        let k = cfg.k.min(source.len());
        let mut lfc_groups = without_self(&knn_radius(source, source, k, cfg.radius)?);
        let warped: Vec<[f64; 3]> = source
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + gt.get(i, 0), p[1] + gt.get(i, 1), p[2] + gt.get(i, 2)])
            .collect();
        let warped = PointSet::new(warped)?;
        let mut cfs_groups = knn_radius(&warped, target, cfg.k.min(target.len()), cfg.radius)?;
        if let Some(m) = mask {
            lfc_groups = lfc_groups.restrict(m, m);
            cfs_groups = cfs_groups.restrict(m, &vec![true; target.len()]);
        }
        Ok(Self {
            gt_levels,
            masks,
            lfc_groups,
            cfs_groups,
        })
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub lfc: f64,
    pub cfs: f64,
    pub total: f64,
    pub lfc_all_empty: bool,
    pub cfs_all_empty: bool,
}

/// Total training loss of one forward pass; disabled terms are omitted.
pub fn scene_loss(
    ctx: &mut Ctx,
    out: &ForwardOutput,
    targets: &LossTargets,
    cfg: &LossConfig,
    ablation: &AblationConfig,
) -> Result<(Var, LossBreakdown)> {
    let sup = supervised_loss(ctx, &out.flows, &targets.gt_levels, targets.masks.as_deref(), &cfg.deltas)?;
    let valid = targets.masks.as_ref().map(|m| m[0].as_slice());
    let (lfc, lfc_empty) = if ablation.use_lfc && cfg.lambdas[1] > 0.0 {
        let l = lfc_loss(ctx, out.flows[0], &targets.lfc_groups, valid)?;
        (l.value, l.all_empty)
    } else {
        (ctx.constant(Tensor::scalar(0.0)), false)
    };
    let (cfs, cfs_empty) = if ablation.use_cfs && cfg.lambdas[2] > 0.0 {
        let l = cfs_loss(ctx, out.features, out.target_features, &targets.cfs_groups, cfg.threshold, valid)?;
        (l.value, l.all_empty)
    } else {
        (ctx.constant(Tensor::scalar(0.0)), false)
    };
    let total = total_loss(ctx, sup, lfc, cfs, cfg.lambdas);
    let breakdown = LossBreakdown {
        supervised: ctx.value(sup).item(),
        lfc: ctx.value(lfc).item(),
        cfs: ctx.value(cfs).item(),
        total: ctx.value(total).item(),
        lfc_all_empty: lfc_empty,
        cfs_all_empty: cfs_empty,
    };
    Ok((total, breakdown))
}

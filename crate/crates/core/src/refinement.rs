//! Residual flow refinement for one pyramid level.
//!
//! The coarse flow and features are upsampled onto the level, the source is
//! warped, its features are re-embedded against the target (temporal) and
//! against itself (spatial), a patch-to-patch cost volume is built, and a
//! residual flow is regressed on top of the upsampled estimate.

use pcflow_autograd::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{LevelVars, PointConv};
use crate::error::{Error, Result};
use crate::geom::{inverse_distance_weights, knn, NeighborSet, PointSet};
use crate::global_fusion::{pair_code, PAIR_CODE_WIDTH};
use crate::nn::{Ctx, Init, InputPart, Linear, Mlp, ParamStore};

/// Width of the learned pair-code branch inside the re-embedding score.
pub const SCORE_CODE_WIDTH: usize = 16;
/// Hidden width of the re-embedding score network.
pub const SCORE_HIDDEN: usize = 16;
/// Hidden width of the direction networks in the cost volume.
pub const DIRECTION_HIDDEN: usize = 8;

/// Warped source positions and the features attached to them.
#[derive(Clone, Copy, Debug)]
pub struct WarpedFrame {
    pub positions: Var,
    pub features: Var,
}

/// `positions + flow`.
pub fn warp(ctx: &mut Ctx, positions: Var, flow: Var) -> Result<Var> {
    let (a, b) = (ctx.value(positions).shape(), ctx.value(flow).shape());
    if a != b || a.1 != 3 {
        return Err(Error::shape("warp", format!("{a:?}"), format!("{b:?}")));
    }
    Ok(ctx.graph.add(positions, flow))
}

/// Inverse-distance interpolation of coarse rows onto fine points.
pub fn upsample(ctx: &mut Ctx, coarse: &PointSet, fine: &PointSet, values: Var, k: usize, eps: f64) -> Result<Var> {
    if ctx.value(values).rows() != coarse.len() {
        return Err(Error::shape("upsample values", coarse.len(), ctx.value(values).rows()));
    }
    let w = inverse_distance_weights(coarse, fine, k.min(coarse.len()), eps)?;
    Ok(ctx.graph.weighted_gather(values, w.index, w.weights, w.k))
}

/// Upsamples both the coarse flow and the coarse features.
pub fn upsample_flow_and_features(
    ctx: &mut Ctx,
    coarse: &PointSet,
    fine: &PointSet,
    coarse_flow: Var,
    coarse_features: Var,
    k: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let flow = upsample(ctx, coarse, fine, coarse_flow, k, eps)?;
    let features = upsample(ctx, coarse, fine, coarse_features, k, eps)?;
    Ok((flow, features))
}

pub(crate) fn point_set(ctx: &Ctx, v: Var) -> Result<PointSet> {
    let t = ctx.value(v);
    if !t.all_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            detail: "warped positions are not finite".into(),
        });
    }
    PointSet::from_tensor(t)
}

/// Re-embeds query features against a reference frame:
/// `TRF_ij = MLP(g_j, f_i, PE_ij)`, scored and softmaxed per group, then
/// summed with those scores.
#[derive(Clone, Debug)]
pub struct ReEmbedding {
    pub transform: Mlp,
    pub code: Mlp,
    pub score: Mlp,
    pub query_dim: usize,
    pub reference_dim: usize,
}

impl ReEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        reference_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            transform: Mlp::new(
                store,
                &format!("{name}.transform"),
                &[reference_dim + query_dim + PAIR_CODE_WIDTH, out_dim, out_dim],
                true,
                rng,
            ),
            code: Mlp::new(store, &format!("{name}.code"), &[PAIR_CODE_WIDTH, SCORE_CODE_WIDTH], true, rng),
            score: Mlp::new(store, &format!("{name}.score"), &[out_dim + SCORE_CODE_WIDTH, SCORE_HIDDEN, 1], false, rng),
            query_dim,
            reference_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.transform.out_dim()
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        query: WarpedFrame,
        reference: LevelVars,
        neighbors: &NeighborSet,
    ) -> Result<Var> {
        let (nq, dq) = ctx.value(query.features).shape();
        let (nr, dr) = ctx.value(reference.features).shape();
        if dq != self.query_dim || dr != self.reference_dim {
            return Err(Error::shape(
                "re-embedding widths",
                format!("{}/{}", self.query_dim, self.reference_dim),
                format!("{dq}/{dr}"),
            ));
        }
        if neighbors.query_count() != nq || ctx.value(query.positions).rows() != nq {
            return Err(Error::shape("re-embedding groups", nq, neighbors.query_count()));
        }
        if ctx.value(reference.positions).rows() != nr {
            return Err(Error::shape("re-embedding reference", nr, ctx.value(reference.positions).rows()));
        }
        if let Some(i) = neighbors.groups.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("re-embedding: neighbour group {i} is empty")));
        }
        let pairs = neighbors.pairs();
        let pe = pair_code(ctx, query.positions, reference.positions, &pairs.query, &pairs.neighbor);
        let trf = self.transform.forward_parts(
            ctx,
            &[
                InputPart::gathered(reference.features, pairs.neighbor.clone()),
                InputPart::gathered(query.features, pairs.query.clone()),
                InputPart::rows(pe),
            ],
        );
        let code = self.code.forward(ctx, pe);
        let score_in = ctx.graph.concat_cols(&[trf, code]);
        let score = self.score.forward(ctx, score_in);
        let g = &mut ctx.graph;
        let lm = g.segment_softmax(score, &pairs.segments);
        let weighted = g.mul_col(trf, lm);
        Ok(g.segment_sum(weighted, &pairs.segments))
    }

    /// Reference features passed through the transform alone, with the
    /// query and pair-code slots zeroed.
    pub fn reference_pathway(&self, ctx: &mut Ctx, reference_features: Var) -> Var {
        let n = ctx.value(reference_features).rows();
        let pad = ctx.constant(Tensor::zeros(n, self.query_dim + PAIR_CODE_WIDTH));
        let input = ctx.graph.concat_cols(&[reference_features, pad]);
        self.transform.forward(ctx, input)
    }
}

/// Patch-to-patch matching cost between the warped source and the target.
#[derive(Clone, Debug)]
pub struct CostVolume {
    pub cost: Mlp,
    pub point_direction: Mlp,
    pub patch_direction: Mlp,
}

impl CostVolume {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cost: Mlp::new(store, &format!("{name}.cost"), &[2 * width + 3, width, width], true, rng),
            point_direction: Mlp::new(store, &format!("{name}.point_dir"), &[3, DIRECTION_HIDDEN, width], false, rng),
            patch_direction: Mlp::new(store, &format!("{name}.patch_dir"), &[3, DIRECTION_HIDDEN, width], false, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.cost.out_dim()
    }

    /// `target_groups` joins each warped point to target points, `self_groups`
    /// joins it to other warped points.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        warped: WarpedFrame,
        target: LevelVars,
        target_groups: &NeighborSet,
        self_groups: &NeighborSet,
    ) -> Result<Var> {
        let d = self.width();
        let n = ctx.value(warped.positions).rows();
        if ctx.value(warped.features).cols() != d || ctx.value(target.features).cols() != d {
            return Err(Error::shape(
                "cost volume widths",
                d,
                format!("{}/{}", ctx.value(warped.features).cols(), ctx.value(target.features).cols()),
            ));
        }
        if target_groups.query_count() != n || self_groups.query_count() != n {
            return Err(Error::shape("cost volume groups", n, target_groups.query_count()));
        }
        for groups in [target_groups, self_groups] {
            if let Some(i) = groups.groups.iter().position(Vec::is_empty) {
                return Err(Error::invalid(format!("cost volume: neighbour group {i} is empty")));
            }
        }
        let tp = target_groups.pairs();
        let g = &mut ctx.graph;
        let y = g.gather_rows(target.positions, tp.neighbor.clone());
        let wx = g.gather_rows(warped.positions, tp.query.clone());
        let dir = g.sub(y, wx);
        let cost = self.cost.forward_parts(
            ctx,
            &[
                InputPart::gathered(warped.features, tp.query.clone()),
                InputPart::gathered(target.features, tp.neighbor.clone()),
                InputPart::rows(dir),
            ],
        );
        let gate = self.point_direction.forward(ctx, dir);
        let g = &mut ctx.graph;
        let gated = g.mul(gate, cost);
        let cv_point = g.segment_sum(gated, &tp.segments);

        let sp = self_groups.pairs();
        let wk = g.gather_rows(warped.positions, sp.neighbor.clone());
        let wi = g.gather_rows(warped.positions, sp.query.clone());
        let dir = g.sub(wk, wi);
        let member = g.gather_rows(cv_point, sp.neighbor.clone());
        let gate = self.patch_direction.forward(ctx, dir);
        let g = &mut ctx.graph;
        let gated = g.mul(gate, member);
        Ok(g.segment_sum(gated, &sp.segments))
    }
}

/// PointConv over the warped frame, an MLP, and a zero-initialised linear
/// head of width 3.
#[derive(Clone, Debug)]
pub struct FlowPredictor {
    pub conv: PointConv,
    pub mlp: Mlp,
    pub head: Linear,
}

impl FlowPredictor {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: PointConv::new(store, &format!("{name}.conv"), in_dim, width, hidden, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[width, width], true, rng),
            head: Linear::new(store, &format!("{name}.head"), width, 3, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, input: Var, positions: Var, neighbors: &NeighborSet) -> Result<Var> {
        let h = self.conv.forward(ctx, positions, input, positions, neighbors)?;
        let h = self.mlp.forward(ctx, h);
        Ok(self.head.forward(ctx, h))
    }
}

/// Neighbour counts used inside one refinement level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineCounts {
    pub str_k: usize,
    pub cost_k_target: usize,
    pub cost_k_self: usize,
    pub flow_k: usize,
    pub upsample_k: usize,
}

/// Flow and features carried from the next coarser level.
#[derive(Clone, Copy, Debug)]
pub struct Coarse<'a> {
    pub positions: &'a PointSet,
    pub flow: Var,
    pub features: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub flow: Var,
    pub upsampled_flow: Var,
    pub residual: Var,
    pub features: Var,
    pub warped_positions: Var,
}

/// Refinement modules of one level.
#[derive(Clone, Debug)]
pub struct LevelRefiner {
    pub temporal: Option<ReEmbedding>,
    pub spatial: Option<ReEmbedding>,
    pub fuse: Mlp,
    pub cost: CostVolume,
    pub predictor: FlowPredictor,
    pub width: usize,
    pub coarse_width: usize,
    pub counts: RefineCounts,
    pub eps: f64,
}

/// Settings needed to build a [`LevelRefiner`].
#[derive(Clone, Copy, Debug)]
pub struct RefinerShape {
    pub width: usize,
    /// Width of the upsampled coarse features; 0 when there is no coarser level.
    pub coarse_width: usize,
    pub weight_hidden: usize,
    pub temporal: bool,
    pub spatial: bool,
    pub counts: RefineCounts,
    pub eps: f64,
}

impl LevelRefiner {
    pub fn new(store: &mut ParamStore, name: &str, shape: RefinerShape, rng: &mut ChaCha8Rng) -> Self {
        let d = shape.width;
        let df = d + shape.coarse_width;
        let temporal = shape
            .temporal
            .then(|| ReEmbedding::new(store, &format!("{name}.temporal"), df, d, d, rng));
        let spatial = shape
            .spatial
            .then(|| ReEmbedding::new(store, &format!("{name}.spatial"), df, df, d, rng));
        let fuse_in = match (shape.temporal, shape.spatial) {
            (true, true) => 2 * d,
            (false, false) => df,
            _ => d,
        };
        Self {
            temporal,
            spatial,
            fuse: Mlp::new(store, &format!("{name}.fuse"), &[fuse_in, d], true, rng),
            cost: CostVolume::new(store, &format!("{name}.cost"), d, rng),
            predictor: FlowPredictor::new(store, &format!("{name}.predict"), 2 * d, d, shape.weight_hidden, rng),
            width: d,
            coarse_width: shape.coarse_width,
            counts: shape.counts,
            eps: shape.eps,
        }
    }

    /// `source_points` and `target_points` are the level's positions as
    /// point sets; `source`/`target` carry the same positions on the graph.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        source_points: &PointSet,
        source: LevelVars,
        target_points: &PointSet,
        target: LevelVars,
        coarse: Option<Coarse>,
    ) -> Result<LevelOutput> {
        let n = source_points.len();
        let (up_flow, features) = match coarse {
            Some(c) => {
                let expected = self.coarse_width;
                if ctx.value(c.features).cols() != expected {
                    return Err(Error::shape("coarse feature width", expected, ctx.value(c.features).cols()));
                }
                let (flow, up) =
                    upsample_flow_and_features(ctx, c.positions, source_points, c.flow, c.features, self.counts.upsample_k, self.eps)?;
                (flow, ctx.graph.concat_cols(&[source.features, up]))
            }
            None => {
                if self.coarse_width != 0 {
                    return Err(Error::invalid("refiner expects coarse features"));
                }
                (ctx.constant(Tensor::zeros(n, 3)), source.features)
            }
        };
        let wx = warp(ctx, source.positions, up_flow)?;
        let warped_points = point_set(ctx, wx)?;
        let warped = WarpedFrame {
            positions: wx,
            features,
        };
        // One search per reference set; smaller neighbourhoods are prefixes.
        let c = self.counts;
        let m = target_points.len();
        let to_target = knn(&warped_points, target_points, c.str_k.max(c.cost_k_target).min(m))?;
        let to_self = knn(&warped_points, &warped_points, c.str_k.max(c.cost_k_self).max(c.flow_k).min(n))?;
        let strf = self.reembed(
            ctx,
            warped,
            target,
            &to_target.truncate(c.str_k),
            &to_self.truncate(c.str_k),
        )?;
        let warped = WarpedFrame {
            positions: wx,
            features: strf,
        };
        let cv = self.cost.forward(
            ctx,
            warped,
            target,
            &to_target.truncate(c.cost_k_target),
            &to_self.truncate(c.cost_k_self),
        )?;
        let input = ctx.graph.concat_cols(&[cv, strf]);
        let flow_groups = to_self.truncate(c.flow_k);
        let residual = self.predictor.forward(ctx, input, wx, &flow_groups)?;
        let flow = ctx.graph.add(up_flow, residual);
        Ok(LevelOutput {
            flow,
            upsampled_flow: up_flow,
            residual,
            features: strf,
            warped_positions: wx,
        })
    }

    /// Spatial-temporal re-embedding followed by the fusion MLP.
    /// `temporal_groups` index the target, `spatial_groups` the warped frame.
    pub fn reembed(
        &self,
        ctx: &mut Ctx,
        warped: WarpedFrame,
        target: LevelVars,
        temporal_groups: &NeighborSet,
        spatial_groups: &NeighborSet,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        if let Some(t) = &self.temporal {
            parts.push(t.forward(ctx, warped, target, temporal_groups)?);
        }
        if let Some(s) = &self.spatial {
            let frame = LevelVars {
                positions: warped.positions,
                features: warped.features,
            };
            parts.push(s.forward(ctx, warped, frame, spatial_groups)?);
        }
        let input = match parts.len() {
            0 => warped.features,
            1 => parts[0],
            _ => ctx.graph.concat_cols(&parts),
        };
        Ok(self.fuse.forward(ctx, input))
    }
}

//! PointConv feature pyramid.
//!
//! Geometry (sampling indices and neighbour groups) depends only on the input
//! positions and is computed once per frame by [`PyramidGeometry`]; features
//! are computed on the graph by [`Backbone::forward`].

use pcflow_autograd::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::{fps, knn, NeighborSet, PointSet};
use crate::nn::{Ctx, Init, Linear, Mlp, ParamStore, LEAKY_SLOPE};

/// Continuous convolution over neighbour groups: a weight network over
/// relative coordinates gates each neighbour's features, the gated features
/// are summed per group, projected, and rectified.
#[derive(Clone, Debug)]
pub struct PointConv {
    pub weight_net: Mlp,
    pub projection: Linear,
}

impl PointConv {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight_net: Mlp::new(store, &format!("{name}.weight_net"), &[3, hidden, in_dim], false, rng),
            projection: Linear::new(store, &format!("{name}.proj"), in_dim, out_dim, Init::FanIn, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.projection.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.projection.out_dim
    }

    /// `positions`/`features` describe the reference points, `centers` the
    /// output points; `neighbors` groups reference indices per center.
    pub fn forward(&self, ctx: &mut Ctx, positions: Var, features: Var, centers: Var, neighbors: &NeighborSet) -> Result<Var> {
        let n_ref = ctx.value(positions).rows();
        if ctx.value(features).rows() != n_ref {
            return Err(Error::shape("pointconv features", format!("{n_ref} rows"), ctx.value(features).rows()));
        }
        if ctx.value(features).cols() != self.in_dim() {
            return Err(Error::shape("pointconv feature width", self.in_dim(), ctx.value(features).cols()));
        }
        if neighbors.query_count() != ctx.value(centers).rows() {
            return Err(Error::shape("pointconv groups", ctx.value(centers).rows(), neighbors.query_count()));
        }
        if let Some(i) = neighbors.groups.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("pointconv: neighbour group {i} is empty")));
        }
        let pairs = neighbors.pairs();
        let g = &mut ctx.graph;
        let member = g.gather_rows(positions, pairs.neighbor.clone());
        let center = g.gather_rows(centers, pairs.query.clone());
        let rel = g.sub(member, center);
        let weights = self.weight_net.forward(ctx, rel);
        let g = &mut ctx.graph;
        let feats = g.gather_rows(features, pairs.neighbor.clone());
        let gated = g.mul(weights, feats);
        let pooled = g.segment_sum(gated, &pairs.segments);
        let projected = self.projection.forward(ctx, pooled);
        Ok(ctx.graph.leaky_relu(projected, LEAKY_SLOPE))
    }
}

/// Positions and grouping of every level for one frame.
#[derive(Clone, Debug)]
pub struct PyramidGeometry {
    pub positions: Vec<PointSet>,
    /// `sample_indices[l]` maps level `l + 1` points to level `l` indices.
    pub sample_indices: Vec<Vec<usize>>,
    /// `neighbors[0]` groups level 0 onto itself; `neighbors[l]` groups the
    /// level-`l` centers into level `l - 1`.
    pub neighbors: Vec<NeighborSet>,
}

impl PyramidGeometry {
    pub fn new(points: &PointSet, cfg: &ModelConfig) -> Result<Self> {
        if points.len() != cfg.input_points() {
            return Err(Error::invalid(format!(
                "pyramid expects exactly {} input points, got {}; resample first",
                cfg.input_points(),
                points.len()
            )));
        }
        let mut positions = vec![points.clone()];
        let mut sample_indices = Vec::new();
        let mut neighbors = vec![knn(points, points, cfg.backbone_k.min(points.len()))?];
        for &size in &cfg.level_sizes[1..] {
            let prev = positions.last().unwrap();
            let idx = fps(prev, size, cfg.fps_seed.min(prev.len() - 1))?;
            let centers = prev.select(&idx);
            neighbors.push(knn(&centers, prev, cfg.backbone_k.min(prev.len()))?);
            sample_indices.push(idx);
            positions.push(centers);
        }
        Ok(Self {
            positions,
            sample_indices,
            neighbors,
        })
    }

    pub fn levels(&self) -> usize {
        self.positions.len()
    }

    /// The same grouping with every position multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            positions: self.positions.iter().map(|p| p.scaled(factor)).collect(),
            ..self.clone()
        }
    }

    /// Indices into the input points of every level's points.
    pub fn composed_indices(&self, level: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.positions[level].len()).collect();
        for l in (0..level).rev() {
            idx = idx.iter().map(|&i| self.sample_indices[l][i]).collect();
        }
        idx
    }
}

/// One pyramid level with evaluated features.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub positions: PointSet,
    pub features: Tensor,
    pub sample_indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Graph handles for one level of a frame.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub positions: Var,
    pub features: Var,
}

/// Siamese feature extractor shared by both frames.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: Vec<PointConv>,
}

impl Backbone {
    /// Level-0 input features are the raw coordinates.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(cfg.levels());
        let mut in_dim = 3;
        for (l, &w) in cfg.widths.iter().enumerate() {
            convs.push(PointConv::new(store, &format!("backbone.level{l}"), in_dim, w, cfg.weight_hidden, rng));
            in_dim = w;
        }
        Self { convs }
    }

    pub fn forward(&self, ctx: &mut Ctx, geometry: &PyramidGeometry) -> Result<Vec<LevelVars>> {
        if geometry.levels() != self.convs.len() {
            return Err(Error::shape("pyramid levels", self.convs.len(), geometry.levels()));
        }
        let mut out: Vec<LevelVars> = Vec::with_capacity(self.convs.len());
        let p0 = ctx.constant(geometry.positions[0].to_tensor());
        let f0 = self.convs[0].forward(ctx, p0, p0, p0, &geometry.neighbors[0])?;
        out.push(LevelVars {
            positions: p0,
            features: f0,
        });
        for l in 1..self.convs.len() {
            let prev = out[l - 1];
            let centers = ctx.constant(geometry.positions[l].to_tensor());
            let f = self.convs[l].forward(ctx, prev.positions, prev.features, centers, &geometry.neighbors[l])?;
            out.push(LevelVars {
                positions: centers,
                features: f,
            });
        }
        Ok(out)
    }

    /// Builds the geometry and evaluates every level's features.
    pub fn build_pyramid(&self, params: &ParamStore, frame: &PointSet, cfg: &ModelConfig) -> Result<Pyramid> {
        let geometry = PyramidGeometry::new(frame, cfg)?;
        let mut ctx = Ctx::new(params, false);
        let vars = self.forward(&mut ctx, &geometry)?;
        let levels = vars
            .iter()
            .enumerate()
            .map(|(l, v)| PyramidLevel {
                positions: geometry.positions[l].clone(),
                features: ctx.value(v.features).clone(),
                sample_indices: (l > 0).then(|| geometry.sample_indices[l - 1].clone()),
            })
            .collect();
        Ok(Pyramid { levels })
    }
}

//! The full coarse-to-fine scene-flow network.

use pcflow_autograd::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, LevelVars, PyramidGeometry};
use crate::config::{AblationConfig, ModelConfig, TargetFeatures};
use crate::error::{Error, Result};
use crate::geom::{knn, PointSet};
use crate::global_fusion::{GlobalEmbedding, GlobalFusion};
use crate::nn::{Ctx, ParamStore};
use crate::refinement::{Coarse, FlowPredictor, LevelOutput, LevelRefiner, RefineCounts, RefinerShape};

/// Pyramid geometry of both frames of a scene.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    pub source: PyramidGeometry,
    pub target: PyramidGeometry,
}

impl SceneGeometry {
    pub fn new(source: &PointSet, target: &PointSet, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            source: PyramidGeometry::new(source, cfg)?,
            target: PyramidGeometry::new(target, cfg)?,
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            source: self.source.scaled(factor),
            target: self.target.scaled(factor),
        }
    }
}

/// Global embedding plus the flow predictor at the coarsest level.
#[derive(Clone, Debug)]
pub struct TopHead {
    pub fusion: GlobalFusion,
    pub predictor: FlowPredictor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted flow per level, finest first, in scene units. Every other
    /// positional quantity here is in network units.
    pub flows: Vec<Var>,
    /// Re-embedded features at the finest level.
    pub features: Var,
    /// Target features at the finest level as compared by the CFS loss.
    pub target_features: Var,
    pub source_levels: Vec<LevelVars>,
    pub target_levels: Vec<LevelVars>,
    pub global: Option<GlobalEmbedding>,
    pub levels: Vec<Option<LevelOutput>>,
}

#[derive(Clone, Debug)]
pub struct SceneFlowModel {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub top: Option<TopHead>,
    /// `refiners[l]` refines level `l`; the coarsest level has one only when
    /// the global head is disabled.
    pub refiners: Vec<LevelRefiner>,
}

impl SceneFlowModel {
    pub fn new(config: &ModelConfig, ablation: &AblationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config, &mut rng);
        let levels = config.levels();
        let top_level = levels - 1;
        let counts = RefineCounts {
            str_k: config.str_k,
            cost_k_target: config.cost_k_target,
            cost_k_self: config.cost_k_self,
            flow_k: config.flow_k,
            upsample_k: config.upsample_k,
        };
        let top = ablation.use_gf.then(|| TopHead {
            fusion: GlobalFusion::new(&mut params, config, ablation.w_aggregation, &mut rng),
            predictor: FlowPredictor::new(
                &mut params,
                "global.predict",
                config.embedding_width,
                config.widths[top_level],
                config.weight_hidden,
                &mut rng,
            ),
        });
        // Built coarse to fine so that each refiner knows the width handed down.
        let first = if ablation.use_gf { top_level } else { levels };
        let mut coarse_width = if ablation.use_gf { config.embedding_width } else { 0 };
        let mut refiners = Vec::with_capacity(first);
        for l in (0..first).rev() {
            let shape = RefinerShape {
                width: config.widths[l],
                coarse_width,
                weight_hidden: config.weight_hidden,
                temporal: ablation.use_str_temporal,
                spatial: ablation.use_str_spatial,
                counts,
                eps: config.upsample_eps,
            };
            refiners.push(LevelRefiner::new(&mut params, &format!("refine.level{l}"), shape, &mut rng));
            coarse_width = config.widths[l];
        }
        refiners.reverse();
        Ok(Self {
            config: config.clone(),
            ablation: ablation.clone(),
            params,
            backbone,
            top,
            refiners,
        })
    }

    pub fn geometry(&self, source: &PointSet, target: &PointSet) -> Result<SceneGeometry> {
        SceneGeometry::new(source, target, &self.config)
    }

    pub fn forward(&self, ctx: &mut Ctx, geo: &SceneGeometry) -> Result<ForwardOutput> {
        let scale = self.config.position_scale;
        let scaled;
        let geo = if scale == 1.0 {
            geo
        } else {
            scaled = geo.scaled(scale);
            &scaled
        };
        let levels = self.config.levels();
        let src = self.backbone.forward(ctx, &geo.source)?;
        let tgt = self.backbone.forward(ctx, &geo.target)?;
        let top_level = levels - 1;
        let mut flows: Vec<Option<Var>> = vec![None; levels];
        let mut outputs: Vec<Option<LevelOutput>> = vec![None; levels];
        let mut global = None;
        let mut carried: Option<(Var, Var)> = None;

        if let Some(top) = &self.top {
            let s = src[top_level];
            let t = tgt[top_level];
            let emb = top.fusion.embed(ctx, s.features, t.features, s.positions, t.positions)?;
            let pts = &geo.source.positions[top_level];
            let groups = knn(pts, pts, self.config.flow_k.min(pts.len()))?;
            let flow = top.predictor.forward(ctx, emb.aggregated, s.positions, &groups)?;
            flows[top_level] = Some(flow);
            carried = Some((flow, emb.aggregated));
            global = Some(emb);
        }
        let mut features = None;
        for l in (0..self.refiners.len()).rev() {
            let coarse = carried.map(|(flow, feats)| Coarse {
                positions: &geo.source.positions[l + 1],
                flow,
                features: feats,
            });
            let out = self.refiners[l].forward(
                ctx,
                &geo.source.positions[l],
                src[l],
                &geo.target.positions[l],
                tgt[l],
                coarse,
            )?;
            flows[l] = Some(out.flow);
            carried = Some((out.flow, out.features));
            features = Some(out.features);
            outputs[l] = Some(out);
        }
        let features = features.ok_or_else(|| Error::invalid("model has no refinement level"))?;
        let target_features = match (&self.refiners[0].temporal, self.config.cfs_target_features) {
            (Some(t), TargetFeatures::Updated) => t.reference_pathway(ctx, tgt[0].features),
            _ => tgt[0].features,
        };
        Ok(ForwardOutput {
            flows: flows
                .into_iter()
                .map(|f| {
                    let f = f.expect("every level predicts");
                    if scale == 1.0 {
                        f
                    } else {
                        ctx.graph.scale(f, 1.0 / scale)
                    }
                })
                .collect(),
            features,
            target_features,
            source_levels: src,
            target_levels: tgt,
            global,
            levels: outputs,
        })
    }

    /// Finest-level flow for one scene.
    pub fn predict(&self, geo: &SceneGeometry) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params, false);
        let out = self.forward(&mut ctx, geo)?;
        Ok(ctx.value(out.flows[0]).clone())
    }
}

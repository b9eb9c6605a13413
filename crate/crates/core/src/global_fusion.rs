//! Global flow initialisation at the coarsest level.
//!
//! Both frames' top-level features are first fused by bidirectional
//! cross-attention. Every source/target pair is then embedded from the fused
//! features and a pairwise position code, and the pair embeddings are pooled
//! per source point with weights derived from the two attention maps.

use std::rc::Rc;

use pcflow_autograd::{Segments, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, Mlp, ParamStore};

/// Width of the raw pairwise position code `(x, y, y - x)`.
pub const PAIR_CODE_WIDTH: usize = 9;

/// Result of cross-attentive fusion. Attention maps are head-averaged.
#[derive(Clone, Copy, Debug)]
pub struct DcaOutput {
    /// Source context attended from every target point, `M × d_a`.
    pub fusion_s_to_t: Var,
    /// Target context attended from every source point, `N × d_a`.
    pub fusion_t_to_s: Var,
    /// Target queries over source keys, `M × N`; rows sum to one.
    pub attn_s_to_t: Var,
    /// Source queries over target keys, `N × M`; rows sum to one.
    pub attn_t_to_s: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalEmbedding {
    /// One row per pair, row `i·M + j` for source `i` and target `j`.
    pub pair_embeddings: Var,
    /// `N × M` pooling weights; rows sum to one.
    pub weights: Var,
    /// `N × d_g` pooled embedding per source point.
    pub aggregated: Var,
}

/// Row-major all-to-all pair index: pair `i·m + j`.
#[derive(Clone, Debug)]
pub struct AllPairs {
    pub source: Rc<[usize]>,
    pub target: Rc<[usize]>,
    pub n: usize,
    pub m: usize,
}

impl AllPairs {
    pub fn new(n: usize, m: usize) -> Self {
        let source: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let target: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
        Self {
            source: source.into(),
            target: target.into(),
            n,
            m,
        }
    }

    pub fn segments(&self) -> Segments {
        Segments::uniform(self.n, self.m)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalFusion {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub merge: Linear,
    pub position_mlp: Mlp,
    pub embedding_mlp: Mlp,
    pub heads: usize,
    pub attention_dim: usize,
    pub aggregation: Aggregation,
}

impl GlobalFusion {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, aggregation: Aggregation, rng: &mut ChaCha8Rng) -> Self {
        let d_top = *cfg.widths.last().unwrap();
        let d_a = cfg.attention_dim;
        let pe_out = PAIR_CODE_WIDTH + cfg.pe_width;
        Self {
            query: Linear::new(store, "global.query", d_top, d_a, Init::FanIn, rng),
            key: Linear::new(store, "global.key", d_top, d_a, Init::FanIn, rng),
            value: Linear::new(store, "global.value", d_top, d_a, Init::FanIn, rng),
            merge: Linear::new(store, "global.merge", d_a, d_a, Init::FanIn, rng),
            position_mlp: Mlp::new(store, "global.position", &[PAIR_CODE_WIDTH, cfg.pe_width, cfg.pe_width], true, rng),
            embedding_mlp: Mlp::new(
                store,
                "global.embedding",
                &[2 * d_a + pe_out, cfg.embedding_width, cfg.embedding_width],
                true,
                rng,
            ),
            heads: cfg.heads,
            attention_dim: d_a,
            aggregation,
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.embedding_mlp.out_dim()
    }

    /// Bidirectional multi-head cross-attention between the two frames.
    pub fn dca_fusion(&self, ctx: &mut Ctx, source: Var, target: Var) -> Result<DcaOutput> {
        let d_in = self.query.in_dim;
        for (what, v) in [("source", source), ("target", target)] {
            if ctx.value(v).cols() != d_in {
                return Err(Error::shape(
                    if what == "source" { "dca source width" } else { "dca target width" },
                    d_in,
                    ctx.value(v).cols(),
                ));
            }
        }
        let (qs, ks, vs) = (
            self.query.forward(ctx, source),
            self.key.forward(ctx, source),
            self.value.forward(ctx, source),
        );
        let (qt, kt, vt) = (
            self.query.forward(ctx, target),
            self.key.forward(ctx, target),
            self.value.forward(ctx, target),
        );
        let temperature = 1.0 / (self.attention_dim as f64).sqrt();
        let (fused_st, attn_st) = self.attend(ctx, qt, ks, vs, temperature);
        let (fused_ts, attn_ts) = self.attend(ctx, qs, kt, vt, temperature);
        Ok(DcaOutput {
            fusion_s_to_t: self.merge.forward(ctx, fused_st),
            fusion_t_to_s: self.merge.forward(ctx, fused_ts),
            attn_s_to_t: attn_st,
            attn_t_to_s: attn_ts,
        })
    }

    /// Returns concatenated head outputs and the head-averaged attention map.
    fn attend(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var, temperature: f64) -> (Var, Var) {
        let dh = self.attention_dim / self.heads;
        let g = &mut ctx.graph;
        let mut outputs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, temperature);
            let attn = g.row_softmax(logits);
            outputs.push(g.matmul(attn, vh));
            attn_sum = Some(match attn_sum {
                Some(acc) => g.add(acc, attn),
                None => attn,
            });
        }
        let fused = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs) };
        let attn = attn_sum.unwrap();
        let attn = if self.heads == 1 { attn } else { g.scale(attn, 1.0 / self.heads as f64) };
        (fused, attn)
    }

    /// `concat(PE, MLP(PE))` for every pair, with `PE = (x_i, y_j, y_j - x_i)`.
    pub fn position_encode(&self, ctx: &mut Ctx, source_pos: Var, target_pos: Var) -> Var {
        let pairs = AllPairs::new(ctx.value(source_pos).rows(), ctx.value(target_pos).rows());
        let raw = pair_code(ctx, source_pos, target_pos, &pairs.source, &pairs.target);
        let learned = self.position_mlp.forward(ctx, raw);
        ctx.graph.concat_cols(&[raw, learned])
    }

    pub fn global_flow_embedding(&self, ctx: &mut Ctx, dca: &DcaOutput, position_code: Var) -> Result<Var> {
        let n = ctx.value(dca.fusion_t_to_s).rows();
        let m = ctx.value(dca.fusion_s_to_t).rows();
        if ctx.value(position_code).rows() != n * m {
            return Err(Error::shape("pair embedding input", n * m, ctx.value(position_code).rows()));
        }
        let pairs = AllPairs::new(n, m);
        let g = &mut ctx.graph;
        let fs = g.gather_rows(dca.fusion_t_to_s, pairs.source.clone());
        let ft = g.gather_rows(dca.fusion_s_to_t, pairs.target.clone());
        let input = g.concat_cols(&[fs, ft, position_code]);
        Ok(self.embedding_mlp.forward(ctx, input))
    }

    pub fn embed(&self, ctx: &mut Ctx, source: Var, target: Var, source_pos: Var, target_pos: Var) -> Result<GlobalEmbedding> {
        let dca = self.dca_fusion(ctx, source, target)?;
        self.embed_fused(ctx, &dca, source_pos, target_pos)
    }

    pub fn embed_fused(&self, ctx: &mut Ctx, dca: &DcaOutput, source_pos: Var, target_pos: Var) -> Result<GlobalEmbedding> {
        let code = self.position_encode(ctx, source_pos, target_pos);
        let pair_embeddings = self.global_flow_embedding(ctx, dca, code)?;
        let weights = aggregation_weights(ctx, dca.attn_s_to_t, dca.attn_t_to_s)?;
        let aggregated = match self.aggregation {
            Aggregation::Attentive => aggregate(ctx, pair_embeddings, weights)?,
            Aggregation::Maxpool => {
                let (n, m) = ctx.value(weights).shape();
                ctx.graph.segment_max(pair_embeddings, &Segments::uniform(n, m))
            }
        };
        Ok(GlobalEmbedding {
            pair_embeddings,
            weights,
            aggregated,
        })
    }
}

/// Stacks `(x_i, y_j, y_j - x_i)` for the given pair lists.
pub(crate) fn pair_code(ctx: &mut Ctx, source_pos: Var, target_pos: Var, source: &Rc<[usize]>, target: &Rc<[usize]>) -> Var {
    let g = &mut ctx.graph;
    let x = g.gather_rows(source_pos, source.clone());
    let y = g.gather_rows(target_pos, target.clone());
    let d = g.sub(y, x);
    g.concat_cols(&[x, y, d])
}

/// Row softmax of `attn_s_to_tᵀ + attn_t_to_s`, giving an `N × M` map.
pub fn aggregation_weights(ctx: &mut Ctx, attn_s_to_t: Var, attn_t_to_s: Var) -> Result<Var> {
    let (m, n) = ctx.value(attn_s_to_t).shape();
    if ctx.value(attn_t_to_s).shape() != (n, m) {
        return Err(Error::shape(
            "aggregation_weights",
            format!("{n}x{m}"),
            format!("{:?}", ctx.value(attn_t_to_s).shape()),
        ));
    }
    let g = &mut ctx.graph;
    let t = g.transpose(attn_s_to_t);
    let logits = g.add(t, attn_t_to_s);
    Ok(g.row_softmax(logits))
}

/// `out_i = Σ_j W_ij · E_(i·M + j)`.
pub fn aggregate(ctx: &mut Ctx, pair_embeddings: Var, weights: Var) -> Result<Var> {
    let (n, m) = ctx.value(weights).shape();
    if ctx.value(pair_embeddings).rows() != n * m {
        return Err(Error::shape("aggregate", n * m, ctx.value(pair_embeddings).rows()));
    }
    let g = &mut ctx.graph;
    let w = g.reshape(weights, n * m, 1);
    let weighted = g.mul_col(pair_embeddings, w);
    Ok(g.segment_sum(weighted, &Segments::uniform(n, m)))
}

/// Substitute for [`GlobalFusion::dca_fusion`] that skips cross-attention:
/// raw features stand in for the fused ones and both maps are uniform.
/// Requires the top-level width to equal the attention width.
pub fn bypass_dca(ctx: &mut Ctx, source: Var, target: Var) -> Result<DcaOutput> {
    let (n, d) = ctx.value(source).shape();
    let (m, d2) = ctx.value(target).shape();
    if d != d2 {
        return Err(Error::shape("bypass_dca widths", d, d2));
    }
    let st = ctx.constant(pcflow_autograd::Tensor::full(m, n, 1.0 / n as f64));
    let ts = ctx.constant(pcflow_autograd::Tensor::full(n, m, 1.0 / m as f64));
    Ok(DcaOutput {
        fusion_s_to_t: target,
        fusion_t_to_s: source,
        attn_s_to_t: st,
        attn_t_to_s: ts,
    })
}

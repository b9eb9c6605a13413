//! Reference evaluations written as plain loops over rows.

use pcflow_autograd::Tensor;
use pcflow_core::backbone::PointConv;
use pcflow_core::global_fusion::GlobalFusion;
use pcflow_core::nn::{Linear, Mlp, ParamStore, LEAKY_SLOPE};
use pcflow_core::refinement::{CostVolume, FlowPredictor, LevelRefiner, ReEmbedding};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(r: &Rows) -> Tensor {
    Tensor::from_rows(r)
}

pub fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    assert_eq!(x.len(), w.rows());
    (0..w.cols())
        .map(|o| {
            let b = l.bias.map_or(0.0, |b| store.get(b).get(0, o));
            b + (0..x.len()).map(|i| x[i] * w.get(i, o)).sum::<f64>()
        })
        .collect()
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(store, l, &h);
        if i + 1 < m.layers.len() || m.activate_last {
            h = h.into_iter().map(leaky).collect();
        }
    }
    h
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive farthest point sampling: every round recomputes each
/// candidate's distance to the whole selected set.
pub fn fps(points: &[[f64; 3]], m: usize, seed: usize) -> Vec<usize> {
    let mut out = vec![seed];
    while out.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..points.len() {
            if out.contains(&i) {
                continue;
            }
            let d = out.iter().map(|&s| d2(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        out.push(best.1);
    }
    out
}

/// Full sort of all references by (distance, index).
pub fn knn(query: &[[f64; 3]], reference: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    query
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(j, r)| (d2(q, r), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn knn_radius(query: &[[f64; 3]], reference: &[[f64; 3]], k: usize, r: f64) -> Vec<Vec<usize>> {
    knn(query, reference, k)
        .into_iter()
        .zip(query)
        .map(|(g, q)| g.into_iter().filter(|&j| d2(q, &reference[j]).sqrt() < r).collect())
        .collect()
}

/// `[epe, as, ar, out]` from a per-point loop.
pub fn metrics(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> [f64; 4] {
    let n = pred.len() as f64;
    let mut acc = [0.0; 4];
    for (p, g) in pred.iter().zip(gt) {
        let err = d2(p, g).sqrt();
        let rel = err / (d2(g, &[0.0; 3]).sqrt() + 1e-8);
        acc[0] += err;
        acc[1] += f64::from(u8::from(err < 0.05 || rel < 0.05));
        acc[2] += f64::from(u8::from(err < 0.1 || rel < 0.1));
        acc[3] += f64::from(u8::from(err > 0.3 || rel > 0.3));
    }
    acc.map(|a| a / n)
}

pub fn pointconv(store: &ParamStore, pc: &PointConv, positions: &Rows, features: &Rows, centers: &Rows, groups: &[Vec<usize>]) -> Rows {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut pooled = vec![0.0; pc.in_dim()];
            for &n in g {
                let w = mlp(store, &pc.weight_net, &sub(&positions[n], &centers[i]));
                for c in 0..pooled.len() {
                    pooled[c] += w[c] * features[n][c];
                }
            }
            linear(store, &pc.projection, &pooled).into_iter().map(leaky).collect()
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Multi-head attention of `queries` over `keys`/`values` rows (already
/// projected). Returns the concatenated head outputs and the head-averaged map.
fn attend(q: &Rows, k: &Rows, v: &Rows, heads: usize, d_a: usize) -> (Rows, Rows) {
    let dh = d_a / heads;
    let t = 1.0 / (d_a as f64).sqrt();
    let mut out = vec![vec![0.0; d_a]; q.len()];
    let mut map = vec![vec![0.0; k.len()]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| t * (h * dh..(h + 1) * dh).map(|c| q[i][c] * k[j][c]).sum::<f64>())
                .collect();
            let a = softmax(&logits);
            for j in 0..k.len() {
                map[i][j] += a[j] / heads as f64;
                for c in h * dh..(h + 1) * dh {
                    out[i][c] += a[j] * v[j][c];
                }
            }
        }
    }
    (out, map)
}

pub struct Dca {
    pub fusion_s_to_t: Rows,
    pub fusion_t_to_s: Rows,
    pub attn_s_to_t: Rows,
    pub attn_t_to_s: Rows,
}

pub fn dca(store: &ParamStore, gf: &GlobalFusion, source: &Rows, target: &Rows) -> Dca {
    let proj = |l: &Linear, x: &Rows| -> Rows { x.iter().map(|r| linear(store, l, r)).collect() };
    let (qs, ks, vs) = (proj(&gf.query, source), proj(&gf.key, source), proj(&gf.value, source));
    let (qt, kt, vt) = (proj(&gf.query, target), proj(&gf.key, target), proj(&gf.value, target));
    let (st, attn_st) = attend(&qt, &ks, &vs, gf.heads, gf.attention_dim);
    let (ts, attn_ts) = attend(&qs, &kt, &vt, gf.heads, gf.attention_dim);
    Dca {
        fusion_s_to_t: proj(&gf.merge, &st),
        fusion_t_to_s: proj(&gf.merge, &ts),
        attn_s_to_t: attn_st,
        attn_t_to_s: attn_ts,
    }
}

pub fn pair_code(x: &[f64], y: &[f64]) -> Vec<f64> {
    cat(&[x, y, &sub(y, x)])
}

/// Pair embeddings, row `i·M + j`.
pub fn pair_embeddings(store: &ParamStore, gf: &GlobalFusion, d: &Dca, sp: &Rows, tp: &Rows) -> Rows {
    let mut out = Vec::new();
    for i in 0..sp.len() {
        for j in 0..tp.len() {
            let pc = pair_code(&sp[i], &tp[j]);
            let learned = mlp(store, &gf.position_mlp, &pc);
            let input = cat(&[&d.fusion_t_to_s[i], &d.fusion_s_to_t[j], &pc, &learned]);
            out.push(mlp(store, &gf.embedding_mlp, &input));
        }
    }
    out
}

pub fn aggregation_weights(attn_s_to_t: &Rows, attn_t_to_s: &Rows) -> Rows {
    (0..attn_t_to_s.len())
        .map(|i| {
            let logits: Vec<f64> = (0..attn_s_to_t.len()).map(|j| attn_s_to_t[j][i] + attn_t_to_s[i][j]).collect();
            softmax(&logits)
        })
        .collect()
}

pub fn aggregate(embeddings: &Rows, weights: &Rows) -> Rows {
    let m = weights[0].len();
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut acc = vec![0.0; embeddings[0].len()];
            for j in 0..m {
                for (a, e) in acc.iter_mut().zip(&embeddings[i * m + j]) {
                    *a += w[j] * e;
                }
            }
            acc
        })
        .collect()
}

pub fn reembed(
    store: &ParamStore,
    re: &ReEmbedding,
    query_pos: &Rows,
    query_feat: &Rows,
    ref_pos: &Rows,
    ref_feat: &Rows,
    groups: &[Vec<usize>],
) -> Rows {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut trfs = Vec::new();
            let mut scores = Vec::new();
            for &j in g {
                let pe = pair_code(&query_pos[i], &ref_pos[j]);
                let trf = mlp(store, &re.transform, &cat(&[&ref_feat[j], &query_feat[i], &pe]));
                let code = mlp(store, &re.code, &pe);
                scores.push(mlp(store, &re.score, &cat(&[&trf, &code]))[0]);
                trfs.push(trf);
            }
            let a = softmax(&scores);
            let mut acc = vec![0.0; re.out_dim()];
            for (t, w) in trfs.iter().zip(&a) {
                for (o, v) in acc.iter_mut().zip(t) {
                    *o += w * v;
                }
            }
            acc
        })
        .collect()
}

pub fn cost_volume(
    store: &ParamStore,
    cv: &CostVolume,
    warped_pos: &Rows,
    warped_feat: &Rows,
    target_pos: &Rows,
    target_feat: &Rows,
    target_groups: &[Vec<usize>],
    self_groups: &[Vec<usize>],
) -> Rows {
    let d = cv.width();
    let point: Rows = target_groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut acc = vec![0.0; d];
            for &j in g {
                let dir = sub(&target_pos[j], &warped_pos[i]);
                let cost = mlp(store, &cv.cost, &cat(&[&warped_feat[i], &target_feat[j], &dir]));
                let gate = mlp(store, &cv.point_direction, &dir);
                for c in 0..d {
                    acc[c] += gate[c] * cost[c];
                }
            }
            acc
        })
        .collect();
    self_groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut acc = vec![0.0; d];
            for &k in g {
                let gate = mlp(store, &cv.patch_direction, &sub(&warped_pos[k], &warped_pos[i]));
                for c in 0..d {
                    acc[c] += gate[c] * point[k][c];
                }
            }
            acc
        })
        .collect()
}

pub fn predict_flow(store: &ParamStore, fp: &FlowPredictor, input: &Rows, positions: &Rows, groups: &[Vec<usize>]) -> Rows {
    pointconv(store, &fp.conv, positions, input, positions, groups)
        .iter()
        .map(|h| linear(store, &fp.head, &mlp(store, &fp.mlp, h)))
        .collect()
}

pub fn to_points(r: &Rows) -> Vec<[f64; 3]> {
    r.iter().map(|p| [p[0], p[1], p[2]]).collect()
}

pub fn upsample(coarse: &Rows, values: &Rows, fine: &Rows, k: usize, eps: f64) -> Rows {
    let groups = knn(&to_points(fine), &to_points(coarse), k);
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let raw: Vec<f64> = g.iter().map(|&j| 1.0 / (d2(&fine[i], &coarse[j]).sqrt() + eps)).collect();
            let total: f64 = raw.iter().sum();
            let mut acc = vec![0.0; values[0].len()];
            for (&j, w) in g.iter().zip(&raw) {
                for (a, v) in acc.iter_mut().zip(&values[j]) {
                    *a += w / total * v;
                }
            }
            acc
        })
        .collect()
}

/// Flow, re-embedded features and warped positions of one refinement level.
pub struct Refined {
    pub flow: Rows,
    pub features: Rows,
}

pub fn refine_level(
    store: &ParamStore,
    lr: &LevelRefiner,
    source_pos: &Rows,
    source_feat: &Rows,
    target_pos: &Rows,
    target_feat: &Rows,
    coarse: Option<(&Rows, &Rows, &Rows)>,
) -> Refined {
    let n = source_pos.len();
    let (up_flow, feats) = match coarse {
        Some((cp, cf, cx)) => {
            let k = lr.counts.upsample_k.min(cp.len());
            let flow = upsample(cp, cf, source_pos, k, lr.eps);
            let up = upsample(cp, cx, source_pos, k, lr.eps);
            let feats = source_feat.iter().zip(&up).map(|(a, b)| cat(&[a, b])).collect();
            (flow, feats)
        }
        None => (vec![vec![0.0; 3]; n], source_feat.clone()),
    };
    let warped: Rows = source_pos.iter().zip(&up_flow).map(|(p, f)| p.iter().zip(f).map(|(a, b)| a + b).collect()).collect();
    let (wp, tp) = (to_points(&warped), to_points(target_pos));
    let c = lr.counts;
    let m = target_pos.len();
    let temporal_groups = knn(&wp, &tp, c.str_k.min(m));
    let spatial_groups = knn(&wp, &wp, c.str_k.min(n));
    let mut parts: Vec<Rows> = Vec::new();
    if let Some(t) = &lr.temporal {
        parts.push(reembed(store, t, &warped, &feats, target_pos, target_feat, &temporal_groups));
    }
    if let Some(s) = &lr.spatial {
        parts.push(reembed(store, s, &warped, &feats, &warped, &feats, &spatial_groups));
    }
    let fuse_in: Rows = if parts.is_empty() {
        feats
    } else {
        (0..n).map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect()).collect()
    };
    let strf: Rows = fuse_in.iter().map(|r| mlp(store, &lr.fuse, r)).collect();
    let cv = cost_volume(
        store,
        &lr.cost,
        &warped,
        &strf,
        target_pos,
        target_feat,
        &knn(&wp, &tp, c.cost_k_target.min(m)),
        &knn(&wp, &wp, c.cost_k_self.min(n)),
    );
    let input: Rows = cv.iter().zip(&strf).map(|(a, b)| cat(&[a, b])).collect();
    let residual = predict_flow(store, &lr.predictor, &input, &warped, &knn(&wp, &wp, c.flow_k.min(n)));
    let flow = up_flow.iter().zip(&residual).map(|(u, r)| u.iter().zip(r).map(|(a, b)| a + b).collect()).collect();
    Refined { flow, features: strf }
}

//! Optimisation loop, checkpoints, evaluation and ablation runs.

use std::collections::HashMap;
use std::path::Path;

use pcflow_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, Aggregation, Config, Precision, TrainConfig};
use crate::data::{resample_to, scene_seed, Archive, Array, ScenePair};
use crate::error::{Error, Result};
use crate::geom::inverse_distance_upsample;
use crate::losses::{scene_loss, LossBreakdown, LossTargets};
use crate::metrics::{mean_over_scenes, metric_sums, metric_sums_2d, MetricReport, MetricSums};
use crate::model::{SceneFlowModel, SceneGeometry};
use crate::nn::{Ctx, ParamStore};

const ADAM_EPS: f64 = 1e-8;
const SHUFFLE_SALT: u64 = 0x005E_ED0F_5A17;
/// Neighbours used to spread a prediction from the sampled points back to
/// every point of a larger frame.
const SPREAD_K: usize = 3;

/// A scene resampled to the model's input size with its geometry and loss
/// supervision precomputed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    /// The pair as given, before resampling.
    pub original: ScenePair,
    /// The pair the network sees.
    pub pair: ScenePair,
    pub geometry: SceneGeometry,
    pub gt: Tensor,
    pub targets: LossTargets,
}

impl PreparedScene {
    /// Frames whose size differs from the first pyramid level are resampled
    /// with `seed`, with replacement when a frame is too small.
    pub fn new(original: &ScenePair, cfg: &Config, seed: u64) -> Result<Self> {
        let n = cfg.model.input_points();
        let pair = if original.source_len() == n && original.target_len() == n {
            original.clone()
        } else {
            let short = original.source_len().min(original.target_len()) < n;
            resample_to(original, n, seed, short)?
        };
        let geometry = SceneGeometry::new(&pair.source_points(), &pair.target_points(), &cfg.model)?;
        let gt = pair.flow_tensor();
        let targets = LossTargets::new(&geometry, &gt, pair.mask.as_deref(), &cfg.loss)?;
        Ok(Self {
            original: original.clone(),
            pair,
            geometry,
            gt,
            targets,
        })
    }

    fn resampled(&self) -> bool {
        self.pair.source_len() != self.original.source_len() || self.pair.pos1 != self.original.pos1
    }
}

/// Prepares every scene, seeding the resampling of scene `i` from `seed`.
pub fn prepare_all(pairs: &[ScenePair], cfg: &Config, seed: u64) -> Result<Vec<PreparedScene>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PreparedScene::new(p, cfg, scene_seed(seed, i as u64)))
        .collect()
}

/// Adaptive-moment state with decoupled weight decay, one slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                p[j] -= lr * (update + cfg.weight_decay * p[j]);
            }
        }
    }
}

/// Learning rate during `epoch` (zero-based).
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm` and
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

fn round_to_single(params: &mut ParamStore) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for x in params.get_mut(id).data_mut() {
            *x = f64::from(*x as f32);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's scenes.
    pub train_loss: f64,
    pub supervised: f64,
    pub lfc: f64,
    pub cfs: f64,
    pub val_epe3d: Option<f64>,
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    fingerprint: String,
    config: String,
    history: Vec<EpochRecord>,
    adam_t: u64,
    best_score: Option<f64>,
    best_epoch: Option<usize>,
}

/// Everything needed to rebuild a model and continue its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub fingerprint: String,
    pub history: Vec<EpochRecord>,
    /// Best selection score so far and the epoch count at which it was reached.
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn tensor_array(t: &Tensor) -> Array {
    Array::from_f64(vec![t.rows(), t.cols()], t.data())
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        let meta = Meta {
            epoch: self.epoch,
            fingerprint: self.fingerprint.clone(),
            config: self.config.to_toml_string(),
            history: self.history.clone(),
            adam_t: self.adam.t,
            best_score: self.best_score,
            best_epoch: self.best_epoch,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        ar.insert("meta", Array::from_u8(vec![json.len()], &json));
        for (i, (name, t)) in self.params.iter().enumerate() {
            ar.insert(&format!("param.{name}"), tensor_array(t));
            ar.insert(&format!("adam.m.{name}"), tensor_array(&self.adam.m[i]));
            ar.insert(&format!("adam.v.{name}"), tensor_array(&self.adam.v[i]));
        }
        ar
    }

    pub fn from_archive(ar: &Archive, path: &Path) -> Result<Self> {
        let parse = |field: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            field: field.to_string(),
            message,
        };
        let raw = ar
            .get("meta")
            .and_then(Array::to_u8)
            .ok_or_else(|| parse("meta", "missing checkpoint metadata".into()))?;
        let meta: Meta = serde_json::from_slice(&raw).map_err(|e| parse("meta", e.to_string()))?;
        let config = Config::from_toml_str(&meta.config)?;
        if config.fingerprint() != meta.fingerprint {
            return Err(parse("meta", "stored fingerprint does not match the stored config".into()));
        }
        let mut model = SceneFlowModel::new(&config.model, &config.ablation, config.train.seed)?;
        let read = |name: &str| -> Result<Tensor> {
            let a = ar.get(name).ok_or_else(|| parse(name, "missing array".into()))?;
            let v = a.to_f64().ok_or_else(|| parse(name, format!("expected float64, found {}", a.dtype.name())))?;
            if a.shape.len() != 2 {
                return Err(parse(name, format!("expected a matrix, found shape {:?}", a.shape)));
            }
            Ok(Tensor::from_vec(a.shape[0], a.shape[1], v))
        };
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut values = HashMap::new();
        let mut adam = AdamState::new(&model.params);
        adam.t = meta.adam_t;
        for (i, name) in names.iter().enumerate() {
            values.insert(name.clone(), read(&format!("param.{name}"))?);
            adam.m[i] = read(&format!("adam.m.{name}"))?;
            adam.v[i] = read(&format!("adam.v.{name}"))?;
            if adam.m[i].shape() != model.params.by_name(name).unwrap().shape()
                || adam.v[i].shape() != adam.m[i].shape()
            {
                return Err(parse(name, "optimizer state shape differs from the parameter".into()));
            }
        }
        model.params.load_from(&values)?;
        Ok(Self {
            config,
            params: model.params,
            adam,
            epoch: meta.epoch,
            fingerprint: meta.fingerprint,
            history: meta.history,
            best_score: meta.best_score,
            best_epoch: meta.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, path)
    }

    pub fn model(&self) -> Result<SceneFlowModel> {
        let mut model = SceneFlowModel::new(&self.config.model, &self.config.ablation, self.config.train.seed)?;
        model.params = self.params.clone();
        Ok(model)
    }

    /// Fails unless `cfg` defines the same network as the checkpoint.
    pub fn check_compatible(&self, cfg: &Config) -> Result<()> {
        if cfg.fingerprint() != self.fingerprint {
            return Err(Error::Config(format!(
                "checkpoint was trained with config {} but {} was given",
                self.fingerprint,
                cfg.fingerprint()
            )));
        }
        Ok(())
    }
}

/// Per-epoch notification; `checkpoint` reflects the state after the epoch.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub improved: bool,
    pub checkpoint: &'a Checkpoint,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub last: Checkpoint,
    /// Checkpoint with the best selection score reached in this call; `None`
    /// when a resumed run never improved on the stored best.
    pub best: Option<Checkpoint>,
    pub stopped_early: bool,
}

fn fresh_checkpoint(cfg: &Config) -> Result<Checkpoint> {
    let model = SceneFlowModel::new(&cfg.model, &cfg.ablation, cfg.train.seed)?;
    let adam = AdamState::new(&model.params);
    Ok(Checkpoint {
        config: cfg.clone(),
        params: model.params,
        adam,
        epoch: 0,
        fingerprint: cfg.fingerprint(),
        history: Vec::new(),
        best_score: None,
        best_epoch: None,
    })
}

#[derive(Default)]
struct LossTotals {
    total: f64,
    supervised: f64,
    lfc: f64,
    cfs: f64,
}

impl LossTotals {
    fn add(&mut self, b: &LossBreakdown) {
        self.total += b.total;
        self.supervised += b.supervised;
        self.lfc += b.lfc;
        self.cfs += b.cfs;
    }
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(model: &SceneFlowModel, scene: &PreparedScene, cfg: &Config) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut ctx = Ctx::new(&model.params, true);
    let out = model.forward(&mut ctx, &scene.geometry)?;
    let (loss, breakdown) = scene_loss(&mut ctx, &out, &scene.targets, &cfg.loss, &model.ablation)?;
    Ok((breakdown, ctx.param_gradients(loss)))
}

fn non_finite(detail: String) -> Error {
    Error::NonFinite {
        epoch: 0,
        batch: 0,
        detail,
    }
}

/// One optimizer step on `batch`; gradients are averaged over its scenes.
pub fn train_step(
    model: &mut SceneFlowModel,
    adam: &mut AdamState,
    batch: &[&PreparedScene],
    cfg: &Config,
    lr: f64,
) -> Result<Vec<LossBreakdown>> {
    let mut sum: Option<Vec<Tensor>> = None;
    let mut parts = Vec::with_capacity(batch.len());
    for scene in batch {
        let (b, grads) = scene_gradients(model, scene, cfg)?;
        if !b.total.is_finite() {
            return Err(non_finite(format!("loss is {b:?}")));
        }
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
        parts.push(b);
    }
    let mut grads = sum.ok_or_else(|| Error::invalid("empty batch"))?;
    let inv = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    let norm = clip_global_norm(&mut grads, cfg.train.grad_clip);
    if !norm.is_finite() {
        return Err(non_finite(format!("gradient norm is {norm}")));
    }
    adam.step(&mut model.params, &grads, lr, &cfg.train);
    if cfg.train.precision == Precision::Single {
        round_to_single(&mut model.params);
    }
    Ok(parts)
}

/// Trains from `resume` (or a fresh seeded initialisation) until
/// `cfg.train.epochs` epochs are complete or validation stalls for
/// `cfg.train.patience` epochs.
///
/// Model selection uses pooled validation EPE3D, or the mean training loss
/// when `val_set` is empty.
pub fn train(
    cfg: &Config,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochEvent),
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut state = match resume {
        Some(ck) => {
            ck.check_compatible(cfg)?;
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => fresh_checkpoint(cfg)?,
    };
    let mut model = state.model()?;
    let mut best = (state.epoch == 0 && cfg.train.epochs == 0).then(|| state.clone());
    if cfg.train.epochs > state.epoch && train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut stopped_early = false;
    while state.epoch < cfg.train.epochs {
        if let Some(b) = state.best_epoch {
            if state.epoch - b >= cfg.train.patience {
                stopped_early = true;
                break;
            }
        }
        let epoch = state.epoch;
        let lr = learning_rate(&cfg.train, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.train.seed ^ SHUFFLE_SALT, epoch as u64)));
        let mut totals = LossTotals::default();
        let mut steps = 0;
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let parts = train_step(&mut model, &mut state.adam, &batch, cfg, lr).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("{detail}; scenes {chunk:?}"),
                },
                other => other,
            })?;
            parts.iter().for_each(|b| totals.add(b));
            steps += 1;
        }
        let n = train_set.len() as f64;
        let val_epe3d = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set)?.pooled.epe3d)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: totals.total / n,
            supervised: totals.supervised / n,
            lfc: totals.lfc / n,
            cfs: totals.cfs / n,
            val_epe3d,
            steps,
        };
        let score = val_epe3d.unwrap_or(record.train_loss);
        state.epoch += 1;
        state.params = model.params.clone();
        state.history.push(record.clone());
        let improved = state.best_score.is_none_or(|b| score < b);
        if improved {
            state.best_score = Some(score);
            state.best_epoch = Some(state.epoch);
            best = Some(state.clone());
        }
        on_epoch(&EpochEvent {
            record: &record,
            improved,
            checkpoint: &state,
        });
    }
    Ok(TrainResult {
        last: state,
        best,
        stopped_early,
    })
}

/// Full-resolution flow for the original pair of `scene`. When the pair was
/// resampled, the prediction is spread back to every source point by
/// inverse-distance interpolation.
pub fn predict_scene(model: &SceneFlowModel, scene: &PreparedScene) -> Result<Tensor> {
    let flow = model.predict(&scene.geometry)?;
    if !scene.resampled() {
        return Ok(flow);
    }
    let sampled = scene.pair.source_points();
    inverse_distance_upsample(
        &sampled,
        &flow,
        &scene.original.source_points(),
        SPREAD_K.min(sampled.len()),
        model.config.upsample_eps,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Point-weighted over all scenes.
    pub pooled: MetricReport,
    /// Unweighted mean of the per-scene reports.
    pub mean_over_scenes: MetricReport,
    pub per_scene: Vec<MetricReport>,
    /// The same reports for a prediction of zero flow everywhere.
    pub baseline: MetricReport,
    pub baseline_per_scene: Vec<MetricReport>,
}

fn scene_sums(pred: &Tensor, pair: &ScenePair) -> Result<MetricSums> {
    let gt = pair.flow_tensor();
    let mask = pair.mask.as_deref();
    match pair.camera() {
        Some(k) => metric_sums_2d(pred, &gt, mask, &pair.source_points(), Some(&k)),
        None => metric_sums(pred, &gt, mask),
    }
}

/// Reports from per-scene predictions, each against its original pair.
pub fn evaluate_predictions(preds: &[Tensor], pairs: &[&ScenePair]) -> Result<Evaluation> {
    let mut pooled = MetricSums::default();
    let mut base = MetricSums::default();
    let mut per_scene = Vec::with_capacity(pairs.len());
    let mut baseline_per_scene = Vec::with_capacity(pairs.len());
    let all_2d = pairs.iter().all(|p| p.intrinsics.is_some());
    for (pred, pair) in preds.iter().zip(pairs) {
        let s = scene_sums(pred, pair)?;
        let zero = Tensor::zeros(pair.source_len(), 3);
        let b = scene_sums(&zero, pair)?;
        per_scene.push(s.report());
        baseline_per_scene.push(b.report());
        pooled.merge(&s);
        base.merge(&b);
    }
    if !all_2d {
        pooled.has_2d = false;
        base.has_2d = false;
    }
    Ok(Evaluation {
        pooled: pooled.report(),
        mean_over_scenes: mean_over_scenes(&per_scene),
        per_scene,
        baseline: base.report(),
        baseline_per_scene,
    })
}

/// Deterministic inference and metrics on every scene; masked points are
/// excluded.
pub fn evaluate(model: &SceneFlowModel, scenes: &[PreparedScene]) -> Result<Evaluation> {
    let preds = scenes.iter().map(|s| predict_scene(model, s)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<&ScenePair> = scenes.iter().map(|s| &s.original).collect();
    evaluate_predictions(&preds, &pairs)
}

/// A named switch setting compared by [`ablate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub ablation: AblationConfig,
}

/// Full model and the variants with one module removed each, plus the
/// max-pooling aggregation.
pub fn standard_variants() -> Vec<Variant> {
    let full = AblationConfig::default();
    let v = |name: &str, ablation: AblationConfig| Variant {
        name: name.to_string(),
        ablation,
    };
    vec![
        v("full", full.clone()),
        v(
            "gf_off",
            AblationConfig {
                use_gf: false,
                ..full.clone()
            },
        ),
        v(
            "str_off",
            AblationConfig {
                use_str_spatial: false,
                use_str_temporal: false,
                ..full.clone()
            },
        ),
        v(
            "da_off",
            AblationConfig {
                use_lfc: false,
                use_cfs: false,
                ..full.clone()
            },
        ),
        v(
            "maxpool",
            AblationConfig {
                w_aggregation: Aggregation::Maxpool,
                ..full
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub report: MetricReport,
    pub baseline: MetricReport,
}

/// Trains every variant under every seed on the same data and evaluates it
/// on `test_set`. Scenes are prepared once since geometry does not depend on
/// the switches.
pub fn ablate(
    base: &Config,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    test_set: &[PreparedScene],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.ablation = v.ablation.clone();
            cfg.train.seed = seed;
            let result = train(&cfg, train_set, val_set, None, &mut |_| {})?;
            let chosen = result.best.as_ref().unwrap_or(&result.last);
            let eval = evaluate(&chosen.model()?, test_set)?;
            let row = AblationRow {
                variant: v.name.clone(),
                seed,
                epochs: result.last.epoch,
                report: eval.pooled,
                baseline: eval.baseline,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Median EPE3D per variant, in order of first appearance.
pub fn median_epe_by_variant(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.variant == n).map(|r| r.report.epe3d).collect();
            (n.to_string(), median(&v))
        })
        .collect()
}

/// Plain-text comparison table: one row per variant with median metrics
/// over seeds.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<10} {:>6} {:>10} {:>8} {:>8} {:>8}\n", "variant", "seeds", "epe3d", "as3d", "ar3d", "out3d");
    for (name, epe) in median_epe_by_variant(rows) {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
        let med = |f: &dyn Fn(&MetricReport) -> f64| median(&sel.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
        out.push_str(&format!(
            "{:<10} {:>6} {:>10.6} {:>8.4} {:>8.4} {:>8.4}\n",
            name,
            sel.len(),
            epe,
            med(&|r| r.as3d),
            med(&|r| r.ar3d),
            med(&|r| r.out3d)
        ));
    }
    out
}

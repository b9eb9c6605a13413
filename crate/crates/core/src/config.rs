//! Hyperparameters for every module, loadable from a sectioned TOML file.
//!
//! Unknown keys are rejected by name. Omitted keys take the defaults below,
//! which form the desk-scale profile; [`ModelConfig::reference`] gives the
//! full-size profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetFeatures {
    /// Target features after the temporal re-embedding MLP's target pathway.
    Updated,
    /// Backbone features as extracted.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Attentive,
    Maxpool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per pyramid level, finest first; strictly decreasing.
    pub level_sizes: Vec<usize>,
    /// Backbone feature width per level.
    pub widths: Vec<usize>,
    pub backbone_k: usize,
    /// Hidden width of the PointConv weight network.
    pub weight_hidden: usize,
    pub heads: usize,
    pub attention_dim: usize,
    /// Output width of the learned part of the pairwise position encoding.
    pub pe_width: usize,
    /// Width of the all-to-all pair embedding.
    pub embedding_width: usize,
    pub str_k: usize,
    pub cost_k_target: usize,
    pub cost_k_self: usize,
    /// Neighbourhood size of the PointConv inside the flow predictor.
    pub flow_k: usize,
    pub upsample_k: usize,
    pub upsample_eps: f64,
    pub fps_seed: usize,
    pub cfs_target_features: TargetFeatures,
    /// Factor applied to coordinates inside the network; flows are returned
    /// in scene units. A power of two keeps sampling and grouping exact.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Scaled-down profile for CPU training.
    pub fn desk() -> Self {
        Self {
            level_sizes: vec![2048, 512, 128, 32],
            widths: vec![16, 32, 64, 128],
            backbone_k: 16,
            weight_hidden: 8,
            heads: 2,
            attention_dim: 32,
            pe_width: 32,
            embedding_width: 64,
            str_k: 16,
            cost_k_target: 16,
            cost_k_self: 16,
            flow_k: 9,
            upsample_k: 3,
            upsample_eps: 1e-8,
            fps_seed: 0,
            cfs_target_features: TargetFeatures::Updated,
            position_scale: 16.0,
        }
    }

    /// Full-size profile: five levels from 8192 points, eight heads of a
    /// 128-wide attention.
    pub fn reference() -> Self {
        Self {
            level_sizes: vec![8192, 2048, 512, 256, 64],
            widths: vec![32, 64, 128, 256, 512],
            heads: 8,
            attention_dim: 128,
            embedding_width: 128,
            ..Self::desk()
        }
    }

    /// The desk profile for `n` input points: a factor of four between
    /// levels down to the desk's top level of 32 points (fewer for tiny
    /// `n`), which keeps its width.
    pub fn desk_for_points(n: usize) -> Self {
        let desk = Self::desk();
        let top_size = *desk.level_sizes.last().unwrap();
        let top = top_size.min(n / 4).max(1);
        let mut sizes = vec![n];
        while sizes.len() + 1 < desk.levels() && sizes[sizes.len() - 1] / 4 > top {
            sizes.push(sizes[sizes.len() - 1] / 4);
        }
        if n > top {
            sizes.push(top);
        }
        let mut widths = desk.widths[..sizes.len() - 1].to_vec();
        widths.push(*desk.widths.last().unwrap());
        Self {
            level_sizes: sizes,
            widths,
            ..desk
        }
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn input_points(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.level_sizes.len();
        if l < 2 {
            return Err(Error::Config("model.level_sizes needs at least two levels".into()));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::Config("model.position_scale must be positive".into()));
        }
        if self.widths.len() != l {
            return Err(Error::Config(format!(
                "model.widths has {} entries but there are {l} levels",
                self.widths.len()
            )));
        }
        if self.level_sizes.windows(2).any(|w| w[1] >= w[0]) || self.level_sizes[l - 1] == 0 {
            return Err(Error::Config("model.level_sizes must be strictly decreasing and positive".into()));
        }
        if self.heads == 0 || !self.attention_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("model.attention_dim must be a positive multiple of model.heads".into()));
        }
        for (key, v) in [
            ("backbone_k", self.backbone_k),
            ("str_k", self.str_k),
            ("cost_k_target", self.cost_k_target),
            ("cost_k_self", self.cost_k_self),
            ("flow_k", self.flow_k),
            ("upsample_k", self.upsample_k),
            ("weight_hidden", self.weight_hidden),
            ("pe_width", self.pe_width),
            ("embedding_width", self.embedding_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{key} must be positive")));
            }
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("model.widths must be positive".into()));
        }
        if self.upsample_eps.is_nan() || self.upsample_eps <= 0.0 {
            return Err(Error::Config("model.upsample_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Per-level supervised weights, finest level first. Only the first
    /// `levels` entries are used.
    pub deltas: Vec<f64>,
    /// Weights of the supervised, flow-consistency and feature-similarity terms.
    pub lambdas: [f64; 3],
    /// Neighbourhood radius for both adaptive losses, in scene units.
    pub radius: f64,
    /// Cosine-similarity threshold.
    pub threshold: f64,
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.02, 0.04, 0.08, 0.16, 0.32],
            lambdas: [0.7, 0.15, 0.15],
            // 0.05 m on ~20 m scans, rescaled to unit-diameter scenes.
            radius: 0.05 / 20.0,
            threshold: 0.95,
            k: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.deltas.len() < levels {
            return Err(Error::Config(format!(
                "loss.deltas has {} entries but the model has {levels} levels",
                self.deltas.len()
            )));
        }
        if self.deltas.iter().any(|d| d.is_nan() || *d <= 0.0) {
            return Err(Error::Config("loss.deltas must be positive".into()));
        }
        if self.lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(Error::Config("loss.lambdas must be non-negative".into()));
        }
        if self.radius.is_nan() || self.radius <= 0.0 {
            return Err(Error::Config("loss.radius must be positive".into()));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 || self.threshold > 1.0 {
            return Err(Error::Config("loss.threshold must lie in (0, 1]".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("loss.k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub use_gf: bool,
    pub use_str_spatial: bool,
    pub use_str_temporal: bool,
    pub use_lfc: bool,
    pub use_cfs: bool,
    pub w_aggregation: Aggregation,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_gf: true,
            use_str_spatial: true,
            use_str_temporal: true,
            use_lfc: true,
            use_cfs: true,
            w_aggregation: Aggregation::Attentive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Epochs without validation improvement before stopping early.
    pub patience: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_every: 80,
            decay_factor: 0.5,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            patience: 50,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 || self.decay_factor > 1.0 {
            return Err(Error::Config("train.decay_factor must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.decay_every and train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("train.weight_decay must be >= 0 and train.grad_clip > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub object_count: usize,
    pub points_per_object: usize,
    /// Largest rotation angle per object, radians.
    pub rotation_max: f64,
    /// Largest translation length per object, scene units.
    pub translation_max: f64,
    pub noise_sigma: f64,
    pub occlusion_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            object_count: 2,
            points_per_object: 256,
            rotation_max: 0.15,
            translation_max: 0.1,
            noise_sigma: 0.0,
            occlusion_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.object_count == 0 || self.points_per_object == 0 {
            return Err(Error::Config("synth.object_count and synth.points_per_object must be positive".into()));
        }
        for (key, v) in [
            ("rotation_max", self.rotation_max),
            ("translation_max", self.translation_max),
            ("noise_sigma", self.noise_sigma),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("synth.{key} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Config("synth.occlusion_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, one section per module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(self.model.levels())?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Stable hash of the model-defining sections.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(&(&self.model, &self.ablation)).expect("config serializes");
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
        for key in ["level_sizes", "deltas", "lambdas", "radius", "threshold", "learning_rate", "use_gf", "w_aggregation"] {
            assert!(text.contains(key), "{key} missing from serialized config");
        }
    }

    #[test]
    fn rescaled_profiles_keep_the_top_level() {
        assert_eq!(ModelConfig::desk_for_points(2048), ModelConfig::desk());
        let c = ModelConfig::desk_for_points(256);
        assert_eq!(c.level_sizes, vec![256, 64, 32]);
        assert_eq!(c.widths, vec![16, 32, 128]);
        assert_eq!(ModelConfig::desk_for_points(512).level_sizes, vec![512, 128, 32]);
        assert_eq!(ModelConfig::desk_for_points(64).level_sizes, vec![64, 16]);
        for n in [2, 5, 33, 100, 256, 4096] {
            ModelConfig::desk_for_points(n).validate().unwrap();
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml_str("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = Config::from_toml_str("[loss]\nthreshold = 0.9\n").unwrap();
        assert_eq!(cfg.loss.threshold, 0.9);
        assert_eq!(cfg.loss.lambdas, [0.7, 0.15, 0.15]);
    }

    #[test]
    fn reference_profile_levels() {
        let m = ModelConfig::reference();
        m.validate().unwrap();
        assert_eq!(m.level_sizes, vec![8192, 2048, 512, 256, 64]);
        assert_eq!((m.heads, m.attention_dim), (8, 128));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[train]\ndecay_factor = 0.0\n").is_err());
        assert!(Config::from_toml_str("[model]\nlevel_sizes = [8, 8]\nwidths = [4, 4]\n").is_err());
        assert!(Config::from_toml_str("[loss]\nthreshold = 1.5\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_model_changes() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.model.str_k = 8;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

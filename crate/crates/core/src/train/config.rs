//! The JSON run configuration.
//!
//! Top-level keys are `data`, `model`, `loss`, `optim` and `train`. Every
//! field has a default, so `{}` is a valid configuration; unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::{LossWeights, StructuralVariant};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::nets::StudentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub align_depth: usize,
    pub mlp_ratio: usize,
    /// Width of the teacher features; at most `patch²`.
    pub teacher_dim: usize,
    pub teacher_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            d_model: 64,
            heads: 4,
            align_depth: 2,
            mlp_ratio: 4,
            teacher_dim: 16,
            teacher_seed: 0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_proj: f64,
    /// When absent, the variant's usual weight applies (MSE 2, KL 0.5,
    /// none 0).
    pub lambda_struc: Option<f64>,
    pub variant: StructuralVariant,
    pub tau_t: f64,
    pub tau_s: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_proj: 1.0,
            lambda_struc: None,
            variant: StructuralVariant::Mse,
            tau_t: 0.2,
            tau_s: 0.2,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        let lambda_struc = self.lambda_struc.unwrap_or(match self.variant {
            StructuralVariant::Mse => 2.0,
            StructuralVariant::Kl => 0.5,
            StructuralVariant::None => 0.0,
        });
        LossWeights {
            lambda_proj: self.lambda_proj,
            lambda_struc,
            variant: self.variant,
            tau_t: self.tau_t,
            tau_s: self.tau_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub label_dropout: f64,
    pub ema_decay: f64,
    /// Caps the EMA decay at `(1 + step) / (10 + step)` early in training.
    pub ema_warmup: bool,
    pub seed: u64,
    /// Progress reporting interval in steps (metrics.csv always gets
    /// every step).
    pub log_interval: u64,
    /// Intermediate checkpoint interval in steps; 0 disables them.
    pub checkpoint_interval: u64,
    pub output_dir: Option<PathBuf>,
    /// Write elapsed milliseconds into metrics.csv. Off by default so the
    /// file is byte-reproducible.
    pub record_wallclock: bool,
    /// Held-out images used by evaluation.
    pub eval_images: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: 64,
            total_steps: 2000,
            label_dropout: 0.1,
            ema_decay: 0.9999,
            ema_warmup: true,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 500,
            output_dir: None,
            record_wallclock: false,
            eval_images: 256,
            sample_steps: 50,
            cfg_scale: 1.325,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: RunConfig,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            depth: self.model.depth,
            d_model: self.model.d_model,
            heads: self.model.heads,
            align_depth: self.model.align_depth,
            n_tokens: self.data.n_tokens(),
            d_latent: self.data.token_dim(),
            n_classes: self.data.n_classes,
            mlp_ratio: self.model.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.student_config().validate()?;
        self.loss.weights().validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if self.model.teacher_dim == 0 || self.model.teacher_dim > self.data.token_dim() {
            return Err(Error::Config(format!(
                "model.teacher_dim must lie in 1..={}",
                self.data.token_dim()
            )));
        }
        if t.batch_size == 0 || self.data.n_images == 0 {
            return Err(Error::Config("batch_size and n_images must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.label_dropout) || !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(Error::Config(
                "label_dropout and ema_decay must lie in [0, 1]".into(),
            ));
        }
        if t.eval_images < 2 || t.sample_steps == 0 || !t.cfg_scale.is_finite() {
            return Err(Error::Config(
                "eval_images must be at least 2, sample_steps positive, cfg_scale finite".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the value at a dotted key path such as `loss.tau_t`. The
    /// path must name an existing field.
    pub fn with_override(&self, path: &str, value: &Value) -> Result<TrainConfig> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let mut node = &mut tree;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key path '{path}'")))?;
        }
        *node = value.clone();
        let cfg: TrainConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value for '{path}': {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

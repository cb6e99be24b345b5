//! Training configuration and its TOML file round-trip.
//!
//! Defaults are the full-scale settings; every field can be overridden for
//! desk-scale runs through a partial TOML file that names only the keys it
//! changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion-prior training settings (section `[diffusion]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    /// Corruption steps T.
    pub steps: usize,
    /// Corruption rate at step 1.
    pub beta_start: f64,
    /// Corruption rate at step T.
    pub beta_end: f64,
    /// Denoiser message-passing layers.
    pub denoiser_layers: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            denoiser_layers: 5,
            batch_size: 32,
            epochs: 50,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
        }
    }
}

/// Graph attention embedding settings (section `[gat]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Embedding-training batch size; the joint diffusion loop batches by
    /// `diffusion.batch_size`, this entry is kept for config compatibility.
    pub batch_size: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 5,
            hidden: 128,
            heads: 8,
            batch_size: 64,
        }
    }
}

/// Policy training settings (section `[policy]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Masked encoder layers.
    pub layers: usize,
    pub heads: usize,
    /// Logit clipping constant.
    pub clip: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Instances per gradient step.
    pub batch_size: usize,
    pub hidden: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Reverse-process steps used when predicting masks for training.
    pub mask_reverse_steps: usize,
    /// Instances held out from the dataset tail for validation.
    pub validation_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            layers: 5,
            heads: 8,
            clip: 10.0,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 32,
            hidden: 128,
            epochs: 100,
            patience: 10,
            mask_reverse_steps: 50,
            validation_size: 32,
        }
    }
}

/// Everything the two training stages need, in one serializable bundle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub diffusion: DiffusionTrainConfig,
    pub gat: GatConfig,
    pub policy: PolicyConfig,
}

impl TrainConfig {
    /// Check every invariant the training code relies on.
    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        let positive = [
            ("diffusion.steps", d.steps),
            ("diffusion.denoiser_layers", d.denoiser_layers),
            ("diffusion.batch_size", d.batch_size),
            ("diffusion.epochs", d.epochs),
            ("gat.layers", self.gat.layers),
            ("gat.hidden", self.gat.hidden),
            ("gat.heads", self.gat.heads),
            ("gat.batch_size", self.gat.batch_size),
            ("policy.layers", self.policy.layers),
            ("policy.heads", self.policy.heads),
            ("policy.batch_size", self.policy.batch_size),
            ("policy.hidden", self.policy.hidden),
            ("policy.epochs", self.policy.epochs),
            ("policy.patience", self.policy.patience),
            ("policy.mask_reverse_steps", self.policy.mask_reverse_steps),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        let finite_positive = [
            ("diffusion.beta_start", d.beta_start),
            ("diffusion.beta_end", d.beta_end),
            ("diffusion.learning_rate", d.learning_rate),
            ("policy.learning_rate", self.policy.learning_rate),
            ("policy.clip", self.policy.clip),
        ];
        for (name, value) in finite_positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a positive finite number"
                )));
            }
        }
        for (name, value) in [
            ("diffusion.weight_decay", d.weight_decay),
            ("policy.weight_decay", self.policy.weight_decay),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a nonnegative finite number"
                )));
            }
        }
        if d.beta_start > d.beta_end {
            return Err(Error::InvalidArgument(
                "diffusion.beta_start must not exceed beta_end".into(),
            ));
        }
        if d.beta_end >= 1.0 {
            return Err(Error::InvalidArgument(
                "diffusion.beta_end must stay below 1".into(),
            ));
        }
        if self.gat.hidden % self.gat.heads != 0 {
            return Err(Error::InvalidArgument(
                "gat.hidden must be divisible by gat.heads".into(),
            ));
        }
        if self.policy.hidden % self.policy.heads != 0 {
            return Err(Error::InvalidArgument(
                "policy.hidden must be divisible by policy.heads".into(),
            ));
        }
        if self.policy.hidden != self.gat.hidden {
            return Err(Error::InvalidArgument(
                "policy.hidden must match gat.hidden (shared embeddings)".into(),
            ));
        }
        if self.diffusion.steps < self.policy.mask_reverse_steps {
            return Err(Error::InvalidArgument(
                "policy.mask_reverse_steps cannot exceed diffusion.steps".into(),
            ));
        }
        Ok(())
    }

    /// Parse a (possibly partial) TOML document and validate the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

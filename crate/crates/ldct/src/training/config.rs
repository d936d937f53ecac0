//! Experiment configuration: every knob of the training procedure with its
//! published default, JSON (de)serialization tolerant of partial files, and
//! validation.

use crate::data::DatasetConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Full experiment configuration. Defaults follow the reference training
/// setup: 10 Monte-Carlo weight samples, Adam at 1e-4, batches of 32
/// patches, alignment weights `beta1_bnua = 10` and `beta2_rda = 0.001`, and
/// a KL term scaled by one over the number of training patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Feature channels of the encoder/decoder.
    pub channels: usize,
    /// Monte-Carlo weight samples per training forward pass.
    pub mc_samples: usize,
    /// Monte-Carlo weight samples used at evaluation time.
    pub eval_mc_samples: usize,
    /// Relative posterior width of the empirical-Bayes initialization.
    pub moped_delta: f64,
    /// Deterministic warm-up epochs before the posterior is re-anchored.
    pub moped_pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patches_per_slice: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the noise-uncertainty alignment loss.
    pub beta1_bnua: f64,
    /// Weight of the adversarial residual alignment loss.
    pub beta2_rda: f64,
    /// Explicit KL weight; `None` resolves to `1 / n_train_patches`.
    pub kl_scale: Option<f64>,
    /// Train the deterministic reduction: Bayesian layers pinned to their
    /// means with zero KL.
    pub freeze_sigma: bool,
    /// Epochs without source-validation improvement before stopping.
    pub early_stop_patience: usize,
    pub disc_base_channels: usize,
    /// Dataset generation parameters (used by data generation and recorded
    /// for provenance).
    pub data: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            channels: 32,
            mc_samples: 10,
            eval_mc_samples: 10,
            moped_delta: 0.1,
            moped_pretrain_epochs: 2,
            epochs: 50,
            batch_size: 32,
            patch_size: 64,
            patches_per_slice: 8,
            learning_rate: 1e-4,
            disc_learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta1_bnua: 10.0,
            beta2_rda: 0.001,
            kl_scale: None,
            freeze_sigma: false,
            early_stop_patience: 10,
            disc_base_channels: 64,
            data: DatasetConfig::smoke(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced profile that trains in minutes on a laptop CPU while keeping
    /// every mechanism active: 128×128 slices, 64 training slices per
    /// domain, 3 epochs, and a slimmer network.
    pub fn smoke() -> Self {
        ExperimentConfig {
            channels: 16,
            mc_samples: 5,
            eval_mc_samples: 5,
            moped_pretrain_epochs: 1,
            epochs: 3,
            batch_size: 16,
            patch_size: 32,
            patches_per_slice: 4,
            disc_base_channels: 16,
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.mc_samples < 2 || self.eval_mc_samples < 2 {
            return bad(format!(
                "mc_samples ({}) and eval_mc_samples ({}) must be at least 2",
                self.mc_samples, self.eval_mc_samples
            ));
        }
        if self.moped_delta <= 0.0 {
            return bad(format!("moped_delta must be positive, got {}", self.moped_delta));
        }
        if self.batch_size == 0 || self.patches_per_slice == 0 {
            return bad("batch_size and patches_per_slice must be positive".into());
        }
        if self.patch_size < 16 {
            return bad(format!(
                "patch_size {} too small (minimum 16)",
                self.patch_size
            ));
        }
        if self.patch_size > self.data.slice_size {
            return bad(format!(
                "patch_size {} exceeds slice_size {}",
                self.patch_size, self.data.slice_size
            ));
        }
        if self.learning_rate <= 0.0 || self.disc_learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.beta1_bnua < 0.0 || self.beta2_rda < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if let Some(k) = self.kl_scale {
            if k < 0.0 {
                return bad(format!("kl_scale must be non-negative, got {k}"));
            }
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive".into());
        }
        if self.disc_base_channels == 0 {
            return bad("disc_base_channels must be positive".into());
        }
        let total_patches =
            self.data.source_counts.train * self.patches_per_slice;
        if total_patches < self.batch_size {
            return bad(format!(
                "training pool ({total_patches} patches) smaller than one batch ({})",
                self.batch_size
            ));
        }
        self.data.validate()
    }

    /// KL weight actually applied: the configured value, or one over the
    /// number of source training patches per epoch.
    pub fn effective_kl_scale(&self) -> f64 {
        self.kl_scale.unwrap_or_else(|| {
            1.0 / (self.data.source_counts.train * self.patches_per_slice) as f64
        })
    }
}

//! Training configuration: optimizer, schedule, batch/extension sizes, loss
//! weights, precision, and the trainable-parameter policy.

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ParamPolicy;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scalar width of the encoder forward/backward pass. Geometry, losses, and
/// optimizer state always run in f64 regardless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Full,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub extended_batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub max_cycles: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Explicit opt-in for a nonzero weight decay; the default optimizer runs
    /// without it and a silently contradicting config is rejected.
    pub allow_weight_decay: bool,
    pub precision: Precision,
    pub loss_weights: LossWeights,
    pub policy: ParamPolicy,
    pub seed: u64,
    /// L2-normalize features before the head and the losses.
    pub l2_normalize: bool,
    /// Extend each batch with slerp-interpolated same-class features.
    pub slerp_extension: bool,
    /// Apply image augmentations to training frames.
    pub augment: bool,
    /// Draw class-balanced batches instead of frame-wise uniform ones.
    pub class_balance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            extended_batch_size: 1024,
            lr_min: 1e-5,
            lr_max: 3e-4,
            warmup_epochs: 1,
            decay_epochs: 9,
            max_cycles: 2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.0,
            allow_weight_decay: false,
            precision: Precision::Reduced,
            loss_weights: LossWeights::default(),
            policy: ParamPolicy::LnOnly,
            seed: 0,
            l2_normalize: true,
            slerp_extension: true,
            augment: false,
            class_balance: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.extended_batch_size < self.batch_size
            || self.extended_batch_size % self.batch_size != 0
        {
            return Err(Error::InvalidConfig(format!(
                "extended_batch_size ({}) must be a multiple of batch_size ({})",
                self.extended_batch_size, self.batch_size
            )));
        }
        if !(self.lr_min.is_finite() && self.lr_max.is_finite()) || self.lr_min >= self.lr_max {
            return Err(Error::InvalidConfig(format!(
                "need lr_min < lr_max, got {} >= {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_epochs < 1 || self.decay_epochs < 1 || self.max_cycles < 1 {
            return Err(Error::InvalidConfig(
                "warmup_epochs, decay_epochs, and max_cycles must be >= 1".into(),
            ));
        }
        if self.weight_decay != 0.0 && !self.allow_weight_decay {
            return Err(Error::InvalidConfig(
                "weight_decay > 0 contradicts the default optimizer setup; \
                 set allow_weight_decay = true to override"
                    .into(),
            ));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig("weight_decay must be finite and >= 0".into()));
        }
        self.loss_weights.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Epochs in one warmup + decay cycle.
    pub fn cycle_epochs(&self) -> usize {
        self.warmup_epochs + self.decay_epochs
    }

    /// Total epochs over all cycles.
    pub fn total_epochs(&self) -> usize {
        self.cycle_epochs() * self.max_cycles
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("TOML parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Content fingerprint of the resolved config.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint::of_json(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_reference_values() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.extended_batch_size, 1024);
        assert_eq!(c.lr_min, 1e-5);
        assert_eq!(c.lr_max, 3e-4);
        assert_eq!(c.warmup_epochs, 1);
        assert_eq!(c.decay_epochs, 9);
        assert_eq!(c.max_cycles, 2);
        assert_eq!(c.total_epochs(), 20);
        assert_eq!(c.loss_weights.alpha, 0.1);
        assert_eq!(c.loss_weights.beta, 0.5);
        assert_eq!(c.weight_decay, 0.0);
    }

    #[test]
    fn weight_decay_requires_explicit_override() {
        let mut c = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.allow_weight_decay = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn extension_must_be_multiple_of_batch() {
        let c = TrainConfig {
            batch_size: 100,
            extended_batch_size: 1024,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::default();
        let text = c.to_toml_string();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
    }
}

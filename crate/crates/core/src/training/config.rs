use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::util::sha256_hex;

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Synthetic pairs, fidelity plus perceptual terms.
    #[default]
    Pretrain,
    /// Translated pairs with the distillation term against a frozen teacher.
    FinetuneItkt,
    /// Translated pairs without a teacher.
    FinetunePlain,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::FinetuneItkt => "finetune_itkt",
            Self::FinetunePlain => "finetune_plain",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Pretrain, Self::FinetuneItkt, Self::FinetunePlain]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode `{s}`")))
    }
}

/// Optimizer schedule and batch geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub patch: usize,
    pub lr0: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub mode: TrainMode,
    /// Defaults to one pass over the training images per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Channel widths of the three perceptual stages.
    pub perceptual_widths: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            patch: 48,
            lr0: 1e-3,
            lr_halving_period: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            mode: TrainMode::Pretrain,
            steps_per_epoch: None,
            perceptual_widths: [64, 128, 256],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.patch.is_multiple_of(4) {
            return err(format!(
                "patch must be a positive multiple of 4, got {}",
                self.patch
            ));
        }
        if self.batch_size == 0 {
            return err("batch size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return err(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.lr_halving_period == 0 {
            return err("lr halving period must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return err("Adam epsilon must be > 0".into());
        }
        if self.steps_per_epoch == Some(0) {
            return err("steps_per_epoch must be >= 1".into());
        }
        if self.perceptual_widths.contains(&0) {
            return err("perceptual widths must be positive".into());
        }
        self.loss_weights.validate()
    }

    /// Steps in one epoch over `n` training images.
    pub fn steps_for(&self, n: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.batch_size).max(1))
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)[..16].to_string()
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let halvings = (epoch / config.lr_halving_period).min(i32::MAX as usize) as i32;
    config.lr0 * 0.5f64.powi(halvings)
}

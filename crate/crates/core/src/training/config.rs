use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CoreVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

/// Data the frozen backbone is fitted to before any adapter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    FirstDomain,
    TrainingPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per domain per step; at least the domain size means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub core_variant: CoreVariant,
    pub r: usize,
    pub r_prime: usize,
    /// Hidden width `d = k` of the backbone.
    pub width: usize,
    pub hidden_layers: usize,
    pub adapted_layers: Vec<usize>,
    pub pretrain_source: PretrainSource,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Multi-LoRA members start from the previous member's parameters.
    pub warm_start: bool,
    pub distill_fit_steps: usize,
    pub distill_fit_lr: f64,
    /// Joint epochs run after a distilled model has been assembled.
    pub distill_finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-2,
            epochs: 300,
            batch_size: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            core_variant: CoreVariant::LinDyn,
            r: 8,
            r_prime: 4,
            width: 32,
            hidden_layers: 2,
            adapted_layers: vec![0],
            pretrain_source: PretrainSource::FirstDomain,
            pretrain_epochs: 300,
            pretrain_lr: 1e-2,
            warm_start: true,
            distill_fit_steps: 2000,
            distill_fit_lr: 1e-2,
            distill_finetune_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.learning_rate));
        }
        if !(self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite()) {
            return bad(format!("pretrain learning rate {} is invalid", self.pretrain_lr));
        }
        if !(self.distill_fit_lr >= 0.0 && self.distill_fit_lr.is_finite()) {
            return bad(format!("distillation learning rate {} is invalid", self.distill_fit_lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.width == 0 {
            return bad("width must be positive".into());
        }
        if self.r_prime == 0 || self.r_prime > self.r || self.r > self.width {
            return bad(format!(
                "need 0 < r' <= r <= width, got r' = {}, r = {}, width = {}",
                self.r_prime, self.r, self.width
            ));
        }
        let mut seen = vec![false; self.hidden_layers];
        for &l in &self.adapted_layers {
            match seen.get_mut(l) {
                None => return bad(format!("adapted layer {l} with {} hidden layers", self.hidden_layers)),
                Some(true) => return bad(format!("layer {l} listed twice")),
                Some(s) => *s = true,
            }
        }
        Ok(())
    }
}

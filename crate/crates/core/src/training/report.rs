use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::ParamCount;
use crate::error::Result;

/// Relative rise over the running minimum beyond which an epoch loss is flagged.
pub const MONOTONE_WINDOW: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub domain: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    /// Mean loss of each trained domain at the start of each epoch.
    pub losses: Vec<LossRecord>,
    /// Accuracy on each training domain after training.
    pub train_accuracy: Vec<f64>,
    pub pretrain_loss: f64,
    pub trainable_params: usize,
    pub param_counts: ParamCount,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_loss_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,domain,loss")?;
        for r in &self.losses {
            writeln!(out, "{},{},{}", r.epoch, r.domain, r.loss)?;
        }
        Ok(())
    }

    /// Mean of the per-domain losses recorded for `epoch`.
    pub fn epoch_loss(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .losses
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Epochs whose loss exceeds the best earlier loss by more than the window.
pub fn monotonicity_warnings(label: &str, epoch_losses: &[f64]) -> Vec<String> {
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for (e, &l) in epoch_losses.iter().enumerate() {
        if l > best * (1.0 + MONOTONE_WINDOW) {
            out.push(format!("{label}: epoch {e} loss {l:.6} exceeds best {best:.6} by more than 5%"));
        }
        best = best.min(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warnings_only_past_the_window() {
        assert!(monotonicity_warnings("x", &[1.0, 0.9, 0.94, 0.5]).is_empty());
        assert_eq!(monotonicity_warnings("x", &[1.0, 0.5, 0.6]).len(), 1);
    }
}

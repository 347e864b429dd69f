//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use matlora::model::CoreVariant;
use matlora::training::{TrainConfig, TrainedModel};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub method: String,
    /// Set for shared-basis models.
    pub core_variant: Option<CoreVariant>,
    pub config: TrainConfig,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn new(method: String, config: TrainConfig, model: TrainedModel) -> Self {
        let core_variant = matches!(model, TrainedModel::Matlora(_)).then_some(config.core_variant);
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            seed: config.seed,
            method,
            core_variant,
            config,
            model,
        }
    }

    pub fn to_json(&self) -> anyhow::Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).context("checkpoint is not JSON")?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => bail!("unsupported checkpoint format version {v} (expected {CHECKPOINT_VERSION})"),
            None => bail!("checkpoint has no format_version"),
        }
        serde_json::from_value(raw).context("malformed checkpoint")
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use matlora::data::{gen_two_moons, TwoMoonsConfig};
    use matlora::model::Predictor;
    use matlora::training::train_matlora;

    #[test]
    fn round_trip_is_bit_exact() {
        let gc = TwoMoonsConfig { num_domains: 4, samples_per_domain: 40, train_count: 3, ..TwoMoonsConfig::default() };
        let seq = gen_two_moons(&gc, 1).unwrap();
        let cfg = TrainConfig { epochs: 5, pretrain_epochs: 20, width: 8, r: 3, r_prime: 2, core_variant: CoreVariant::NonLin, ..TrainConfig::default() };
        let (model, _) = train_matlora(&seq, &cfg).unwrap();
        let ck = Checkpoint::new("matlora".into(), cfg, TrainedModel::Matlora(model));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.core_variant, Some(CoreVariant::NonLin));
        let probe = &seq.domains[3].inputs;
        for t in [0.0, 2.0, 3.5] {
            let a = ck.model.predict_logits(probe, t).unwrap();
            let b = back.model.predict_logits(probe, t).unwrap();
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_other_versions() {
        assert!(Checkpoint::from_json(r#"{"format_version": 99}"#).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}

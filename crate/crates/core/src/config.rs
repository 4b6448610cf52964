//! Run configuration as a JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{ScheduleConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::morph::MorphConfig;
use crate::unet::UNetArch;

/// Every tunable of the pipeline. Missing keys take defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub model: UNetArch,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub morph: MorphConfig,
    /// Classifier-free guidance is not supported; must stay `false`.
    pub guidance: bool,
}


impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.guidance {
            return Err(Error::Config("classifier-free guidance is not supported".into()));
        }
        self.model.validate()?;
        self.schedule.build()?;
        self.morph.validate()?;
        if self.morph.ddim_steps != self.schedule.ddim_steps {
            return Err(Error::Config(format!(
                "morph.ddim_steps {} differs from schedule.ddim_steps {}",
                self.morph.ddim_steps, self.schedule.ddim_steps
            )));
        }
        if self.lora.rank == 0 || self.train.batch_size == 0 || self.lora.batch_size == 0 {
            return Err(Error::Config("rank and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lora.rank, 16);
        assert_eq!(c.lora.steps, 200);
        assert_eq!(c.lora.lr, 2e-4);
        assert_eq!(c.schedule.ddim_steps, 50);
        assert_eq!(c.schedule.num_steps, 1000);
        assert_eq!(c.morph.lambda, 0.6);
        assert!(!c.guidance);
        c.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"base_channels": 16}, "morph": {"n": 4}}"#).unwrap();
        assert_eq!(c.model.base_channels, 16);
        assert_eq!(c.model.resolution, 32);
        assert_eq!(c.morph.n, 4);
        assert_eq!(c.morph.lambda, 0.6);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lora": {"rnk": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"guidance": true}"#).is_err());
        assert!(RunConfig::from_json(r#"{"morph": {"lambda": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"morph": {"adain_stage": "middle"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schedule": {"ddim_steps": 20}}"#).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.morph.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}

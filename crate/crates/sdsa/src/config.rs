//! Experiment configuration: one TOML document drives generation, training,
//! and evaluation. Unknown keys are rejected so a config file is always a
//! complete provenance record.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kgloss::LossWeights;
use crate::regions::{RegionConfig, RegionId};
use crate::synthgen::{default_presets, RegionProcessParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Samples per region, for both the synthetic pretraining draw and the
    /// regenerated "observed" draw.
    pub n_samples: usize,
    pub n_days: usize,
    /// Probability that an observed day carries flux measurements; the
    /// synthetic pretraining draw is always fully observed.
    pub flux_observed_frac: f64,
    pub presets: BTreeMap<RegionId, RegionProcessParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizeConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub att_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Learning rates: steps 1-3 (synthetic), step 4 (observed flux),
    /// step 5 (observed yield).
    pub lr_pretrain: f64,
    pub lr_finetune_flux: f64,
    pub lr_finetune_yield: f64,
    /// Learning-rate multiplier on GRU parameters during step 5.
    pub encoder_lr_multiplier: f64,
    pub epochs: [usize; 5],
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-3,
            lr_finetune_flux: 3e-4,
            lr_finetune_yield: 1e-4,
            encoder_lr_multiplier: 0.1,
            epochs: [50, 50, 50, 100, 100],
            patience: 10,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Longest run of missing driver days that interpolation will fill.
    pub max_gap: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { max_gap: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub base_seed: u64,
    /// Awareness levels an experiment sweep runs.
    pub levels: Vec<u8>,
    pub regions: RegionConfig,
    pub generator: GeneratorConfig,
    pub model: ModelSizeConfig,
    pub loss: LossWeights,
    pub protocol: ProtocolConfig,
    pub splits: SplitFractions,
    pub preprocess: PreprocessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base_seed: 42,
            levels: vec![1, 2, 3],
            regions: RegionConfig::midwest_default(),
            generator: GeneratorConfig {
                n_samples: 100,
                n_days: 365,
                flux_observed_frac: 0.7,
                presets: default_presets().into_iter().collect(),
            },
            model: ModelSizeConfig {
                hidden_dim: 32,
                n_layers: 2,
                att_dim: 16,
            },
            loss: LossWeights::default(),
            protocol: ProtocolConfig::default(),
            splits: SplitFractions::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.regions.validate()?;
        self.loss.validate()?;
        if self.generator.n_samples == 0 || self.generator.n_days == 0 {
            return Err(Error::Config("generator.n_samples and n_days must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.generator.flux_observed_frac) {
            return Err(Error::Config("generator.flux_observed_frac must be in [0,1]".into()));
        }
        for id in self.regions.region_ids() {
            let p = self
                .generator
                .presets
                .get(&id)
                .ok_or_else(|| Error::Config(format!("region {id} has no generator preset")))?;
            p.validate()?;
        }
        for id in self.generator.presets.keys() {
            if self.regions.get(id).is_none() {
                return Err(Error::Config(format!("preset for unconfigured region {id}")));
            }
        }
        if self.model.hidden_dim == 0 || self.model.n_layers == 0 || self.model.att_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let p = &self.protocol;
        if p.batch_size == 0 {
            return Err(Error::Config("protocol.batch_size must be >= 1".into()));
        }
        if p.lr_pretrain <= 0.0 || p.lr_finetune_flux <= 0.0 || p.lr_finetune_yield <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if p.encoder_lr_multiplier < 0.0 {
            return Err(Error::Config("encoder_lr_multiplier must be >= 0".into()));
        }
        let s = &self.splits;
        if s.train <= 0.0 || s.val < 0.0 || s.test <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        for level in &self.levels {
            crate::model::AwarenessLevel::from_number(*level)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialized form, recorded in provenance.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        format!("{:x}", h.finalize())
    }
}

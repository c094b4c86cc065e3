//! Run configuration: one JSON document whose every field has a default.

use std::path::Path;

use ebmdmo_core::dmo::{DmoModelConfig, DmoTrainConfig};
use ebmdmo_core::ebm::{EbmModelConfig, EbmTrainConfig};
use ebmdmo_core::encoder::EncoderVariant;
use ebmdmo_core::optimizers::{OptimizerKind, OptimizerSpec};
use ebmdmo_core::pipeline::PredictionConfig;
use ebmdmo_core::scene::TaskId;
use ebmdmo_core::vae::VaeConfig;
use ebmdmo_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub task: TaskId,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { task: TaskId::Reach, train: 200, test: 50, seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EbmSection {
    pub model: EbmModelConfig,
    pub train: EbmTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmoSection {
    pub model: DmoModelConfig,
    pub train: DmoTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSection {
    pub n: usize,
    pub rounds: usize,
}

impl Default for PredictionSection {
    fn default() -> Self {
        Self { n: 8, rounds: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub n_values: Vec<usize>,
    pub r_values: Vec<usize>,
    pub variants: Vec<EncoderVariant>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed: 0, n_values: vec![1, 8, 50], r_values: vec![0, 1, 5], variants: EncoderVariant::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub vae: VaeConfig,
    pub ebm: EbmSection,
    pub dmo: DmoSection,
    /// Baseline optimizer; `kind = dmo` selects the learned refiner.
    pub optimizer: OptimizerSpec,
    pub prediction: PredictionSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            vae: VaeConfig::default(),
            ebm: EbmSection::default(),
            dmo: DmoSection::default(),
            optimizer: OptimizerSpec::dmo(),
            prediction: PredictionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Dataset(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.train == 0 || self.dataset.test == 0 {
            return Err(Error::InvalidConfig("dataset train and test counts must be positive".into()));
        }
        self.vae.validate()?;
        self.ebm.model.encoder.validate()?;
        self.ebm.train.validate()?;
        self.dmo.model.encoder.validate()?;
        self.dmo.train.validate()?;
        if self.optimizer.kind != OptimizerKind::Dmo {
            self.optimizer.validate()?;
        }
        if self.prediction.n == 0 {
            return Err(Error::InvalidConfig("prediction n must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimizer spec for a kind named on the command line: the configured
    /// spec when kinds agree, otherwise that kind's standard settings.
    pub fn optimizer_for(&self, kind: Option<OptimizerKind>) -> OptimizerSpec {
        match kind {
            None => self.optimizer,
            Some(k) if k == self.optimizer.kind => self.optimizer,
            Some(OptimizerKind::Dmo) => OptimizerSpec::dmo(),
            Some(OptimizerKind::Langevin) => OptimizerSpec::langevin(),
            Some(OptimizerKind::Gd) => OptimizerSpec::gd(),
            Some(OptimizerKind::LatentLangevin) => OptimizerSpec::vaebm_l(),
        }
    }

    pub fn prediction_config(&self, optimizer: OptimizerSpec) -> PredictionConfig {
        PredictionConfig { n: self.prediction.n, rounds: self.prediction.rounds, optimizer }
    }
}

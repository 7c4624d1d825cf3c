//! Experiment configuration, read from TOML.
//!
//! Every section is optional; missing fields fall back to the toy defaults.
//! See `configs/experiment.toml` at the repository root for an annotated file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::UNetConfig;
use crate::datasets::RingMixtureSpec;
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::{SweepGrid, DEFAULT_BAND};
use crate::steering::{IntegrationMode, WeightPolicy};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pretraining sample count.
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 50_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringSection {
    /// Mode used by `finetune`; a sweep takes its modes from `[sweep]`.
    pub mode: IntegrationMode,
    pub weight_policy: WeightPolicy,
    /// Ring the labeled set is drawn from and generation is steered toward.
    pub target: usize,
    pub n_labeled: usize,
}

impl Default for SteeringSection {
    fn default() -> Self {
        Self { mode: IntegrationMode::Emd, weight_policy: WeightPolicy::Uniform, target: 1, n_labeled: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Analytic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub sampler: SamplerConfig,
    pub band: f64,
    pub scorer: ScorerKind,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { samples: 1000, sampler: SamplerConfig::ddim(50), band: DEFAULT_BAND, scorer: ScorerKind::Analytic }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Backbone initialization seed.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub rings: RingMixtureSpec,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub steering: SteeringSection,
    pub sweep: SweepGrid,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seed: 0,
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            rings: RingMixtureSpec::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            steering: SteeringSection::default(),
            sweep: SweepGrid::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        crate::diffusion::NoiseSchedule::try_from(self.schedule)?;
        self.unet.validate()?;
        self.rings.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.steering.target >= self.rings.classes() {
            return Err(Error::Config(format!("target ring {} does not exist", self.steering.target)));
        }
        if self.unet.input_dim != 2 {
            return Err(Error::Config("the ring task needs input_dim = 2".into()));
        }
        if !(self.eval.band >= 0.0) {
            return Err(Error::Config("eval.band must be nonnegative".into()));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval.samples must be positive".into()));
        }
        Ok(())
    }

    /// Sets every seed in the file to `seed`: backbone init, data, both
    /// training runs and the sweep (which then runs the single seed).
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.sweep.seeds = vec![seed];
    }
}

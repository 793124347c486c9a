//! Run configuration: one TOML document per experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demodata::{ToyWorld, WorldConfig};
use crate::denoiser::Architecture;
use crate::error::{DroError, Result};
use crate::numerics::Seed;
use crate::scalar::Scalar;
use crate::schedule::{LambdaMode, NoiseSchedule, SigmaMode};
use crate::trainer::{PretrainConfig, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub lambda_mode: LambdaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
            sigma_mode: SigmaMode::Beta,
            lambda_mode: LambdaMode::Unit,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::linear(self.horizon, self.beta_start, self.beta_end, self.sigma_mode, self.lambda_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Reference samples drawn per condition before ranking.
    pub pool_per_condition: usize,
    /// Demonstrations kept per condition.
    pub k: usize,
    pub guidance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { pool_per_condition: 1024, k: 256, guidance: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_prompts: usize,
    pub n_per_prompt: usize,
    pub guidance: f64,
    /// Conditions cycled over by the prompts; empty means all.
    pub conditions: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_prompts: 200, n_per_prompt: 5, guidance: 2.0, conditions: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    /// Random (φ, θ_ref, θ) triples per σ² mode.
    pub triples: usize,
    pub draws: usize,
    pub tolerance: f64,
    /// Multiply every λ_t by 2 before checking; the check must then fail.
    pub corrupt_lambda: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            beta_start: 1e-2,
            beta_end: 0.3,
            hidden: vec![32, 32],
            triples: 5,
            draws: 2000,
            tolerance: 1e-10,
            corrupt_lambda: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub model: Architecture,
    pub pretrain: PretrainConfig,
    pub experts: ExpertConfig,
    pub train: TrainerConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    /// Write a resumable training state every this many steps (0: end only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            out_dir: "runs/default".into(),
            world: WorldConfig::default(),
            schedule: ScheduleConfig::default(),
            model: Architecture::default(),
            pretrain: PretrainConfig::default(),
            experts: ExpertConfig::default(),
            train: TrainerConfig::default(),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
            checkpoint_every: 500,
        };
        cfg.apply_seed(0);
        cfg
    }
}

/// Seed tags of the pipeline stages.
pub mod stage {
    pub const PRETRAIN: u64 = 1;
    pub const POOL: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const VERIFY: u64 = 5;
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| DroError::Config(e.to_string()))?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DroError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DroError::NotFound(format!("config file {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Sets the master seed and the stage seeds derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        let s = Seed(seed);
        self.pretrain.seed = s.child(stage::PRETRAIN).0;
        self.train.seed = s.child(stage::TRAIN).0;
    }

    pub fn stage_seed(&self, tag: u64) -> Seed {
        Seed(self.seed).child(tag)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: DroError| DroError::Config(e.to_string());
        if self.seed > i64::MAX as u64 {
            return Err(DroError::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model.validate().map_err(cfg_err)?;
        self.schedule.build::<f64>().map_err(cfg_err)?;
        ToyWorld::<f64>::from_config(&self.world).map_err(cfg_err)?;
        if self.model.horizon != self.schedule.horizon {
            return Err(DroError::Config("model.horizon must equal schedule.horizon".into()));
        }
        if self.model.n_conditions != self.world.n_conditions || self.model.data_dim != 2 {
            return Err(DroError::Config("model must have data_dim 2 and one condition per world condition".into()));
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.experts.k == 0 || self.experts.pool_per_condition < self.experts.k {
            return Err(DroError::Config("experts need 1 <= k <= pool_per_condition".into()));
        }
        if self.eval.n_per_prompt % 2 == 0 || self.eval.n_prompts == 0 {
            return Err(DroError::Config("eval needs n_prompts >= 1 and odd n_per_prompt".into()));
        }
        if let Some(&c) = self.eval.conditions.iter().find(|&&c| c >= self.world.n_conditions) {
            return Err(DroError::Config(format!("eval condition {c} does not exist")));
        }
        if self.verify.triples == 0 || self.verify.draws < 2 || !(self.verify.tolerance > 0.0) {
            return Err(DroError::Config("verify needs triples >= 1, draws >= 2, tolerance > 0".into()));
        }
        Ok(())
    }

    pub fn eval_conditions(&self) -> Vec<usize> {
        if self.eval.conditions.is_empty() {
            (0..self.world.n_conditions).collect()
        } else {
            self.eval.conditions.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.apply_seed(17);
        c.train.clip_m = f64::NEG_INFINITY;
        c.eval.conditions = vec![1, 3];
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nn_steps = 10\n").unwrap();
        assert_eq!(c.train.n_steps, 10);
        assert_eq!(c.train.batch, TrainerConfig::default().batch);
        assert_eq!(c.train.seed, Seed(3).child(stage::TRAIN).0);
    }

    #[test]
    fn rejects_invalid() {
        assert!(matches!(RunConfig::from_toml("[train]\nsync_every = 0\n"), Err(DroError::Config(_))));
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[schedule]\nsigma_mode = \"other\"\n").is_err());
        assert!(RunConfig::from_toml("[model]\nhorizon = 20\n").is_err());
        assert!(matches!(RunConfig::load(Path::new("/definitely/not/here.toml")), Err(DroError::NotFound(_))));
    }
}

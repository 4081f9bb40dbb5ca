use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchConfig, InitialStateMode, TrainConfig};
use crate::env::{BicycleSpec, ConstrainedConfig, EnvConfig, ExpertConfig, LinearConfig};
use crate::error::{Error, Result};
use crate::hash::config_hash;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub random_episodes: usize,
    pub noise_prob: f64,
    pub noise_std: f64,
    /// Std of Gaussian noise added to the states the dynamics model is trained on.
    pub dynamics_state_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let e = ExpertConfig::default();
        Self {
            episodes: e.episodes,
            random_episodes: e.random_episodes,
            noise_prob: e.noise_prob,
            noise_std: e.noise_std,
            dynamics_state_noise: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn expert(&self) -> ExpertConfig {
        ExpertConfig {
            episodes: self.episodes,
            random_episodes: self.random_episodes,
            noise_prob: self.noise_prob,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub horizon: usize,
    pub x0_mode: InitialStateMode,
    pub conditional_dynamics: bool,
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            x0_mode: InitialStateMode::Film,
            conditional_dynamics: true,
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankerKind {
    /// Execute the first candidate.
    First,
    /// Highest predicted discounted return.
    Return,
    /// Smallest distance between the planned final position and the goal.
    Goal,
    /// Budget-aware selection over predicted return and cost.
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModels {
    /// Closed-form reward and cost of the task.
    Analytic,
    /// Small regressors fitted on the training dataset.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub kind: RankerKind,
    pub models: ScoreModels,
    pub candidates: usize,
    /// Normalized return the generator is conditioned on.
    pub return_scale: f64,
    /// Multiplier on the remaining budget used as the cost condition.
    pub cost_scale: f64,
    pub gamma: f64,
    /// Overrides the task's episode cost budget.
    pub budget: Option<f64>,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            kind: RankerKind::First,
            models: ScoreModels::Analytic,
            candidates: 1,
            return_scale: 1.0,
            cost_scale: 1.0,
            gamma: 1.0,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Actions executed from each plan before replanning.
    pub chunk: usize,
    /// Execute the first plan in full and never replan.
    pub open_loop: bool,
    /// Offset into the shipped evaluation seed list.
    pub seed_offset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 250,
            chunk: 4,
            open_loop: false,
            seed_offset: 0,
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub schedule: ScheduleParams,
    pub sampler: SamplerConfig,
    pub ranker: RankerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::double_integrator()
    }
}

impl ExperimentConfig {
    /// Presets train a width-32 network with a cosine-decayed learning rate,
    /// sized for 100k steps per model on one CPU core.
    fn base(env: EnvConfig, out: &str) -> Self {
        let mut model = ModelConfig::default();
        model.arch.width = 32;
        Self {
            seed: 0,
            out: PathBuf::from(out),
            env,
            dataset: DatasetConfig::default(),
            model,
            training: TrainConfig {
                lr: 1e-3,
                final_lr_fraction: 0.02,
                ..TrainConfig::default()
            },
            schedule: ScheduleParams::default(),
            sampler: SamplerConfig::default(),
            ranker: RankerConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn double_integrator() -> Self {
        Self::base(EnvConfig::DoubleIntegrator(LinearConfig::default()), "runs/double_integrator")
    }

    pub fn bicycle() -> Self {
        let mut c = Self::base(EnvConfig::Bicycle(BicycleSpec::default()), "runs/bicycle");
        c.dataset.episodes = 2000;
        c.dataset.random_episodes = 1000;
        c.dataset.noise_prob = 0.0;
        c.model.horizon = 64;
        c.ranker.kind = RankerKind::First;
        c.eval.open_loop = true;
        c.eval.chunk = 64;
        c
    }

    pub fn constrained() -> Self {
        let mut c = Self::base(EnvConfig::ConstrainedIntegrator(ConstrainedConfig::default()), "runs/constrained");
        c.ranker.kind = RankerKind::Budget;
        c.ranker.candidates = 16;
        c.eval.episodes = 100;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "double_integrator" => Ok(Self::double_integrator()),
            "bicycle" => Ok(Self::bicycle()),
            "constrained_integrator" => Ok(Self::constrained()),
            _ => Err(Error::Usage(format!("unknown preset {name:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        let env = crate::env::Env::new(&self.env)?;
        self.dataset.expert().validate()?;
        if !(self.dataset.dynamics_state_noise >= 0.0) {
            return Err(Error::Config("dynamics state noise must be non-negative".into()));
        }
        self.training.validate()?;
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        let h = self.model.horizon;
        if h == 0 || h > env.episode_steps() {
            return Err(Error::Config(format!("horizon {h} outside [1, {}]", env.episode_steps())));
        }
        if self.eval.chunk == 0 || self.eval.chunk > h {
            return Err(Error::Config(format!("action chunk {} outside [1, {h}]", self.eval.chunk)));
        }
        if self.ranker.candidates == 0 {
            return Err(Error::Config("need at least one candidate".into()));
        }
        if !(self.ranker.gamma > 0.0 && self.ranker.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.ranker.gamma)));
        }
        match self.ranker.kind {
            RankerKind::Budget if env.cost_dim() == 0 => {
                return Err(Error::Config(format!("budget-aware ranking needs a task with costs, {} has none", self.env.name())));
            }
            RankerKind::Return if matches!(self.env, EnvConfig::Bicycle(_)) => {
                return Err(Error::Config("the bicycle task has no reward to rank by".into()));
            }
            RankerKind::Goal if env.goal_dim() == 0 => {
                return Err(Error::Config("goal ranking needs a goal-conditioned task".into()));
            }
            _ => {}
        }
        if self.ranker.models == ScoreModels::Learned && matches!(self.env, EnvConfig::Bicycle(_)) {
            return Err(Error::Config("learned score models are only available for the integrator tasks".into()));
        }
        if let Some(b) = self.ranker.budget {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::Config(format!("budget {b} must be finite and non-negative")));
            }
        }
        if self.eval.seed_offset + self.eval.episodes > eval_seeds().len() {
            return Err(Error::Config(format!(
                "{} evaluation episodes from offset {} exceed the {} shipped seeds",
                self.eval.episodes,
                self.eval.seed_offset,
                eval_seeds().len()
            )));
        }
        Ok(())
    }

    /// Episode budget of the constrained task, after any override.
    pub fn budget(&self) -> Option<f64> {
        match &self.env {
            EnvConfig::ConstrainedIntegrator(c) => Some(self.ranker.budget.unwrap_or(c.budget)),
            _ => None,
        }
    }
}

/// Seeds of the evaluation episodes; episode `i` always uses entry `offset + i`.
pub fn eval_seeds() -> &'static [u64] {
    static SEEDS: std::sync::OnceLock<Vec<u64>> = std::sync::OnceLock::new();
    SEEDS.get_or_init(|| {
        include_str!("../../data/eval_seeds.txt")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse().expect("shipped seed list is valid"))
            .collect()
    })
}

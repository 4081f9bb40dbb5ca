use std::path::PathBuf;

use serde::Serialize;

use super::config::{DatasetConfig, ExperimentConfig, ModelConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::dataset::{BatchSampler, Dataset, DatasetMeta, Normalizer};
use crate::denoiser::{DenoiserParams, DenoiserSpec, Role, TrainConfig, Trainer};
use crate::env::{Env, EnvConfig};
use crate::error::Result;
use crate::hash::config_hash;
use crate::sampler::stream_rng;
use crate::schedule::ScheduleParams;

pub(crate) const DATA_STREAM: u64 = 1;
const PLANNER_STREAM: u64 = 2;
const DYNAMICS_STREAM: u64 = 3;
const STATE_NOISE_STREAM: u64 = 4;
pub(crate) const SCORE_STREAM: u64 = 5;

/// Expert dataset of the experiment, stored at `f32` precision exactly as
/// a save/load round trip would return it.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let env = Env::new(&cfg.env)?;
    let mut rng = stream_rng(cfg.seed, DATA_STREAM);
    Ok(env.generate_dataset(&cfg.dataset.expert(), cfg.seed, &mut rng)?.quantized())
}

pub fn denoiser_spec(cfg: &ExperimentConfig, meta: &DatasetMeta, role: Role) -> DenoiserSpec {
    DenoiserSpec {
        role,
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
        y_dim: meta.y_dim(),
        horizon: cfg.model.horizon,
        x0_mode: cfg.model.x0_mode,
        conditional: role == Role::Planner || cfg.model.conditional_dynamics,
        arch: cfg.model.arch,
    }
}

#[derive(Serialize)]
struct Recipe<'a> {
    role: Role,
    seed: u64,
    env: &'a EnvConfig,
    dataset: DatasetConfig,
    model: &'a ModelConfig,
    training: &'a TrainConfig,
    schedule: &'a ScheduleParams,
}

/// Hash of everything that determines the trained weights of `role`.
pub fn recipe_hash(cfg: &ExperimentConfig, role: Role) -> String {
    let mut dataset = cfg.dataset;
    let mut model = cfg.model;
    if role == Role::Planner {
        dataset.dynamics_state_noise = 0.0;
        model.conditional_dynamics = true;
    }
    config_hash(&Recipe {
        role,
        seed: cfg.seed,
        env: &cfg.env,
        dataset,
        model: &model,
        training: &cfg.training,
        schedule: &cfg.schedule,
    })
}

/// Trains one denoiser on `data`. The normalizer is always fitted on the
/// clean data so planner and dynamics share coordinates; the dynamics
/// model sees noisy states when the config asks for it.
pub fn train_denoiser(
    cfg: &ExperimentConfig,
    data: &Dataset,
    role: Role,
    progress: &mut dyn FnMut(u64, f64),
) -> Result<Checkpoint> {
    let norm = Normalizer::fit(data)?;
    let schedule = cfg.schedule.build()?;
    let stream = match role {
        Role::Planner => PLANNER_STREAM,
        Role::Dynamics => DYNAMICS_STREAM,
    };
    let mut rng = stream_rng(cfg.seed ^ cfg.training.seed.rotate_left(32), stream);
    let noisy;
    let train_data = if role == Role::Dynamics && cfg.dataset.dynamics_state_noise > 0.0 {
        noisy = data.with_state_noise(cfg.dataset.dynamics_state_noise, &mut stream_rng(cfg.seed, STATE_NOISE_STREAM))?;
        &noisy
    } else {
        data
    };
    let batches = BatchSampler::new(train_data, &norm, cfg.model.horizon)?;
    let spec = denoiser_spec(cfg, &data.meta, role);
    let mut trainer = Trainer::new(DenoiserParams::init(spec.clone(), &mut rng)?, cfg.training)?;
    for step in 0..cfg.training.steps {
        let batch = batches.sample(cfg.training.batch_size, &mut rng);
        let loss = trainer.training_step(&batch, &schedule, &mut rng)?;
        progress(step + 1, loss);
    }
    let ema = trainer.ema_params();
    Ok(Checkpoint {
        meta: CheckpointMeta {
            spec,
            schedule: cfg.schedule,
            normalizer: norm,
            target: data.meta.target,
            env: cfg.env.name().into(),
            config_hash: recipe_hash(cfg, role),
            train: cfg.training,
            steps_done: trainer.steps_done(),
        },
        params: trainer.params,
        ema,
    })
}

/// Progress callback that logs the running mean loss every `every` steps.
pub fn log_progress(role: Role, total: u64, every: u64) -> impl FnMut(u64, f64) {
    let mut acc = 0.0;
    let mut n = 0u64;
    move |step, loss| {
        acc += loss;
        n += 1;
        if step % every.max(1) == 0 || step == total {
            log::info!("{role} step {step}/{total} loss {:.5}", acc / n as f64);
            acc = 0.0;
            n = 0;
        }
    }
}

/// Planner and dynamics checkpoints for one experiment.
#[derive(Debug, Clone)]
pub struct Models {
    pub planner: Checkpoint,
    pub dynamics: Checkpoint,
}

/// Checkpoints cached under a directory by recipe hash, trained on demand.
#[derive(Debug)]
pub struct ModelStore {
    dir: PathBuf,
    data: Option<(String, Dataset)>,
}

impl ModelStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), data: None }
    }

    pub fn path(&self, cfg: &ExperimentConfig, role: Role) -> PathBuf {
        self.dir.join(format!("{role}-{}.ckpt", &recipe_hash(cfg, role)[..16]))
    }

    fn dataset(&mut self, cfg: &ExperimentConfig) -> Result<&Dataset> {
        let key = config_hash(&(cfg.seed, &cfg.env, cfg.dataset.expert()));
        if self.data.as_ref().is_none_or(|(k, _)| *k != key) {
            self.data = Some((key, build_dataset(cfg)?));
        }
        Ok(&self.data.as_ref().expect("just built").1)
    }

    pub fn get(&mut self, cfg: &ExperimentConfig, role: Role) -> Result<Checkpoint> {
        let path = self.path(cfg, role);
        if path.exists() {
            let ck = load_checkpoint(&path)?;
            if ck.meta.config_hash == recipe_hash(cfg, role) {
                return Ok(ck);
            }
            log::warn!("{} holds a different recipe; retraining", path.display());
        }
        let steps = cfg.training.steps;
        let data = self.dataset(cfg)?;
        log::info!("training {role} for {} ({} steps)", cfg.env.name(), steps);
        let ck = train_denoiser(cfg, data, role, &mut log_progress(role, steps, (steps / 10).max(1)))?;
        std::fs::create_dir_all(&self.dir)?;
        save_checkpoint(&ck.meta, &ck.params, &ck.ema, &path)?;
        Ok(ck)
    }

    pub fn models(&mut self, cfg: &ExperimentConfig) -> Result<Models> {
        Ok(Models {
            planner: self.get(cfg, Role::Planner)?,
            dynamics: self.get(cfg, Role::Dynamics)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::double_integrator();
        c.dataset.episodes = 8;
        c.model.horizon = 8;
        c.model.arch = ArchConfig {
            width: 8,
            blocks: 1,
            kernel: 3,
            groups: 2,
            level_dim: 4,
            embed_dim: 8,
            positions: 2,
        };
        c.training.steps = 3;
        c.training.batch_size = 4;
        c.schedule = ScheduleParams::default_for_steps(5);
        c
    }

    #[test]
    fn recipe_hash_separates_roles_and_ignores_planner_irrelevant_knobs() {
        let c = tiny();
        assert_ne!(recipe_hash(&c, Role::Planner), recipe_hash(&c, Role::Dynamics));
        let mut d = c.clone();
        d.dataset.dynamics_state_noise = 0.01;
        d.sampler.omega = 2.0;
        assert_eq!(recipe_hash(&c, Role::Planner), recipe_hash(&d, Role::Planner));
        assert_ne!(recipe_hash(&c, Role::Dynamics), recipe_hash(&d, Role::Dynamics));
    }

    #[test]
    fn training_is_reproducible_and_cached() {
        let c = tiny();
        let data = build_dataset(&c).unwrap();
        let a = train_denoiser(&c, &data, Role::Dynamics, &mut |_, _| {}).unwrap();
        let b = train_denoiser(&c, &data, Role::Dynamics, &mut |_, _| {}).unwrap();
        assert_eq!(a.params.weights, b.params.weights);
        assert_eq!(a.meta.steps_done, 3);

        let dir = tempfile::tempdir().unwrap();
        let mut store = ModelStore::new(dir.path());
        let m = store.models(&c).unwrap();
        assert!(store.path(&c, Role::Planner).exists());
        let again = ModelStore::new(dir.path()).get(&c, Role::Dynamics).unwrap();
        assert_eq!(again.ema.weights, m.dynamics.ema.weights);
    }
}

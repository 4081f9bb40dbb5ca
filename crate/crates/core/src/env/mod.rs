//! Synthetic control tasks, their experts and dataset generators.

pub mod bicycle;
pub mod linear;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, TaskTarget, Trajectory};
use crate::error::{Error, Result};
use crate::hash::config_hash;

pub use bicycle::{BicycleSpec, PurePursuit, UReference};
pub use linear::{LinearConfig, LinearSystem, Lqr};

/// Double integrator with a velocity limit; each step whose starting
/// velocity exceeds the limit costs 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstrainedConfig {
    pub linear: LinearConfig,
    pub v_max: f64,
    /// Episode cost budget.
    pub budget: f64,
}

impl Default for ConstrainedConfig {
    fn default() -> Self {
        Self {
            linear: LinearConfig {
                steps: 32,
                ..LinearConfig::default()
            },
            v_max: 0.8,
            budget: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    DoubleIntegrator(LinearConfig),
    Bicycle(BicycleSpec),
    ConstrainedIntegrator(ConstrainedConfig),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::DoubleIntegrator(_) => "double_integrator",
            EnvConfig::Bicycle(_) => "bicycle",
            EnvConfig::ConstrainedIntegrator(_) => "constrained_integrator",
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Knobs of the expert dataset generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub episodes: usize,
    /// Extra uniform-random-action episodes (bicycle only).
    pub random_episodes: usize,
    pub noise_prob: f64,
    pub noise_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            random_episodes: 0,
            noise_prob: 0.1,
            noise_std: 0.25,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config(format!("noise probability {} outside [0, 1]", self.noise_prob)));
        }
        if self.noise_prob > 0.0 && !(self.noise_std > 0.0) {
            return Err(Error::Config("noise std must be positive when noise is enabled".into()));
        }
        Ok(())
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next: Vec<f64>,
    pub reward: f64,
    pub cost: Vec<f64>,
}

/// An instantiated task with any precomputed controller data.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    linear: Option<(LinearSystem, Lqr)>,
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        let linear = match cfg {
            EnvConfig::DoubleIntegrator(l) | EnvConfig::ConstrainedIntegrator(ConstrainedConfig { linear: l, .. }) => {
                if !(l.dt > 0.0 && l.q > 0.0 && l.r > 0.0 && l.init_box > 0.0) || l.steps == 0 {
                    return Err(Error::Config(format!("invalid linear system parameters {l:?}")));
                }
                let sys = LinearSystem::double_integrator(l);
                let lqr = linear::solve_dare(&sys)?;
                Some((sys, lqr))
            }
            EnvConfig::Bicycle(b) => {
                if !(b.dt > 0.0 && b.wheelbase > 0.0 && b.steer_max > 0.0 && b.speed_max > 0.0) || b.steps == 0 {
                    return Err(Error::Config(format!("invalid bicycle parameters {b:?}")));
                }
                None
            }
        };
        if let EnvConfig::ConstrainedIntegrator(c) = cfg {
            if !(c.v_max > 0.0 && c.budget >= 0.0) {
                return Err(Error::Config("velocity limit must be positive and budget non-negative".into()));
            }
        }
        Ok(Self { cfg: cfg.clone(), linear })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn linear(&self) -> Option<(&LinearSystem, &Lqr)> {
        self.linear.as_ref().map(|(s, l)| (s, l))
    }

    pub fn state_dim(&self) -> usize {
        match self.cfg {
            EnvConfig::Bicycle(_) => 5,
            _ => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.cfg {
            EnvConfig::Bicycle(_) => 2,
            _ => 1,
        }
    }

    pub fn cost_dim(&self) -> usize {
        match self.cfg {
            EnvConfig::ConstrainedIntegrator(_) => 1,
            _ => 0,
        }
    }

    pub fn goal_dim(&self) -> usize {
        match self.cfg {
            EnvConfig::DoubleIntegrator(_) => 2,
            EnvConfig::Bicycle(_) => 2,
            EnvConfig::ConstrainedIntegrator(_) => 0,
        }
    }

    pub fn target(&self) -> TaskTarget {
        match self.cfg {
            EnvConfig::ConstrainedIntegrator(_) => TaskTarget::ReturnCost,
            _ => TaskTarget::Goal,
        }
    }

    pub fn episode_steps(&self) -> usize {
        match &self.cfg {
            EnvConfig::DoubleIntegrator(l) => l.steps,
            EnvConfig::Bicycle(b) => b.steps,
            EnvConfig::ConstrainedIntegrator(c) => c.linear.steps,
        }
    }

    /// Deterministic transition.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Step {
        match &self.cfg {
            EnvConfig::Bicycle(b) => Step {
                next: b.step(x, u),
                reward: 0.0,
                cost: vec![],
            },
            EnvConfig::DoubleIntegrator(_) => {
                let (next, reward) = self.sys().step(x, u);
                Step { next, reward, cost: vec![] }
            }
            EnvConfig::ConstrainedIntegrator(c) => {
                let (next, reward) = self.sys().step(x, u);
                Step {
                    next,
                    reward,
                    cost: vec![velocity_cost(x, c.v_max)],
                }
            }
        }
    }

    fn sys(&self) -> &LinearSystem {
        &self.linear.as_ref().expect("linear task").0
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.cfg {
            EnvConfig::DoubleIntegrator(l) => {
                vec![rng.random_range(-l.init_box..=l.init_box), rng.random_range(-l.init_box..=l.init_box)]
            }
            EnvConfig::ConstrainedIntegrator(c) => {
                let b = c.linear.init_box;
                vec![rng.random_range(-b..=b), rng.random_range(-0.5 * c.v_max..=0.5 * c.v_max)]
            }
            EnvConfig::Bicycle(b) => bicycle::sample_u_reference(b, rng).0,
        }
    }

    /// Rolls out `actions` open-loop from `x0`.
    pub fn simulate(&self, x0: &[f64], actions: &[f64]) -> Trajectory {
        let mut traj = Trajectory {
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            cost_dim: self.cost_dim(),
            states: x0.to_vec(),
            actions: actions.to_vec(),
            rewards: Vec::new(),
            costs: Vec::new(),
            goal: Vec::new(),
        };
        let mut x = x0.to_vec();
        for u in actions.chunks_exact(self.action_dim()) {
            let s = self.step(&x, u);
            traj.rewards.push(s.reward);
            traj.costs.extend_from_slice(&s.cost);
            traj.states.extend_from_slice(&s.next);
            x = s.next;
        }
        traj.goal = x[..self.goal_dim()].to_vec();
        traj
    }

    fn meta(&self, seed: u64) -> DatasetMeta {
        let mut notes = Vec::new();
        match &self.cfg {
            EnvConfig::Bicycle(b) => {
                notes.push(("reference".into(), "u-shaped three-waypoint path, start at rest".into()));
                notes.push(("workspace".into(), format!("[-{0}, {0}]^2", b.workspace)));
                notes.push(("wheelbase".into(), b.wheelbase.to_string()));
            }
            EnvConfig::DoubleIntegrator(l) => {
                notes.push(("initial_state".into(), format!("uniform [-{0}, {0}]^2", l.init_box)));
            }
            EnvConfig::ConstrainedIntegrator(c) => {
                notes.push(("initial_state".into(), format!("position uniform [-{0}, {0}], velocity uniform [-{1}, {1}]", c.linear.init_box, 0.5 * c.v_max)));
            }
        }
        DatasetMeta {
            env: self.cfg.name().into(),
            env_hash: self.cfg.hash(),
            seed,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            cost_dim: self.cost_dim(),
            goal_dim: self.goal_dim(),
            target: self.target(),
            notes,
        }
    }

    /// Expert dataset for this task. `seed` is recorded in the header only;
    /// all randomness comes from `rng`.
    pub fn generate_dataset<R: Rng + ?Sized>(&self, cfg: &ExpertConfig, seed: u64, rng: &mut R) -> Result<Dataset> {
        cfg.validate()?;
        let steps = self.episode_steps();
        let mut episodes = Vec::with_capacity(cfg.episodes + cfg.random_episodes);
        match &self.cfg {
            EnvConfig::DoubleIntegrator(_) => {
                let (sys, lqr) = self.linear().expect("linear task");
                for _ in 0..cfg.episodes {
                    let x0 = self.sample_initial_state(rng);
                    let r = linear::noisy_lqr_rollout(sys, lqr, &x0, steps, cfg.noise_prob, cfg.noise_std, rng);
                    episodes.push(self.simulate(&x0, &r.actions));
                }
            }
            EnvConfig::Bicycle(b) => {
                for _ in 0..cfg.episodes {
                    let (x0, path) = bicycle::sample_u_reference(b, rng);
                    episodes.push(self.simulate(&x0, &bicycle_expert_actions(b, &x0, &path)));
                }
                for _ in 0..cfg.random_episodes {
                    let (x0, _) = bicycle::sample_u_reference(b, rng);
                    let actions: Vec<f64> = (0..steps)
                        .flat_map(|_| {
                            [
                                rng.random_range(-b.accel_max..=b.accel_max),
                                rng.random_range(-b.steer_rate_max..=b.steer_rate_max),
                            ]
                        })
                        .collect();
                    episodes.push(self.simulate(&x0, &actions));
                }
            }
            EnvConfig::ConstrainedIntegrator(c) => {
                let (sys, _) = self.linear().expect("linear task");
                let gains = constrained_expert_gains(sys)?;
                for _ in 0..cfg.episodes {
                    let x0 = self.sample_initial_state(rng);
                    let expert = if rng.random::<bool>() {
                        ConstrainedExpert::Lqr(gains[rng.random_range(0..gains.len())].clone())
                    } else {
                        ConstrainedExpert::Capped {
                            v_cap: c.v_max * rng.random_range(0.5..1.3),
                        }
                    };
                    let mut x = x0.clone();
                    let mut actions = Vec::with_capacity(steps);
                    for _ in 0..steps {
                        let mut u = expert.control(&x);
                        if cfg.noise_prob > 0.0 && rng.random::<f64>() < cfg.noise_prob {
                            u += cfg.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                        }
                        actions.push(u);
                        x = sys.next_state(&x, &[u]);
                    }
                    episodes.push(self.simulate(&x0, &actions));
                }
            }
        }
        Dataset::new(self.meta(seed), episodes)
    }
}

pub fn velocity_cost(x: &[f64], v_max: f64) -> f64 {
    if x[1].abs() > v_max {
        1.0
    } else {
        0.0
    }
}

/// Actions of the pure-pursuit expert along `path` for one episode.
pub fn bicycle_expert_actions(spec: &BicycleSpec, x0: &[f64], path: &UReference) -> Vec<f64> {
    let ctl = PurePursuit::for_reference(spec, path);
    let mut x = x0.to_vec();
    let mut progress = 0.0;
    let mut actions = Vec::with_capacity(2 * spec.steps);
    for _ in 0..spec.steps {
        let (u, s) = ctl.control(spec, path, &x, progress);
        progress = s;
        actions.extend_from_slice(&u);
        x = spec.step(&x, &u);
    }
    actions
}

/// LQR gains for a log-spaced family of input weights; the aggressive end
/// violates the velocity limit, the conservative end does not.
fn constrained_expert_gains(sys: &LinearSystem) -> Result<Vec<Lqr>> {
    (0..9)
        .map(|i| {
            let mut s = sys.clone();
            s.r *= 10f64.powf(-1.0 + 0.25 * i as f64);
            linear::solve_dare(&s)
        })
        .collect()
}

enum ConstrainedExpert {
    Lqr(Lqr),
    /// Tracks a velocity setpoint proportional to position error, saturated at `v_cap`.
    Capped { v_cap: f64 },
}

impl ConstrainedExpert {
    fn control(&self, x: &[f64]) -> f64 {
        match self {
            ConstrainedExpert::Lqr(l) => l.control(x)[0],
            ConstrainedExpert::Capped { v_cap } => {
                let v_ref = (-1.5 * x[0]).clamp(-v_cap, *v_cap);
                4.0 * (v_ref - x[1])
            }
        }
    }
}

/// Per-step distance between diffused states `x_{1:H}` and the states
/// reached by executing the diffused actions open-loop from `x0`.
pub fn dynamics_consistency(env: &Env, x0: &[f64], states: &[f64], actions: &[f64]) -> Vec<f64> {
    let sd = env.state_dim();
    let sim = env.simulate(x0, actions);
    states
        .chunks_exact(sd)
        .enumerate()
        .map(|(t, s)| {
            sim.state(t + 1)
                .iter()
                .zip(s)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn own_rollouts_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            EnvConfig::DoubleIntegrator(LinearConfig::default()),
            EnvConfig::Bicycle(BicycleSpec::default()),
            EnvConfig::ConstrainedIntegrator(ConstrainedConfig::default()),
        ] {
            let env = Env::new(&cfg).unwrap();
            let data = env
                .generate_dataset(
                    &ExpertConfig {
                        episodes: 3,
                        random_episodes: 1,
                        ..Default::default()
                    },
                    0,
                    &mut rng,
                )
                .unwrap();
            for e in &data.episodes {
                let h = e.steps();
                let prof = dynamics_consistency(&env, e.state(0), &e.states[env.state_dim()..], &e.actions);
                assert_eq!(prof.len(), h);
                assert!(prof.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn constant_shift_gives_constant_profile() {
        let env = Env::new(&EnvConfig::DoubleIntegrator(LinearConfig::default())).unwrap();
        let x0 = [0.7, -0.2];
        let sim = env.simulate(&x0, &[0.0; 10]);
        let shifted: Vec<f64> = sim.states[2..].iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.03 } else { 0.0 }).collect();
        let prof = dynamics_consistency(&env, &x0, &shifted, &[0.0; 10]);
        assert!(prof.iter().all(|v| (v - 0.03).abs() < 1e-12));
    }

    #[test]
    fn velocity_cost_counts_exceedances() {
        let cfg = ConstrainedConfig::default();
        let env = Env::new(&EnvConfig::ConstrainedIntegrator(cfg)).unwrap();
        let traj = env.simulate(&[0.0, 0.0], &[3.0; 20]);
        let recount = (0..20).filter(|t| traj.state(*t)[1].abs() > cfg.v_max).count() as f64;
        assert_eq!(traj.costs.iter().sum::<f64>(), recount);
        assert!(recount > 0.0);
    }

    #[test]
    fn env_hash_tracks_config() {
        let a = EnvConfig::DoubleIntegrator(LinearConfig::default());
        let b = EnvConfig::DoubleIntegrator(LinearConfig {
            r: 0.2,
            ..LinearConfig::default()
        });
        assert_ne!(a.hash(), b.hash());
    }
}

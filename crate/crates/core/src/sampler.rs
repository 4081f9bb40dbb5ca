//! Reverse-diffusion samplers over batches of candidate trajectories.
//!
//! All samplers work in normalized coordinates on the diffused blocks of the
//! planner layout: `[batch, H, state_dim]` states and `[batch, H, action_dim]`
//! actions. Every batch element owns an RNG stream, so results do not depend
//! on how candidates are grouped into batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::denoiser::{Conditioning, DenoiserParams, DenoiserSpec, InitialStateMode, Role};
use crate::error::{Error, Result};
use crate::schedule::{cfg_combine, NoiseSchedule};

/// Anything that predicts diffusion noise in the layout of [`DenoiserParams::predict_batch`].
pub trait NoisePredictor {
    fn spec(&self) -> &DenoiserSpec;

    fn predict(&self, states: &[f64], actions: &[f64], levels: &[usize], conds: &[Conditioning], use_null: bool) -> Result<Vec<f64>>;
}

impl NoisePredictor for DenoiserParams {
    fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    fn predict(&self, states: &[f64], actions: &[f64], levels: &[usize], conds: &[Conditioning], use_null: bool) -> Result<Vec<f64>> {
        self.predict_batch(states, actions, levels, conds, use_null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Dynamics refinement of the states, then a joint planner step, at every level.
    Alternating,
    PlannerOnly,
    /// One step per level with a convex blend of planner and dynamics noise on the states.
    CombinedScore,
    /// Planner-only sampling of a model that pins the initial state by inpainting.
    JointBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Guidance scale.
    pub omega: f64,
    /// Scales the initial noise variance and every per-step variance.
    pub temperature: f64,
    /// Tilt `lambda >= 0` of the combined-score mode; the blend weight is `lambda / (1 + lambda)`.
    pub tilt: f64,
    /// Reverse steps used when replanning from a previous plan; values at or
    /// above the effective step count mean fresh sampling.
    pub warm_start_steps: usize,
    /// Number of reverse steps actually taken (uniform stride over the trained levels).
    pub steps: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Alternating,
            omega: 1.0,
            temperature: 1.0,
            tilt: 1.0,
            warm_start_steps: 10,
            steps: None,
        }
    }
}

impl SamplerConfig {
    pub fn blend_weight(&self) -> Result<f64> {
        let w = if self.tilt.is_infinite() && self.tilt > 0.0 {
            1.0
        } else {
            self.tilt / (1.0 + self.tilt)
        };
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!("tilt {} gives blend weight {w} outside [0, 1]", self.tilt)));
        }
        Ok(w)
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        if self.mode == SamplerMode::CombinedScore {
            self.blend_weight()?;
        }
        let k = self.effective_steps(schedule);
        if k == 0 || k > schedule.num_steps() {
            return Err(Error::Config(format!("effective steps {k} outside [1, {}]", schedule.num_steps())));
        }
        Ok(())
    }

    pub fn effective_steps(&self, schedule: &NoiseSchedule) -> usize {
        self.steps.unwrap_or(schedule.num_steps())
    }

    fn uses_dynamics(&self) -> bool {
        match self.mode {
            SamplerMode::Alternating => true,
            SamplerMode::CombinedScore => self.tilt > 0.0,
            _ => false,
        }
    }
}

/// Trained levels visited by a chain of `steps` reverse steps, highest first,
/// ending with `0`.
pub fn level_sequence(total: usize, steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=steps).rev().map(|i| (i * total + steps / 2) / steps).collect();
    out.dedup();
    out
}

/// Reverse-step coefficients from level `t` to level `s < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct StepCoef {
    inv_sqrt_alpha: f64,
    eps_coef: f64,
    var: f64,
}

fn step_coef(schedule: &NoiseSchedule, t: usize, s: usize) -> StepCoef {
    let (at, as_) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let alpha = at / as_;
    let beta = 1.0 - alpha;
    StepCoef {
        inv_sqrt_alpha: 1.0 / alpha.sqrt(),
        eps_coef: beta / (1.0 - at).sqrt(),
        var: if s == 0 { 0.0 } else { beta * (1.0 - as_) / (1.0 - at) },
    }
}

/// Denoiser calls per guidance pathway for one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCount {
    pub planner: u64,
    pub dynamics: u64,
}

impl EvalCount {
    pub fn total(&self) -> u64 {
        self.planner + self.dynamics
    }
}

impl std::ops::AddAssign for EvalCount {
    fn add_assign(&mut self, o: Self) {
        self.planner += o.planner;
        self.dynamics += o.dynamics;
    }
}

/// A batch of plans in normalized, diffused-block coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanBatch {
    pub batch: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub x0_mode: InitialStateMode,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

/// One plan in environment units: states `x_{1:H}`, actions `u_{0:H-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

impl PlanBatch {
    pub fn states_of(&self, b: usize) -> &[f64] {
        let n = self.horizon * self.state_dim;
        &self.states[b * n..(b + 1) * n]
    }

    pub fn actions_of(&self, b: usize) -> &[f64] {
        let n = self.horizon * self.action_dim;
        &self.actions[b * n..(b + 1) * n]
    }

    /// Plan `b` in environment units. In inpainting layout the block holds
    /// `x_{0:H-1}`; the missing `x_H` repeats `x_{H-1}`.
    pub fn plan(&self, b: usize, norm: &Normalizer) -> Plan {
        let sd = self.state_dim;
        let mut states = self.states_of(b).to_vec();
        if self.x0_mode == InitialStateMode::Inpaint {
            states.drain(..sd);
            let last = states[states.len() - sd..].to_vec();
            states.extend(last);
        }
        norm.denormalize_states(&mut states);
        let mut actions = self.actions_of(b).to_vec();
        norm.denormalize_actions(&mut actions);
        Plan { states, actions }
    }

    /// Drops the first `executed` steps of every plan and repeats the final
    /// state and action to refill the horizon.
    pub fn shifted(&self, executed: usize) -> Self {
        let mut out = self.clone();
        let shift = |v: &mut [f64], d: usize, h: usize| {
            let e = executed.min(h - 1);
            for row in v.chunks_exact_mut(h * d) {
                row.copy_within(e * d.., 0);
                let last = row[(h - 1 - e) * d..(h - e) * d].to_vec();
                for t in h - e..h {
                    row[t * d..(t + 1) * d].copy_from_slice(&last);
                }
            }
        };
        shift(&mut out.states, self.state_dim, self.horizon);
        shift(&mut out.actions, self.action_dim, self.horizon);
        out
    }
}

/// Output of one sampler call.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub plans: PlanBatch,
    /// Per trajectory; identical across the batch.
    pub evals: EvalCount,
}

/// Independent, reproducible RNG stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_pair(planner: &DenoiserSpec, dynamics: &DenoiserSpec) -> Result<()> {
    if dynamics.role != Role::Dynamics {
        return Err(Error::Config(format!("dynamics slot holds a {} model", dynamics.role)));
    }
    let same = planner.horizon == dynamics.horizon
        && planner.state_dim == dynamics.state_dim
        && planner.action_dim == dynamics.action_dim
        && planner.x0_mode == dynamics.x0_mode;
    if !same {
        return Err(Error::Config(format!(
            "incompatible denoisers: planner (H={}, state={}, action={}, {:?}) vs dynamics (H={}, state={}, action={}, {:?})",
            planner.horizon,
            planner.state_dim,
            planner.action_dim,
            planner.x0_mode,
            dynamics.horizon,
            dynamics.state_dim,
            dynamics.action_dim,
            dynamics.x0_mode
        )));
    }
    Ok(())
}

/// Drives the reverse chain for a batch of candidates.
pub struct Sampler<'a> {
    pub planner: &'a dyn NoisePredictor,
    pub dynamics: Option<&'a dyn NoisePredictor>,
    pub schedule: &'a NoiseSchedule,
    pub config: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        planner: &'a dyn NoisePredictor,
        dynamics: Option<&'a dyn NoisePredictor>,
        schedule: &'a NoiseSchedule,
        config: SamplerConfig,
    ) -> Result<Self> {
        config.validate(schedule)?;
        let ps = planner.spec();
        if ps.role != Role::Planner {
            return Err(Error::Config(format!("planner slot holds a {} model", ps.role)));
        }
        if config.mode == SamplerMode::JointBaseline && ps.x0_mode != InitialStateMode::Inpaint {
            return Err(Error::Config("joint baseline needs an inpainting planner".into()));
        }
        if config.uses_dynamics() {
            let d = dynamics.ok_or_else(|| Error::Config(format!("{:?} sampling needs a dynamics model", config.mode)))?;
            check_pair(ps, d.spec())?;
        }
        Ok(Self {
            planner,
            dynamics,
            schedule,
            config,
        })
    }

    fn spec(&self) -> &DenoiserSpec {
        self.planner.spec()
    }

    fn empty_batch(&self, batch: usize) -> PlanBatch {
        let s = self.spec();
        PlanBatch {
            batch,
            horizon: s.horizon,
            state_dim: s.state_dim,
            action_dim: s.action_dim,
            x0_mode: s.x0_mode,
            states: vec![0.0; batch * s.horizon * s.state_dim],
            actions: vec![0.0; batch * s.horizon * s.action_dim],
        }
    }

    /// Fresh samples from tempered Gaussian noise; one RNG per candidate.
    pub fn sample(&self, conds: &[Conditioning], rngs: &mut [ChaCha8Rng]) -> Result<SampleOutput> {
        if conds.len() != rngs.len() {
            return Err(Error::mismatch("RNG stream count", conds.len(), rngs.len()));
        }
        let mut plans = self.empty_batch(conds.len());
        let std = self.config.temperature.sqrt();
        let (ns, na) = (plans.horizon * plans.state_dim, plans.horizon * plans.action_dim);
        for (b, rng) in rngs.iter_mut().enumerate() {
            for v in &mut plans.states[b * ns..(b + 1) * ns] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut plans.actions[b * na..(b + 1) * na] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let levels = level_sequence(self.schedule.num_steps(), self.config.effective_steps(self.schedule));
        let evals = self.run_chain(&mut plans, &levels, conds, rngs)?;
        Ok(SampleOutput { plans, evals })
    }

    /// Replans from `previous` after `executed` environment steps: shift,
    /// forward-noise to the level `warm_start_steps` reverse steps above clean
    /// data, then run those reverse steps. Using all steps is fresh sampling.
    pub fn warm_start(
        &self,
        previous: &PlanBatch,
        executed: usize,
        conds: &[Conditioning],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<SampleOutput> {
        let k_eff = self.config.effective_steps(self.schedule);
        let j = self.config.warm_start_steps;
        if j >= k_eff {
            return self.sample(conds, rngs);
        }
        if previous.batch != conds.len() || conds.len() != rngs.len() {
            return Err(Error::mismatch("warm-start batch", previous.batch, conds.len()));
        }
        let mut plans = previous.shifted(executed);
        if j == 0 {
            return Ok(SampleOutput {
                plans,
                evals: EvalCount::default(),
            });
        }
        let full = level_sequence(self.schedule.num_steps(), k_eff);
        let levels = full[full.len() - 1 - j..].to_vec();
        let ab = self.schedule.alpha_bar(levels[0]);
        let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (ns, na) = (plans.horizon * plans.state_dim, plans.horizon * plans.action_dim);
        for (b, rng) in rngs.iter_mut().enumerate() {
            for v in &mut plans.states[b * ns..(b + 1) * ns] {
                *v = ca * *v + cb * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut plans.actions[b * na..(b + 1) * na] {
                *v = ca * *v + cb * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let evals = self.run_chain(&mut plans, &levels, conds, rngs)?;
        Ok(SampleOutput { plans, evals })
    }

    fn pin_initial_state(&self, plans: &mut PlanBatch, conds: &[Conditioning]) {
        if plans.x0_mode != InitialStateMode::Inpaint {
            return;
        }
        let sd = plans.state_dim;
        let n = plans.horizon * sd;
        for (b, c) in conds.iter().enumerate() {
            plans.states[b * n..b * n + sd].copy_from_slice(&c.x0);
        }
    }

    fn guided(&self, model: &dyn NoisePredictor, states: &[f64], actions: &[f64], levels: &[usize], conds: &[Conditioning]) -> Result<Vec<f64>> {
        let cond = model.predict(states, actions, levels, conds, false)?;
        if self.config.omega == 1.0 || !model.spec().conditional {
            return Ok(cond);
        }
        let uncond = model.predict(states, actions, levels, conds, true)?;
        Ok(cfg_combine(&cond, &uncond, self.config.omega))
    }

    fn run_chain(&self, plans: &mut PlanBatch, levels: &[usize], conds: &[Conditioning], rngs: &mut [ChaCha8Rng]) -> Result<EvalCount> {
        let (h, sd, ad) = (plans.horizon, plans.state_dim, plans.action_dim);
        let io = sd + ad;
        let batch = plans.batch;
        let weight = match self.config.mode {
            SamplerMode::CombinedScore => self.config.blend_weight()?,
            _ => 0.0,
        };
        let mut evals = EvalCount::default();
        self.pin_initial_state(plans, conds);
        for pair in levels.windows(2) {
            let (k, s) = (pair[0], pair[1]);
            let c = step_coef(self.schedule, k, s);
            let lv = vec![k; batch];
            if self.config.mode == SamplerMode::Alternating {
                let dyn_model = self.dynamics.expect("checked at construction");
                let eps_x = self.guided(dyn_model, &plans.states, &plans.actions, &lv, conds)?;
                evals.dynamics += 1;
                for (x, e) in plans.states.iter_mut().zip(&eps_x) {
                    *x = (*x - c.eps_coef * e) * c.inv_sqrt_alpha;
                }
                self.pin_initial_state(plans, conds);
            }
            let mut eps = self.guided(self.planner, &plans.states, &plans.actions, &lv, conds)?;
            evals.planner += 1;
            if self.config.mode == SamplerMode::CombinedScore && weight > 0.0 {
                let dyn_model = self.dynamics.expect("checked at construction");
                let eps_x = self.guided(dyn_model, &plans.states, &plans.actions, &lv, conds)?;
                evals.dynamics += 1;
                for (row, ex) in eps.chunks_exact_mut(io).zip(eps_x.chunks_exact(sd)) {
                    for i in 0..sd {
                        row[i] = (1.0 - weight) * row[i] + weight * ex[i];
                    }
                }
            }
            let std = (self.config.temperature * c.var).sqrt();
            let (ns, na) = (h * sd, h * ad);
            for (b, rng) in rngs.iter_mut().enumerate() {
                let xs = &mut plans.states[b * ns..(b + 1) * ns];
                let us = &mut plans.actions[b * na..(b + 1) * na];
                for t in 0..h {
                    let row = &eps[(b * h + t) * io..(b * h + t + 1) * io];
                    for i in 0..sd {
                        let x = &mut xs[t * sd + i];
                        *x = (*x - c.eps_coef * row[i]) * c.inv_sqrt_alpha;
                    }
                    for i in 0..ad {
                        let u = &mut us[t * ad + i];
                        *u = (*u - c.eps_coef * row[sd + i]) * c.inv_sqrt_alpha;
                    }
                }
                if std > 0.0 {
                    for v in xs.iter_mut().chain(us.iter_mut()) {
                        *v += std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            self.pin_initial_state(plans, conds);
        }
        Ok(evals)
    }
}

/// Normalized conditioning for a raw initial state and a normalized task vector.
pub fn conditioning(norm: &Normalizer, x0: &[f64], y: Vec<f64>) -> Conditioning {
    let mut x = x0.to_vec();
    norm.normalize_states(&mut x);
    Conditioning::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::schedule::ScheduleParams;

    /// Predicts the exact noise that maps a fixed clean trajectory to the input.
    struct Oracle {
        spec: DenoiserSpec,
        schedule: NoiseSchedule,
        clean_x: Vec<f64>,
        clean_u: Vec<f64>,
    }

    impl NoisePredictor for Oracle {
        fn spec(&self) -> &DenoiserSpec {
            &self.spec
        }

        fn predict(&self, states: &[f64], actions: &[f64], levels: &[usize], _c: &[Conditioning], _n: bool) -> Result<Vec<f64>> {
            let (h, sd, ad) = (self.spec.horizon, self.spec.state_dim, self.spec.action_dim);
            let od = self.spec.out_dim();
            let mut out = Vec::new();
            for (b, k) in levels.iter().enumerate() {
                let ab = self.schedule.alpha_bar(*k);
                for t in 0..h {
                    for i in 0..sd {
                        let v = states[(b * h + t) * sd + i];
                        out.push((v - ab.sqrt() * self.clean_x[t * sd + i]) / (1.0 - ab).sqrt());
                    }
                    if od > sd {
                        for i in 0..ad {
                            let v = actions[(b * h + t) * ad + i];
                            out.push((v - ab.sqrt() * self.clean_u[t * ad + i]) / (1.0 - ab).sqrt());
                        }
                    }
                }
            }
            Ok(out)
        }
    }

    fn spec(role: Role) -> DenoiserSpec {
        DenoiserSpec {
            role,
            state_dim: 2,
            action_dim: 1,
            y_dim: 1,
            horizon: 4,
            x0_mode: InitialStateMode::Film,
            conditional: true,
            arch: ArchConfig {
                width: 4,
                blocks: 1,
                kernel: 3,
                groups: 2,
                level_dim: 4,
                embed_dim: 4,
                positions: 2,
            },
        }
    }

    fn oracle(role: Role, schedule: &NoiseSchedule, shift: f64) -> Oracle {
        Oracle {
            spec: spec(role),
            schedule: schedule.clone(),
            clean_x: (0..8).map(|i| i as f64 * 0.1 + shift).collect(),
            clean_u: (0..4).map(|i| -(i as f64) * 0.2).collect(),
        }
    }

    fn conds(n: usize) -> Vec<Conditioning> {
        (0..n).map(|_| Conditioning::new(vec![0.0, 0.0], vec![0.5])).collect()
    }

    fn rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
        (0..n as u64).map(|i| stream_rng(seed, i)).collect()
    }

    #[test]
    fn exact_stubs_recover_clean_trajectory() {
        let sched = ScheduleParams {
            kind: crate::schedule::ScheduleKind::Linear,
            steps: 1,
            beta_min: 0.5,
            beta_max: 0.5,
        }
        .build()
        .unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.0);
        let s = Sampler::new(&pl, Some(&dy), &sched, SamplerConfig::default()).unwrap();
        let out = s.sample(&conds(3), &mut rngs(1, 3)).unwrap();
        for b in 0..3 {
            for (a, e) in out.plans.states_of(b).iter().zip(&pl.clean_x) {
                assert!((a - e).abs() < 1e-6);
            }
            for (a, e) in out.plans.actions_of(b).iter().zip(&pl.clean_u) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn evaluation_counts() {
        let sched = ScheduleParams::default_for_steps(12).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.0);
        for (mode, p, d) in [
            (SamplerMode::Alternating, 12, 12),
            (SamplerMode::PlannerOnly, 12, 0),
            (SamplerMode::CombinedScore, 12, 12),
        ] {
            let cfg = SamplerConfig { mode, ..Default::default() };
            let s = Sampler::new(&pl, Some(&dy), &sched, cfg).unwrap();
            let out = s.sample(&conds(2), &mut rngs(1, 2)).unwrap();
            assert_eq!(out.evals, EvalCount { planner: p, dynamics: d });
        }
        let cfg = SamplerConfig {
            mode: SamplerMode::Alternating,
            steps: Some(6),
            ..Default::default()
        };
        let s = Sampler::new(&pl, Some(&dy), &sched, cfg).unwrap();
        assert_eq!(s.sample(&conds(1), &mut rngs(1, 1)).unwrap().evals.total(), 12);
    }

    #[test]
    fn zero_blend_equals_planner_only() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 3.0);
        let base = SamplerConfig {
            mode: SamplerMode::PlannerOnly,
            ..Default::default()
        };
        let a = Sampler::new(&pl, None, &sched, base).unwrap().sample(&conds(2), &mut rngs(4, 2)).unwrap();
        let comb = SamplerConfig {
            mode: SamplerMode::CombinedScore,
            tilt: 0.0,
            ..Default::default()
        };
        let b = Sampler::new(&pl, Some(&dy), &sched, comb).unwrap().sample(&conds(2), &mut rngs(4, 2)).unwrap();
        assert_eq!(a.plans, b.plans);
        let other = oracle(Role::Dynamics, &sched, -2.0);
        let c = Sampler::new(&pl, Some(&other), &sched, base).unwrap().sample(&conds(2), &mut rngs(4, 2)).unwrap();
        assert_eq!(a.plans, c.plans);
    }

    #[test]
    fn full_blend_follows_dynamics_on_states() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 3.0);
        let cfg = SamplerConfig {
            mode: SamplerMode::CombinedScore,
            tilt: f64::INFINITY,
            ..Default::default()
        };
        let out = Sampler::new(&pl, Some(&dy), &sched, cfg).unwrap().sample(&conds(1), &mut rngs(2, 1)).unwrap();
        for (a, e) in out.plans.states_of(0).iter().zip(&dy.clean_x) {
            assert!((a - e).abs() < 1e-6);
        }
        for (a, e) in out.plans.actions_of(0).iter().zip(&pl.clean_u) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_tilt_rejected() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.0);
        let cfg = SamplerConfig {
            mode: SamplerMode::CombinedScore,
            tilt: -3.0,
            ..Default::default()
        };
        assert!(matches!(Sampler::new(&pl, Some(&dy), &sched, cfg), Err(Error::Config(_))));
        assert!(matches!(
            Sampler::new(&pl, None, &sched, SamplerConfig::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(Sampler::new(&dy, Some(&pl), &sched, SamplerConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn cold_chain_is_seed_independent() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.5);
        let cfg = SamplerConfig {
            temperature: 1e-30,
            ..Default::default()
        };
        let s = Sampler::new(&pl, Some(&dy), &sched, cfg).unwrap();
        let a = s.sample(&conds(1), &mut rngs(1, 1)).unwrap();
        let b = s.sample(&conds(1), &mut rngs(99, 1)).unwrap();
        for (x, y) in a.plans.states.iter().zip(&b.plans.states) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn warm_start_degenerate_cases() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.5);
        let fresh = Sampler::new(&pl, Some(&dy), &sched, SamplerConfig::default()).unwrap();
        let prev = fresh.sample(&conds(2), &mut rngs(3, 2)).unwrap().plans;
        let zero = Sampler::new(
            &pl,
            Some(&dy),
            &sched,
            SamplerConfig {
                warm_start_steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let out = zero.warm_start(&prev, 1, &conds(2), &mut rngs(5, 2)).unwrap();
        assert_eq!(out.plans, prev.shifted(1));
        assert_eq!(out.evals.total(), 0);
        let full = Sampler::new(
            &pl,
            Some(&dy),
            &sched,
            SamplerConfig {
                warm_start_steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let a = full.warm_start(&prev, 2, &conds(2), &mut rngs(5, 2)).unwrap();
        let b = fresh.sample(&conds(2), &mut rngs(5, 2)).unwrap();
        assert_eq!(a, b);
        let part = Sampler::new(
            &pl,
            Some(&dy),
            &sched,
            SamplerConfig {
                warm_start_steps: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(part.warm_start(&prev, 2, &conds(2), &mut rngs(5, 2)).unwrap().evals.total(), 4);
    }

    #[test]
    fn shift_repeats_tail() {
        let p = PlanBatch {
            batch: 1,
            horizon: 4,
            state_dim: 1,
            action_dim: 1,
            x0_mode: InitialStateMode::Film,
            states: vec![1.0, 2.0, 3.0, 4.0],
            actions: vec![5.0, 6.0, 7.0, 8.0],
        };
        let s = p.shifted(3);
        assert_eq!(s.states, vec![4.0, 4.0, 4.0, 4.0]);
        let s = p.shifted(1);
        assert_eq!(s.states, vec![2.0, 3.0, 4.0, 4.0]);
        assert_eq!(s.actions, vec![6.0, 7.0, 8.0, 8.0]);
    }

    #[test]
    fn level_sequences() {
        assert_eq!(level_sequence(10, 10), (0..=10).rev().collect::<Vec<_>>());
        assert_eq!(level_sequence(10, 5), vec![10, 8, 6, 4, 2, 0]);
        assert_eq!(level_sequence(50, 1), vec![50, 0]);
    }

    #[test]
    fn per_candidate_streams_are_batch_independent() {
        let sched = ScheduleParams::default_for_steps(10).build().unwrap();
        let pl = oracle(Role::Planner, &sched, 0.0);
        let dy = oracle(Role::Dynamics, &sched, 0.5);
        let s = Sampler::new(&pl, Some(&dy), &sched, SamplerConfig::default()).unwrap();
        let all = s.sample(&conds(3), &mut rngs(8, 3)).unwrap();
        let mut one = vec![stream_rng(8, 2)];
        let single = s.sample(&conds(1), &mut one).unwrap();
        assert_eq!(all.plans.states_of(2), single.plans.states_of(0));
    }

    proptest::proptest! {
        #[test]
        fn level_sequences_are_strictly_decreasing(total in 1usize..300, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let seq = level_sequence(total, steps);
            proptest::prop_assert_eq!(seq.len(), steps + 1);
            proptest::prop_assert_eq!(seq[0], total);
            proptest::prop_assert_eq!(*seq.last().unwrap(), 0);
            proptest::prop_assert!(seq.windows(2).all(|w| w[0] > w[1]));
        }
    }
}

//! Planner and dynamics denoisers: prediction, training, EMA tracking and
//! finite-difference gradient checking.
//!
//! Both roles share one network architecture. The planner sees noisy states
//! and actions and predicts noise for both; the dynamics model sees the same
//! inputs but predicts noise for the states only, treating actions as
//! conditioning inputs at the same noise level.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, NetConfig, NetInput, Network, Real};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Dynamics,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Planner => "planner",
            Role::Dynamics => "dynamics",
        })
    }
}

/// How the observed initial state enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStateMode {
    /// Diffuse `(x_{1:H}, u_{0:H-1})`; `x_0` goes through the conditioning encoder.
    Film,
    /// Diffuse `(x_{0:H-1}, u_{0:H-1})` and overwrite the first state slot with `x_0`.
    Inpaint,
}

/// Width/depth knobs of the temporal network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub groups: usize,
    pub level_dim: usize,
    pub embed_dim: usize,
    /// Fixed sinusoidal position channels; without them the convolution
    /// stack only locates itself near the sequence ends.
    pub positions: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            kernel: 5,
            groups: 8,
            level_dim: 16,
            embed_dim: 64,
            positions: 4,
        }
    }
}

/// Everything that fixes the shape and semantics of a denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub role: Role,
    pub state_dim: usize,
    pub action_dim: usize,
    pub y_dim: usize,
    pub horizon: usize,
    pub x0_mode: InitialStateMode,
    /// When false the task vector is always replaced by the null embedding.
    pub conditional: bool,
    pub arch: ArchConfig,
}

impl DenoiserSpec {
    pub fn net_config(&self) -> NetConfig {
        let io = self.state_dim + self.action_dim;
        NetConfig {
            in_channels: io,
            out_channels: match self.role {
                Role::Planner => io,
                Role::Dynamics => self.state_dim,
            },
            x0_dim: match self.x0_mode {
                InitialStateMode::Film => self.state_dim,
                InitialStateMode::Inpaint => 0,
            },
            y_dim: self.y_dim,
            width: self.arch.width,
            blocks: self.arch.blocks,
            kernel: self.arch.kernel,
            groups: self.arch.groups,
            level_dim: self.arch.level_dim,
            embed_dim: self.arch.embed_dim,
            positions: self.arch.positions,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.net_config().out_channels
    }
}

/// Initial state plus task vector; `null[i]` replaces `y[i]` by the learned null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub null: Vec<bool>,
}

impl Conditioning {
    pub fn new(x0: Vec<f64>, y: Vec<f64>) -> Self {
        let null = vec![false; y.len()];
        Self { x0, y, null }
    }

    /// The null token: every task entry masked.
    pub fn masked(&self) -> Self {
        Self {
            x0: self.x0.clone(),
            y: self.y.clone(),
            null: vec![true; self.y.len()],
        }
    }
}

/// Weights of one denoiser together with its shape description.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub spec: DenoiserSpec,
    net: Network,
    pub weights: Vec<f32>,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(spec: DenoiserSpec, rng: &mut R) -> Result<Self> {
        let net = Network::new(spec.net_config())?;
        let weights = net.init_params(rng);
        Ok(Self { spec, net, weights })
    }

    pub fn from_weights(spec: DenoiserSpec, weights: Vec<f32>) -> Result<Self> {
        let net = Network::new(spec.net_config())?;
        if weights.len() != net.num_params() {
            return Err(Error::mismatch("weight count", net.num_params(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        Ok(Self { spec, net, weights })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    /// Batched noise prediction.
    ///
    /// `states` is `[batch, H, state_dim]` (the diffused state block),
    /// `actions` is `[batch, H, action_dim]`. Returns `[batch, H, out_dim]`
    /// with states first in every row.
    pub fn predict_batch(
        &self,
        states: &[f64],
        actions: &[f64],
        levels: &[usize],
        conds: &[Conditioning],
        use_null: bool,
    ) -> Result<Vec<f64>> {
        let s = &self.spec;
        let (h, sd, ad) = (s.horizon, s.state_dim, s.action_dim);
        let batch = levels.len();
        if conds.len() != batch {
            return Err(Error::mismatch("conditioning count", batch, conds.len()));
        }
        if states.len() != batch * h * sd {
            return Err(Error::mismatch("state block length", batch * h * sd, states.len()));
        }
        if actions.len() != batch * h * ad {
            return Err(Error::mismatch("action block length", batch * h * ad, actions.len()));
        }
        let traj = interleave(states, actions, batch * h, sd, ad);
        let (cond, mask) = self.encode_conditions(conds, use_null)?;
        let out = self.net.forward(
            &self.weights,
            &NetInput {
                batch,
                len: h,
                traj: &traj,
                levels,
                cond: &cond,
                null_mask: &mask,
            },
        )?;
        Ok(out.into_iter().map(|v| v as f64).collect())
    }

    fn encode_conditions(&self, conds: &[Conditioning], use_null: bool) -> Result<(Vec<f32>, Vec<bool>)> {
        let s = &self.spec;
        let cfg = self.net.config();
        let mut cond = Vec::with_capacity(conds.len() * cfg.cond_dim());
        let mut mask = Vec::with_capacity(conds.len() * s.y_dim);
        for c in conds {
            if c.y.len() != s.y_dim || c.null.len() != s.y_dim {
                return Err(Error::mismatch("task vector length", s.y_dim, c.y.len()));
            }
            if cfg.x0_dim > 0 {
                if c.x0.len() != s.state_dim {
                    return Err(Error::mismatch("initial state length", s.state_dim, c.x0.len()));
                }
                cond.extend(c.x0.iter().map(|v| *v as f32));
            }
            cond.extend(c.y.iter().map(|v| *v as f32));
            mask.extend(c.null.iter().map(|n| *n || use_null || !s.conditional));
        }
        Ok((cond, mask))
    }

    fn single(
        &self,
        role: Role,
        tau_x: &[f64],
        tau_u: &[f64],
        k: usize,
        cond: &Conditioning,
        use_null: bool,
    ) -> Result<Vec<f64>> {
        if self.spec.role != role {
            return Err(Error::Usage(format!("expected a {role} denoiser, got {}", self.spec.role)));
        }
        let out = self.predict_batch(tau_x, tau_u, &[k], std::slice::from_ref(cond), use_null)?;
        let (h, sd) = (self.spec.horizon, self.spec.state_dim);
        let od = self.spec.out_dim();
        let mut flat: Vec<f64> = out.chunks_exact(od).flat_map(|r| r[..sd].to_vec()).collect();
        if od > sd {
            flat.extend(out.chunks_exact(od).flat_map(|r| r[sd..].to_vec()));
        }
        debug_assert_eq!(flat.len(), h * od);
        Ok(flat)
    }
}

/// Planner noise prediction over `(tau_x, tau_u)`, returned as the state
/// block followed by the action block.
pub fn planner_predict(
    params: &DenoiserParams,
    tau_x: &[f64],
    tau_u: &[f64],
    k: usize,
    cond: &Conditioning,
    use_null: bool,
) -> Result<Vec<f64>> {
    params.single(Role::Planner, tau_x, tau_u, k, cond, use_null)
}

/// Dynamics noise prediction over the state block only; `tau_u` is an input.
pub fn dynamics_predict(
    params: &DenoiserParams,
    tau_x: &[f64],
    tau_u: &[f64],
    k: usize,
    cond: &Conditioning,
    use_null: bool,
) -> Result<Vec<f64>> {
    params.single(Role::Dynamics, tau_x, tau_u, k, cond, use_null)
}

fn interleave(states: &[f64], actions: &[f64], rows: usize, sd: usize, ad: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * (sd + ad));
    for r in 0..rows {
        out.extend(states[r * sd..(r + 1) * sd].iter().map(|v| *v as f32));
        out.extend(actions[r * ad..(r + 1) * ad].iter().map(|v| *v as f32));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Per-update blend of the EMA shadow towards the live weights.
    pub ema_rate: f64,
    pub cond_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Learning rate reached at the last step along a cosine decay; 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 64,
            steps: 100_000,
            ema_rate: 0.005,
            cond_dropout: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 10.0,
            seed: 0,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1]", self.cond_dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config(format!("final learning-rate fraction {} outside (0, 1]", self.final_lr_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::Config(format!("EMA rate {} outside [0, 1]", self.ema_rate)));
        }
        Ok(())
    }
}

/// A batch of clean, normalized sub-trajectories.
///
/// `states` holds `H + 1` states per sample (`x_{t0..=t0+H}`), `actions` holds
/// `H` actions, `y` the task vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub batch: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub y_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub y: Vec<f64>,
}

impl TrainBatch {
    pub fn initial_state(&self, b: usize) -> &[f64] {
        let sd = self.state_dim;
        let off = b * (self.horizon + 1) * sd;
        &self.states[off..off + sd]
    }

    /// The diffused state block for sample `b` under `mode`.
    pub fn state_block(&self, b: usize, mode: InitialStateMode) -> &[f64] {
        let (h, sd) = (self.horizon, self.state_dim);
        let off = b * (h + 1) * sd;
        match mode {
            InitialStateMode::Film => &self.states[off + sd..off + (h + 1) * sd],
            InitialStateMode::Inpaint => &self.states[off..off + h * sd],
        }
    }

    pub fn action_block(&self, b: usize) -> &[f64] {
        let (h, ad) = (self.horizon, self.action_dim);
        &self.actions[b * h * ad..(b + 1) * h * ad]
    }

    pub fn task(&self, b: usize) -> &[f64] {
        &self.y[b * self.y_dim..(b + 1) * self.y_dim]
    }

    /// Same samples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        let (sh, ah) = ((self.horizon + 1) * self.state_dim, self.horizon * self.action_dim);
        out.states.clear();
        out.actions.clear();
        out.y.clear();
        for &i in order {
            out.states.extend_from_slice(&self.states[i * sh..(i + 1) * sh]);
            out.actions.extend_from_slice(&self.actions[i * ah..(i + 1) * ah]);
            out.y.extend_from_slice(self.task(i));
        }
        out
    }
}

/// A fully sampled regression problem: noisy inputs, target noise and a
/// per-output loss mask. Fixing these makes the loss a deterministic
/// function of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossProblem {
    pub batch: usize,
    pub horizon: usize,
    pub traj: Vec<f64>,
    pub levels: Vec<usize>,
    pub cond: Vec<f64>,
    pub null_mask: Vec<bool>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl LossProblem {
    /// Samples levels, noise and conditioning dropout for a clean batch.
    pub fn sample<R: Rng + ?Sized>(
        spec: &DenoiserSpec,
        batch: &TrainBatch,
        schedule: &NoiseSchedule,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, sd, ad) = (spec.horizon, spec.state_dim, spec.action_dim);
        if batch.horizon != h || batch.state_dim != sd || batch.action_dim != ad || batch.y_dim != spec.y_dim {
            return Err(Error::mismatch(
                "batch shape (H, state, action, task)",
                format!("({h}, {sd}, {ad}, {})", spec.y_dim),
                format!("({}, {}, {}, {})", batch.horizon, batch.state_dim, batch.action_dim, batch.y_dim),
            ));
        }
        let io = sd + ad;
        let od = spec.out_dim();
        let kmax = schedule.num_steps();
        let film = spec.x0_mode == InitialStateMode::Film;
        let cond_dim = if film { sd } else { 0 } + spec.y_dim;
        let mut p = LossProblem {
            batch: batch.batch,
            horizon: h,
            traj: Vec::with_capacity(batch.batch * h * io),
            levels: Vec::with_capacity(batch.batch),
            cond: Vec::with_capacity(batch.batch * cond_dim),
            null_mask: Vec::with_capacity(batch.batch * spec.y_dim),
            target: Vec::with_capacity(batch.batch * h * od),
            weight: Vec::with_capacity(batch.batch * h * od),
        };
        for b in 0..batch.batch {
            let k = rng.random_range(1..=kmax);
            let ab = schedule.alpha_bar(k);
            let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let xs = batch.state_block(b, spec.x0_mode);
            let us = batch.action_block(b);
            let x0 = batch.initial_state(b);
            let mut eps = vec![0.0f64; io];
            for t in 0..h {
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                let pinned = !film && t == 0;
                for i in 0..sd {
                    let clean = xs[t * sd + i];
                    p.traj.push(if pinned { x0[i] } else { ca * clean + cb * eps[i] });
                }
                for i in 0..ad {
                    p.traj.push(ca * us[t * ad + i] + cb * eps[sd + i]);
                }
                for (i, e) in eps.iter().take(od).enumerate() {
                    p.target.push(*e);
                    p.weight.push(if pinned && i < sd { 0.0 } else { 1.0 });
                }
            }
            p.levels.push(k);
            if film {
                p.cond.extend_from_slice(x0);
            }
            p.cond.extend_from_slice(batch.task(b));
            let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
            p.null_mask.extend(std::iter::repeat_n(drop || !spec.conditional, spec.y_dim));
        }
        Ok(p)
    }

    /// Normalized so the loss is the mean over weighted outputs.
    fn denominator(&self) -> f64 {
        self.weight.iter().sum::<f64>().max(1.0)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let per = |v: &Vec<f64>, n: usize| -> Vec<f64> { order.iter().flat_map(|&i| v[i * n..(i + 1) * n].to_vec()).collect() };
        let io = self.traj.len() / self.batch;
        let od = self.target.len() / self.batch;
        let cd = self.cond.len() / self.batch;
        let yd = self.null_mask.len() / self.batch;
        Self {
            batch: self.batch,
            horizon: self.horizon,
            traj: per(&self.traj, io),
            levels: order.iter().map(|&i| self.levels[i]).collect(),
            cond: per(&self.cond, cd),
            null_mask: order.iter().flat_map(|&i| self.null_mask[i * yd..(i + 1) * yd].to_vec()).collect(),
            target: per(&self.target, od),
            weight: per(&self.weight, od),
        }
    }
}

/// Mean squared noise-prediction error and its gradient.
pub fn loss_and_grad<T: Real>(net: &Network, params: &[T], problem: &LossProblem) -> Result<(f64, Vec<T>)> {
    let traj: Vec<T> = problem.traj.iter().map(|v| T::of(*v)).collect();
    let cond: Vec<T> = problem.cond.iter().map(|v| T::of(*v)).collect();
    let (pred, cache) = net.forward_cached(
        params,
        &NetInput {
            batch: problem.batch,
            len: problem.horizon,
            traj: &traj,
            levels: &problem.levels,
            cond: &cond,
            null_mask: &problem.null_mask,
        },
    )?;
    let denom = problem.denominator();
    let mut loss = 0.0;
    let mut dy = Vec::with_capacity(pred.len());
    for ((p, t), w) in pred.iter().zip(&problem.target).zip(&problem.weight) {
        let d = p.to_f64_lossy() - t;
        loss += w * d * d;
        dy.push(T::of(2.0 * w * d / denom));
    }
    let grad = net.backward(params, &cache, &dy, &problem.null_mask);
    Ok((loss / denom, grad))
}

pub fn loss_value<T: Real>(net: &Network, params: &[T], problem: &LossProblem) -> Result<f64> {
    let traj: Vec<T> = problem.traj.iter().map(|v| T::of(*v)).collect();
    let cond: Vec<T> = problem.cond.iter().map(|v| T::of(*v)).collect();
    let pred = net.forward(
        params,
        &NetInput {
            batch: problem.batch,
            len: problem.horizon,
            traj: &traj,
            levels: &problem.levels,
            cond: &cond,
            null_mask: &problem.null_mask,
        },
    )?;
    let denom = problem.denominator();
    let loss: f64 = pred
        .iter()
        .zip(&problem.target)
        .zip(&problem.weight)
        .map(|((p, t), w)| w * (p.to_f64_lossy() - t).powi(2))
        .sum();
    Ok(loss / denom)
}

/// Live weights, EMA shadow and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub ema: Vec<f32>,
    opt: Adam,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(params: DenoiserParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = params.weights.len();
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
            },
            n,
        );
        Ok(Self {
            ema: params.weights.clone(),
            params,
            opt,
            cfg,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One optimizer update on a freshly noised batch; returns the loss.
    pub fn training_step<R: Rng + ?Sized>(&mut self, batch: &TrainBatch, schedule: &NoiseSchedule, rng: &mut R) -> Result<f64> {
        let problem = LossProblem::sample(&self.params.spec, batch, schedule, self.cfg.cond_dropout, rng)?;
        self.step_on(&problem)
    }

    /// Learning rate applied at the next update.
    pub fn current_lr(&self) -> f64 {
        let c = &self.cfg;
        if c.final_lr_fraction >= 1.0 || c.steps == 0 {
            return c.lr;
        }
        let progress = (self.step as f64 / c.steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        c.lr * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * cosine)
    }

    pub fn step_on(&mut self, problem: &LossProblem) -> Result<f64> {
        let (loss, mut grad) = loss_and_grad(&self.params.net, &self.params.weights, problem)?;
        if !loss.is_finite() {
            let bad = grad.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::TrainingFault {
                step: self.step,
                detail: format!("loss {loss}; {bad} non-finite gradient entries; levels {:?}", problem.levels),
            });
        }
        nn::clip_grad_norm(&mut grad, self.cfg.grad_clip);
        self.opt.set_lr(self.current_lr());
        self.opt.step(&mut self.params.weights, &grad);
        nn::ema_update(&mut self.ema, &self.params.weights, self.cfg.ema_rate);
        self.step += 1;
        Ok(loss)
    }

    /// Denoiser carrying the EMA weights, used for evaluation.
    pub fn ema_params(&self) -> DenoiserParams {
        DenoiserParams {
            spec: self.params.spec.clone(),
            net: self.params.net.clone(),
            weights: self.ema.clone(),
        }
    }
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor name, for tensors that were probed.
    pub per_tensor: Vec<(String, f64)>,
}

/// Relative error floor: gradients smaller than this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares the analytic gradient with central differences (step `1e-4`) in
/// double precision on `coords` coordinates: one per parameter tensor, the
/// rest drawn uniformly.
pub fn gradient_check_problem<R: Rng + ?Sized>(
    params: &DenoiserParams,
    problem: &LossProblem,
    coords: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    let net = params.network();
    let w: Vec<f64> = params.weights.iter().map(|v| *v as f64).collect();
    let (_, grad) = loss_and_grad::<f64>(net, &w, problem)?;
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, e) in net.entries().iter().enumerate() {
        picks.push((ti, e.offset + rng.random_range(0..e.len())));
    }
    let remaining = coords.saturating_sub(picks.len());
    for i in sample_indices(rng, w.len(), remaining.min(w.len())) {
        let ti = net
            .entries()
            .iter()
            .position(|e| i >= e.offset && i < e.offset + e.len())
            .expect("index inside layout");
        picks.push((ti, i));
    }
    let h = 1e-4;
    let mut per_tensor: Vec<(String, f64)> = net.entries().iter().map(|e| (e.name.clone(), 0.0)).collect();
    let mut worst = 0.0f64;
    let mut probe = w.clone();
    for (ti, i) in picks {
        probe[i] = w[i] + h;
        let lp = loss_value::<f64>(net, &probe, problem)?;
        probe[i] = w[i] - h;
        let lm = loss_value::<f64>(net, &probe, problem)?;
        probe[i] = w[i];
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_CHECK_FLOOR);
        per_tensor[ti].1 = per_tensor[ti].1.max(rel);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        per_tensor,
    })
}

/// Gradient check on a freshly noised version of `batch` (64 probed coordinates).
pub fn gradient_check<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<GradCheck> {
    let problem = LossProblem::sample(&params.spec, batch, schedule, 0.5, rng)?;
    gradient_check_problem(params, &problem, 64, rng)
}

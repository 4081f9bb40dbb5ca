//! Candidate scoring and budget-aware selection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::layers::{silu, silu_backward, Linear};
use crate::nn::{Adam, AdamConfig};

/// Per-step model `(x, u) -> value vector`.
pub trait StepModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

/// `-(x'Qx + u'Ru)` with diagonal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticReward {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl StepModel for QuadraticReward {
    fn state_dim(&self) -> usize {
        self.q.len()
    }
    fn action_dim(&self) -> usize {
        self.r.len()
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let sx: f64 = x.iter().zip(&self.q).map(|(v, w)| w * v * v).sum();
        let su: f64 = u.iter().zip(&self.r).map(|(v, w)| w * v * v).sum();
        vec![-(sx + su)]
    }
}

/// One unit of cost whenever `|x[index]| > limit`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCost {
    pub state_dim: usize,
    pub action_dim: usize,
    pub index: usize,
    pub limit: f64,
}

impl StepModel for LimitCost {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![if x[self.index].abs() > self.limit { 1.0 } else { 0.0 }]
    }
}

/// Constant zero of a given width.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub out_dim: usize,
}

impl StepModel for ZeroModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn eval(&self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
        vec![0.0; self.out_dim]
    }
}

/// Discounted reward and cost sums over the `H` rows of `states` (`x_0..x_{H-1}`) and `actions`.
pub fn score(states: &[f64], actions: &[f64], reward: &dyn StepModel, cost: &dyn StepModel, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let (sd, ad) = (reward.state_dim(), reward.action_dim());
    if cost.state_dim() != sd || cost.action_dim() != ad || reward.out_dim() != 1 {
        return Err(Error::Usage(format!(
            "reward model ({sd}, {ad}) -> {} and cost model ({}, {}) -> {} disagree",
            reward.out_dim(),
            cost.state_dim(),
            cost.action_dim(),
            cost.out_dim()
        )));
    }
    if sd == 0 || states.len() % sd != 0 || ad == 0 || actions.len() % ad != 0 || states.len() / sd != actions.len() / ad {
        return Err(Error::Usage(format!(
            "trajectory of {} state and {} action values does not fit dims ({sd}, {ad})",
            states.len(),
            actions.len()
        )));
    }
    let h = actions.len() / ad;
    if h == 0 {
        return Err(Error::Usage("empty trajectory".into()));
    }
    let mut j = 0.0;
    let mut c = vec![0.0; cost.out_dim()];
    let mut disc = 1.0;
    for t in 0..h {
        let (x, u) = (&states[t * sd..(t + 1) * sd], &actions[t * ad..(t + 1) * ad]);
        j += disc * reward.eval(x, u)[0];
        for (acc, v) in c.iter_mut().zip(cost.eval(x, u)) {
            *acc += disc * v;
        }
        disc *= gamma;
    }
    Ok((j, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub j_hat: f64,
    pub c_hat: Vec<f64>,
    pub feasible: bool,
}

impl ScoredCandidate {
    pub fn new(j_hat: f64, c_hat: Vec<f64>, remaining: &[f64]) -> Self {
        let feasible = c_hat.iter().zip(remaining).all(|(c, b)| c <= b);
        Self { j_hat, c_hat, feasible }
    }
}

/// Budget bookkeeping for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub budget: Vec<f64>,
    pub remaining: Vec<f64>,
    pub gamma: f64,
    pub return_scale: f64,
    pub cost_scale: f64,
    pub candidates: usize,
}

impl BudgetSpec {
    pub fn new(budget: Vec<f64>, gamma: f64, return_scale: f64, cost_scale: f64, candidates: usize) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::Config("need at least one candidate".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("discount {gamma} outside (0, 1]")));
        }
        if budget.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config("budgets must be finite and non-negative".into()));
        }
        Ok(Self {
            remaining: budget.clone(),
            budget,
            gamma,
            return_scale,
            cost_scale,
            candidates,
        })
    }

    /// Cost target passed to the generator: `cost_scale * remaining`.
    pub fn cost_condition(&self) -> Vec<f64> {
        self.remaining.iter().map(|b| self.cost_scale * b).collect()
    }
}

/// Highest estimated return among candidates within the remaining budget;
/// if none is feasible, the lowest total estimated cost. Ties go to the
/// lowest index.
pub fn select_budget_aware(candidates: &[ScoredCandidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidates to select from".into()));
    }
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.feasible && best.is_none_or(|b| c.j_hat > candidates[b].j_hat) {
            best = Some(i);
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    let total = |c: &ScoredCandidate| c.c_hat.iter().sum::<f64>();
    let mut b = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if total(c) < total(&candidates[b]) {
            b = i;
        }
    }
    Ok(b)
}

/// Index of the largest finite score, lowest index on ties.
pub fn rank_generic(scores: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Usage("every candidate has a non-finite score".into()))
}

/// Subtracts realized step costs from the remaining budget, flooring at 0.
pub fn update_remaining_budget(budget: &mut BudgetSpec, realized: &[f64]) -> Result<()> {
    if realized.len() != budget.remaining.len() {
        return Err(Error::mismatch("cost dimension", budget.remaining.len(), realized.len()));
    }
    if let Some(c) = realized.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::Domain(format!("realized cost {c} is negative")));
    }
    for (b, c) in budget.remaining.iter_mut().zip(realized) {
        *b = (*b - c).max(0.0);
    }
    Ok(())
}

/// Two-hidden-layer perceptron regressed on per-step dataset values.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    state_dim: usize,
    action_dim: usize,
    out_dim: usize,
    layers: [Linear; 3],
    params: Vec<f32>,
    in_shift: Vec<f64>,
    in_scale: Vec<f64>,
    out_shift: Vec<f64>,
    out_scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpFit {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for MlpFit {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 3000,
            batch: 256,
            lr: 1e-3,
        }
    }
}

fn standardize(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|d| (rows.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

impl MlpModel {
    /// Fits rewards (`costs = false`) or cost vectors on all recorded steps.
    pub fn fit<R: Rng + ?Sized>(data: &Dataset, costs: bool, cfg: &MlpFit, rng: &mut R) -> Result<Self> {
        let m = &data.meta;
        let (sd, ad) = (m.state_dim, m.action_dim);
        let od = if costs { m.cost_dim } else { 1 };
        if od == 0 {
            return Err(Error::Usage("dataset has no cost signal to fit".into()));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for e in &data.episodes {
            for t in 0..e.steps() {
                let mut row = e.state(t).to_vec();
                row.extend_from_slice(e.action(t));
                inputs.push(row);
                targets.push(if costs { e.cost(t).to_vec() } else { vec![e.rewards[t]] });
            }
        }
        if inputs.is_empty() {
            return Err(Error::Usage("dataset has no steps".into()));
        }
        let (in_shift, in_scale) = standardize(&inputs, sd + ad);
        let (out_shift, out_scale) = standardize(&targets, od);
        let h = cfg.hidden;
        let l1 = Linear { w: 0, b: (sd + ad) * h, inp: sd + ad, out: h };
        let l2 = Linear { w: l1.b + h, b: l1.b + h + h * h, inp: h, out: h };
        let l3 = Linear { w: l2.b + h, b: l2.b + h + h * od, inp: h, out: od };
        let n = l3.b + od;
        let mut params = vec![0f32; n];
        for l in [&l1, &l2, &l3] {
            let std = 1.0 / (l.inp as f64).sqrt();
            for w in &mut params[l.w..l.w + l.inp * l.out] {
                *w = (std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        let mut model = Self {
            state_dim: sd,
            action_dim: ad,
            out_dim: od,
            layers: [l1, l2, l3],
            params,
            in_shift,
            in_scale,
            out_shift,
            out_scale,
        };
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            n,
        );
        for _ in 0..cfg.steps {
            let mut x = Vec::with_capacity(cfg.batch * (sd + ad));
            let mut y = Vec::with_capacity(cfg.batch * od);
            for _ in 0..cfg.batch {
                let i = rng.random_range(0..inputs.len());
                x.extend(model.scale_in(&inputs[i]));
                y.extend(targets[i].iter().enumerate().map(|(d, v)| ((v - model.out_shift[d]) / model.out_scale[d]) as f32));
            }
            let (pred, acts) = model.forward(&x, cfg.batch);
            let dy: Vec<f32> = pred.iter().zip(&y).map(|(p, t)| 2.0 * (p - t) / (cfg.batch * od) as f32).collect();
            let mut g = vec![0f32; n];
            let [l1, l2, l3] = model.layers;
            let d2 = l3.backward(&model.params, &acts[3], &dy, cfg.batch, &mut g);
            let d2 = silu_backward(&acts[2], &d2);
            let d1 = l2.backward(&model.params, &acts[1], &d2, cfg.batch, &mut g);
            let d1 = silu_backward(&acts[0], &d1);
            l1.backward(&model.params, &x, &d1, cfg.batch, &mut g);
            opt.step(&mut model.params, &g);
        }
        Ok(model)
    }

    fn scale_in(&self, row: &[f64]) -> Vec<f32> {
        row.iter()
            .enumerate()
            .map(|(d, v)| ((v - self.in_shift[d]) / self.in_scale[d]) as f32)
            .collect()
    }

    /// Returns the output and the activations `[pre1, post1, pre2, post2]`.
    fn forward(&self, x: &[f32], rows: usize) -> (Vec<f32>, [Vec<f32>; 4]) {
        let [l1, l2, l3] = self.layers;
        let a1 = l1.forward(&self.params, x, rows);
        let h1 = silu(&a1);
        let a2 = l2.forward(&self.params, &h1, rows);
        let h2 = silu(&a2);
        let out = l3.forward(&self.params, &h2, rows);
        (out, [a1, h1, a2, h2])
    }
}

impl StepModel for MlpModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn action_dim(&self) -> usize {
        self.action_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut row = x.to_vec();
        row.extend_from_slice(u);
        let input = self.scale_in(&row);
        let (out, _) = self.forward(&input, 1);
        out.iter()
            .enumerate()
            .map(|(d, v)| *v as f64 * self.out_scale[d] + self.out_shift[d])
            .collect()
    }
}

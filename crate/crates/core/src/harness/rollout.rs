use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{eval_seeds, ExperimentConfig, RankerKind, ScoreModels};
use super::models::{build_dataset, Models, SCORE_STREAM};
use super::report::SampleRecord;
use crate::checkpoint::Checkpoint;
use crate::dataset::{Normalizer, TaskTarget};
use crate::denoiser::Conditioning;
use crate::env::{bicycle, bicycle_expert_actions, linear, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::ranker::{
    score, select_budget_aware, update_remaining_budget, BudgetSpec, LimitCost, MlpFit, MlpModel, QuadraticReward, ScoredCandidate,
    StepModel, ZeroModel,
};
use crate::sampler::{conditioning, stream_rng, Plan, PlanBatch, Sampler, SamplerMode};

/// Candidate trajectories generated per sampler call at most.
const MAX_BATCH: usize = 512;

/// One evaluation episode: where it starts and what it aims for.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub index: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Target position for goal tasks, empty otherwise.
    pub goal: Vec<f64>,
}

/// Evaluation tasks drawn from the shipped seed list. Integrator tasks aim
/// at the origin; bicycle goals are where the expert ends up from `x0`.
pub fn eval_tasks(cfg: &ExperimentConfig, env: &Env) -> Vec<EvalTask> {
    let seeds = &eval_seeds()[cfg.eval.seed_offset..cfg.eval.seed_offset + cfg.eval.episodes];
    seeds
        .iter()
        .enumerate()
        .map(|(index, &seed)| {
            let mut rng = stream_rng(seed, u64::MAX);
            let (x0, goal) = match env.config() {
                EnvConfig::Bicycle(b) => {
                    let (x0, path) = bicycle::sample_u_reference(b, &mut rng);
                    let end = env.simulate(&x0, &bicycle_expert_actions(b, &x0, &path));
                    (x0, end.goal)
                }
                _ => (env.sample_initial_state(&mut rng), vec![0.0; env.goal_dim()]),
            };
            EvalTask { index, seed, x0, goal }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub cost: Vec<f64>,
    /// Realized quadratic cost (integrator tasks).
    pub quadratic_cost: Option<f64>,
    /// Cost of the infinite-horizon LQR controller from the same initial state over the same steps.
    pub reference_cost: Option<f64>,
    pub within_budget: Option<bool>,
    pub final_error: Option<f64>,
    pub success: Option<bool>,
    /// Dynamics-consistency profile of the first executed plan.
    pub profile: Vec<f64>,
    pub plans: usize,
    /// Denoiser calls per guidance pathway, summed over all candidates.
    pub evals: u64,
    /// Selections that exceeded the remaining budget although a feasible candidate existed.
    pub budget_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_cost: Vec<f64>,
    pub std_cost: Vec<f64>,
    /// Mean quadratic cost over mean reference cost.
    pub normalized_cost: Option<f64>,
    pub success_rate: Option<f64>,
    pub within_budget_rate: Option<f64>,
    pub mean_profile: Vec<f64>,
    pub mean_evals: f64,
    pub budget_violations: usize,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    (m, var.sqrt())
}

fn rate(v: impl Iterator<Item = Option<bool>>) -> Option<f64> {
    let flags: Option<Vec<bool>> = v.collect();
    let flags = flags?;
    if flags.is_empty() {
        return None;
    }
    Some(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
}

impl Aggregates {
    pub fn from_episodes(eps: &[EpisodeRecord]) -> Self {
        let (mean_return, std_return) = mean_std(eps.iter().map(|e| e.episode_return));
        let cd = eps.first().map_or(0, |e| e.cost.len());
        let (mean_cost, std_cost) = (0..cd).map(|d| mean_std(eps.iter().map(move |e| e.cost[d]))).unzip();
        let normalized_cost = match eps.iter().map(|e| e.quadratic_cost.zip(e.reference_cost)).collect::<Option<Vec<_>>>() {
            Some(pairs) if !pairs.is_empty() => {
                let (q, r) = pairs.iter().fold((0.0, 0.0), |(a, b), (q, r)| (a + q, b + r));
                Some(q / r)
            }
            _ => None,
        };
        let h = eps.first().map_or(0, |e| e.profile.len());
        let mean_profile = (0..h)
            .map(|t| eps.iter().map(|e| e.profile[t]).sum::<f64>() / eps.len() as f64)
            .collect();
        Self {
            episodes: eps.len(),
            mean_return,
            std_return,
            mean_cost,
            std_cost,
            normalized_cost,
            success_rate: rate(eps.iter().map(|e| e.success)),
            within_budget_rate: rate(eps.iter().map(|e| e.within_budget)),
            mean_profile,
            mean_evals: eps.iter().map(|e| e.evals as f64).sum::<f64>() / eps.len().max(1) as f64,
            budget_violations: eps.iter().map(|e| e.budget_violations).sum(),
        }
    }
}

/// Wall-clock measurements; kept apart from the reproducible results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub sampling_seconds: f64,
    pub sampler_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub config_hash: String,
    pub env: String,
    pub mode: SamplerMode,
    pub episodes: Vec<EpisodeRecord>,
    pub aggregates: Aggregates,
    #[serde(skip)]
    pub timing: Timing,
}

impl RolloutReport {
    /// Errors if the stored aggregates differ from a recomputation.
    pub fn check_consistency(&self) -> Result<()> {
        let again = Aggregates::from_episodes(&self.episodes);
        if again != self.aggregates {
            return Err(Error::mismatch("aggregates", format!("{again:?}"), format!("{:?}", self.aggregates)));
        }
        Ok(())
    }
}

struct Scorer {
    reward: Box<dyn StepModel>,
    cost: Box<dyn StepModel>,
}

fn scorer(cfg: &ExperimentConfig, env: &Env) -> Result<Option<Scorer>> {
    if !matches!(cfg.ranker.kind, RankerKind::Return | RankerKind::Budget) {
        return Ok(None);
    }
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let lin = match &cfg.env {
        EnvConfig::DoubleIntegrator(l) => *l,
        EnvConfig::ConstrainedIntegrator(c) => c.linear,
        EnvConfig::Bicycle(_) => return Err(Error::Config("the bicycle task has no reward model".into())),
    };
    Ok(Some(match cfg.ranker.models {
        ScoreModels::Analytic => Scorer {
            reward: Box::new(QuadraticReward {
                q: vec![lin.q; sd],
                r: vec![lin.r; ad],
            }),
            cost: match &cfg.env {
                EnvConfig::ConstrainedIntegrator(c) => Box::new(LimitCost {
                    state_dim: sd,
                    action_dim: ad,
                    index: 1,
                    limit: c.v_max,
                }),
                _ => Box::new(ZeroModel {
                    state_dim: sd,
                    action_dim: ad,
                    out_dim: 0,
                }),
            },
        },
        ScoreModels::Learned => {
            let data = build_dataset(cfg)?;
            let mut rng = stream_rng(cfg.seed, SCORE_STREAM);
            let fit = MlpFit::default();
            let reward = MlpModel::fit(&data, false, &fit, &mut rng)?;
            let cost: Box<dyn StepModel> = if env.cost_dim() > 0 {
                Box::new(MlpModel::fit(&data, true, &fit, &mut rng)?)
            } else {
                Box::new(ZeroModel {
                    state_dim: sd,
                    action_dim: ad,
                    out_dim: 0,
                })
            };
            Scorer { reward: Box::new(reward), cost }
        }
    }))
}

fn check_models(cfg: &ExperimentConfig, env: &Env, models: &Models) -> Result<()> {
    for ck in [&models.planner, &models.dynamics] {
        check_checkpoint(cfg, env, ck)?;
    }
    if models.planner.meta.normalizer != models.dynamics.meta.normalizer {
        return Err(Error::Config("planner and dynamics were trained with different normalizers".into()));
    }
    Ok(())
}

fn check_checkpoint(cfg: &ExperimentConfig, env: &Env, ck: &Checkpoint) -> Result<()> {
    if ck.meta.env != cfg.env.name() {
        return Err(Error::Config(format!("checkpoint trained on {} but the experiment runs {}", ck.meta.env, cfg.env.name())));
    }
    ck.check_dims(env.state_dim(), env.action_dim(), cfg.model.horizon)
        .map_err(|e| Error::Config(format!("checkpoint does not fit the task: {e}")))?;
    if ck.meta.schedule != cfg.schedule {
        return Err(Error::Config("checkpoint schedule differs from the configured schedule".into()));
    }
    Ok(())
}

struct Episode {
    task: EvalTask,
    x: Vec<f64>,
    rec: EpisodeRecord,
    budget: Option<BudgetSpec>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    env: &'a Env,
    norm: &'a Normalizer,
    target: TaskTarget,
    sampler: &'a Sampler<'a>,
    scorer: Option<&'a Scorer>,
}

impl Ctx<'_> {
    fn task_vector(&self, ep: &Episode) -> Vec<f64> {
        match self.target {
            TaskTarget::Goal => self.norm.normalize_goal(&ep.task.goal),
            TaskTarget::ReturnCost => {
                let rk = &self.cfg.ranker;
                let mut y = vec![rk.return_scale];
                let remaining = ep.budget.as_ref().map(|b| b.remaining.clone()).unwrap_or_default();
                y.extend(remaining.iter().enumerate().map(|(d, b)| self.norm.normalize_cost(d, rk.cost_scale * b)));
                y
            }
        }
    }

    /// Index of the candidate to execute, and whether the choice broke the budget rule.
    fn select(&self, ep: &Episode, plans: &[Plan], steps_left: usize) -> Result<(usize, bool)> {
        let (sd, ad) = (self.env.state_dim(), self.env.action_dim());
        if plans.len() == 1 {
            return Ok((0, false));
        }
        match self.cfg.ranker.kind {
            RankerKind::First => Ok((0, false)),
            RankerKind::Goal => {
                let gd = ep.task.goal.len();
                let h = plans[0].states.len() / sd;
                let last = steps_left.min(h) - 1;
                let dist: Vec<f64> = plans
                    .iter()
                    .map(|p| {
                        let s = &p.states[last * sd..last * sd + gd];
                        -s.iter().zip(&ep.task.goal).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    })
                    .collect();
                Ok((crate::ranker::rank_generic(&dist)?, false))
            }
            RankerKind::Return | RankerKind::Budget => {
                let sc = self.scorer.expect("scorer built for ranking modes");
                let gamma = self.cfg.ranker.gamma;
                let remaining = ep.budget.as_ref().map(|b| b.remaining.clone()).unwrap_or_default();
                let mut cands = Vec::with_capacity(plans.len());
                for p in plans {
                    let h = (p.actions.len() / ad).min(steps_left);
                    let mut states = ep.x.clone();
                    states.extend_from_slice(&p.states[..(h - 1) * sd]);
                    let (j, c) = score(&states, &p.actions[..h * ad], sc.reward.as_ref(), sc.cost.as_ref(), gamma)?;
                    cands.push(ScoredCandidate::new(j, c, &remaining));
                }
                if self.cfg.ranker.kind == RankerKind::Return {
                    let js: Vec<f64> = cands.iter().map(|c| c.j_hat).collect();
                    return Ok((crate::ranker::rank_generic(&js)?, false));
                }
                let i = select_budget_aware(&cands)?;
                let broke = cands.iter().any(|c| c.feasible) && !cands[i].feasible;
                Ok((i, broke))
            }
        }
    }

    fn run_group(&self, tasks: &[EvalTask], timing: &mut Timing) -> Result<Vec<EpisodeRecord>> {
        let cfg = self.cfg;
        let env = self.env;
        let nc = cfg.ranker.candidates;
        let h = cfg.model.horizon;
        let (total, chunk) = if cfg.eval.open_loop {
            (env.episode_steps().min(h), h)
        } else {
            (env.episode_steps(), cfg.eval.chunk)
        };
        let mut rngs: Vec<ChaCha8Rng> = tasks
            .iter()
            .flat_map(|t| (0..nc).map(move |c| stream_rng(t.seed, c as u64)))
            .collect();
        let mut eps: Vec<Episode> = tasks
            .iter()
            .map(|t| -> Result<Episode> {
                let budget = match cfg.budget() {
                    Some(b) => Some(BudgetSpec::new(vec![b; env.cost_dim()], cfg.ranker.gamma, cfg.ranker.return_scale, cfg.ranker.cost_scale, nc)?),
                    None => None,
                };
                Ok(Episode {
                    task: t.clone(),
                    x: t.x0.clone(),
                    rec: EpisodeRecord {
                        index: t.index,
                        seed: t.seed,
                        steps: 0,
                        episode_return: 0.0,
                        cost: vec![0.0; env.cost_dim()],
                        quadratic_cost: None,
                        reference_cost: None,
                        within_budget: None,
                        final_error: None,
                        success: None,
                        profile: Vec::new(),
                        plans: 0,
                        evals: 0,
                        budget_violations: 0,
                    },
                    budget,
                })
            })
            .collect::<Result<_>>()?;

        let mut prev: Option<PlanBatch> = None;
        let mut executed = 0;
        let mut t = 0;
        while t < total {
            let conds: Vec<Conditioning> = eps
                .iter()
                .flat_map(|ep| {
                    let c = conditioning(self.norm, &ep.x, self.task_vector(ep));
                    std::iter::repeat_n(c, nc)
                })
                .collect();
            let clock = Instant::now();
            let out = match &prev {
                None => self.sampler.sample(&conds, &mut rngs)?,
                Some(p) => self.sampler.warm_start(p, executed, &conds, &mut rngs)?,
            };
            timing.sampling_seconds += clock.elapsed().as_secs_f64();
            timing.sampler_calls += 1;
            let k = chunk.min(total - t);
            let mut keep = out.plans.clone();
            let (ns, na) = (h * keep.state_dim, h * keep.action_dim);
            for (e, ep) in eps.iter_mut().enumerate() {
                let plans: Vec<Plan> = (0..nc).map(|c| out.plans.plan(e * nc + c, self.norm)).collect();
                let (pick, broke) = self.select(ep, &plans, total - t)?;
                let plan = &plans[pick];
                if t == 0 {
                    ep.rec.profile = crate::env::dynamics_consistency(env, &ep.x, &plan.states, &plan.actions);
                }
                ep.rec.budget_violations += broke as usize;
                ep.rec.plans += 1;
                ep.rec.evals += out.evals.total() * nc as u64;
                for u in plan.actions.chunks_exact(env.action_dim()).take(k) {
                    let s = env.step(&ep.x, u);
                    ep.rec.episode_return += s.reward;
                    for (acc, c) in ep.rec.cost.iter_mut().zip(&s.cost) {
                        *acc += c;
                    }
                    if let Some(b) = ep.budget.as_mut() {
                        update_remaining_budget(b, &s.cost)?;
                    }
                    ep.x = s.next;
                    ep.rec.steps += 1;
                }
                let src = e * nc + pick;
                for c in 0..nc {
                    let dst = e * nc + c;
                    keep.states[dst * ns..(dst + 1) * ns].copy_from_slice(&out.plans.states[src * ns..(src + 1) * ns]);
                    keep.actions[dst * na..(dst + 1) * na].copy_from_slice(&out.plans.actions[src * na..(src + 1) * na]);
                }
            }
            prev = Some(keep);
            executed = k;
            t += k;
        }

        for ep in &mut eps {
            let r = &mut ep.rec;
            if let Some((sys, lqr)) = env.linear() {
                r.quadratic_cost = Some(-r.episode_return);
                r.reference_cost = Some(linear::lqr_cost(sys, lqr, &ep.task.x0, r.steps));
            }
            if let Some(b) = cfg.budget() {
                r.within_budget = Some(r.cost.iter().all(|c| *c <= b));
            }
            if !ep.task.goal.is_empty() {
                let err = ep.x.iter().zip(&ep.task.goal).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                r.final_error = Some(err);
                if let EnvConfig::Bicycle(b) = &cfg.env {
                    r.success = Some(err < b.goal_radius);
                }
            }
        }
        Ok(eps.into_iter().map(|e| e.rec).collect())
    }
}

/// Closed-loop evaluation of the configured sampler on the shipped
/// evaluation episodes. Models are checked against the task before any
/// rollout starts.
pub fn run_closed_loop(cfg: &ExperimentConfig, models: &Models) -> Result<RolloutReport> {
    cfg.validate()?;
    let env = Env::new(&cfg.env)?;
    check_models(cfg, &env, models)?;
    let start = Instant::now();
    let schedule = cfg.schedule.build()?;
    let sampler = Sampler::new(&models.planner.ema, Some(&models.dynamics.ema), &schedule, cfg.sampler)?;
    let scorer = scorer(cfg, &env)?;
    let ctx = Ctx {
        cfg,
        env: &env,
        norm: &models.planner.meta.normalizer,
        target: models.planner.meta.target,
        sampler: &sampler,
        scorer: scorer.as_ref(),
    };
    let tasks = eval_tasks(cfg, &env);
    let group = (MAX_BATCH / cfg.ranker.candidates).max(1);
    let mut timing = Timing::default();
    let mut episodes = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(group) {
        episodes.extend(ctx.run_group(chunk, &mut timing)?);
        log::debug!("evaluated {}/{} episodes", episodes.len(), tasks.len());
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(RolloutReport {
        config_hash: cfg.hash(),
        env: cfg.env.name().into(),
        mode: cfg.sampler.mode,
        aggregates: Aggregates::from_episodes(&episodes),
        episodes,
        timing,
    })
}

/// First plans of the evaluation episodes, without execution.
pub fn sample_plans(cfg: &ExperimentConfig, models: &Models) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let env = Env::new(&cfg.env)?;
    check_models(cfg, &env, models)?;
    let schedule = cfg.schedule.build()?;
    let sampler = Sampler::new(&models.planner.ema, Some(&models.dynamics.ema), &schedule, cfg.sampler)?;
    let norm = &models.planner.meta.normalizer;
    let mut out = Vec::new();
    for group in eval_tasks(cfg, &env).chunks(MAX_BATCH) {
        let conds: Vec<Conditioning> = group
            .iter()
            .map(|t| {
                let y = match models.planner.meta.target {
                    TaskTarget::Goal => norm.normalize_goal(&t.goal),
                    TaskTarget::ReturnCost => {
                        let mut y = vec![cfg.ranker.return_scale];
                        if let Some(b) = cfg.budget() {
                            y.extend((0..env.cost_dim()).map(|d| norm.normalize_cost(d, cfg.ranker.cost_scale * b)));
                        }
                        y
                    }
                };
                conditioning(norm, &t.x0, y)
            })
            .collect();
        let mut rngs: Vec<ChaCha8Rng> = group.iter().map(|t| stream_rng(t.seed, 0)).collect();
        let res = sampler.sample(&conds, &mut rngs)?;
        out.extend(group.iter().enumerate().map(|(b, t)| {
            let p = res.plans.plan(b, norm);
            SampleRecord {
                index: t.index,
                seed: t.seed,
                x0: t.x0.clone(),
                goal: t.goal.clone(),
                profile: crate::env::dynamics_consistency(&env, &t.x0, &p.states, &p.actions),
                states: p.states,
                actions: p.actions,
            }
        }));
    }
    Ok(out)
}

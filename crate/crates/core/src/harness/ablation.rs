use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::models::ModelStore;
use super::report::{ensure_dir, to_json, write_file};
use super::rollout::{run_closed_loop, Aggregates, EpisodeRecord, RolloutReport};
use crate::denoiser::InitialStateMode;
use crate::error::{Error, Result};
use crate::sampler::SamplerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Planner-only at K/2 and K steps against alternating at K/2 (matched evaluation budgets).
    StepCount,
    /// Combined-score sampling over a grid of tilts against alternating sampling.
    Combined,
    /// Dynamics models trained on increasingly noisy states.
    DynNoise,
    /// Conditional against unconditional dynamics models.
    DynCond,
    /// Guidance-scale sweep.
    Params,
    /// Candidate-count sweep.
    SampleCount,
    /// Initial-state conditioning against inpainting, and the joint baseline.
    Inpainting,
    /// Warm-start depth sweep.
    WarmStart,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::StepCount,
        Ablation::Combined,
        Ablation::DynNoise,
        Ablation::DynCond,
        Ablation::Params,
        Ablation::SampleCount,
        Ablation::Inpainting,
        Ablation::WarmStart,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Ablation::StepCount => "step-count",
            Ablation::Combined => "combined",
            Ablation::DynNoise => "dyn-noise",
            Ablation::DynCond => "dyn-cond",
            Ablation::Params => "params",
            Ablation::SampleCount => "sample-count",
            Ablation::Inpainting => "inpainting",
            Ablation::WarmStart => "warm-start",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.id() == s).ok_or_else(|| {
            let ids: Vec<_> = Ablation::ALL.iter().map(|a| a.id()).collect();
            Error::Usage(format!("unknown ablation {s:?}; expected one of {}", ids.join(", ")))
        })
    }
}

/// Arm name and the config it runs.
pub fn ablation_arms(base: &ExperimentConfig, ablation: Ablation) -> Vec<(String, ExperimentConfig)> {
    let k = base.schedule.steps;
    let half = (k / 2).max(1);
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let alternating = with(&|c| c.sampler.mode = SamplerMode::Alternating);
    match ablation {
        Ablation::StepCount => vec![
            (
                format!("planner-{half}"),
                with(&|c| {
                    c.sampler.mode = SamplerMode::PlannerOnly;
                    c.sampler.steps = Some(half);
                }),
            ),
            (format!("planner-{k}"), with(&|c| {
                c.sampler.mode = SamplerMode::PlannerOnly;
                c.sampler.steps = Some(k);
            })),
            (format!("alternating-{half}"), with(&|c| {
                c.sampler.mode = SamplerMode::Alternating;
                c.sampler.steps = Some(half);
            })),
        ],
        Ablation::Combined => {
            let mut arms = vec![("alternating".to_string(), alternating)];
            for (name, tilt) in [("0.25", 1.0 / 3.0), ("0.5", 1.0), ("0.75", 3.0), ("1", f64::INFINITY)] {
                arms.push((
                    format!("combined-{name}"),
                    with(&|c| {
                        c.sampler.mode = SamplerMode::CombinedScore;
                        c.sampler.tilt = tilt;
                    }),
                ));
            }
            arms
        }
        Ablation::DynNoise => [0.0, 0.001, 0.002, 0.005, 0.01, 0.02]
            .into_iter()
            .map(|std| {
                (
                    format!("noise-{std}"),
                    with(&|c| {
                        c.sampler.mode = SamplerMode::Alternating;
                        c.dataset.dynamics_state_noise = std;
                    }),
                )
            })
            .collect(),
        Ablation::DynCond => [("conditional", true), ("unconditional", false)]
            .into_iter()
            .map(|(name, cond)| {
                (
                    name.to_string(),
                    with(&|c| {
                        c.sampler.mode = SamplerMode::Alternating;
                        c.model.conditional_dynamics = cond;
                    }),
                )
            })
            .collect(),
        Ablation::Params => [1.0, 1.2, 1.5, 2.0]
            .into_iter()
            .map(|w| (format!("omega-{w}"), with(&|c| c.sampler.omega = w)))
            .collect(),
        Ablation::SampleCount => [1, 4, 8, 16, 32, 64]
            .into_iter()
            .map(|n| (format!("n-{n}"), with(&|c| c.ranker.candidates = n)))
            .collect(),
        Ablation::Inpainting => vec![
            ("film".to_string(), alternating.clone()),
            (
                "inpaint".to_string(),
                with(&|c| {
                    c.sampler.mode = SamplerMode::Alternating;
                    c.model.x0_mode = InitialStateMode::Inpaint;
                }),
            ),
            (
                "joint-baseline".to_string(),
                with(&|c| {
                    c.sampler.mode = SamplerMode::JointBaseline;
                    c.model.x0_mode = InitialStateMode::Inpaint;
                }),
            ),
        ],
        Ablation::WarmStart => {
            let mut js = vec![k, k / 2, k / 5, k / 10];
            js.dedup();
            js.into_iter()
                .map(|j| (format!("j-{j}"), with(&|c| c.sampler.warm_start_steps = j)))
                .collect()
        }
    }
}

/// The scalar an arm is judged by: normalized cost where defined, then
/// success rate, then mean return.
pub fn headline(a: &Aggregates) -> (&'static str, f64) {
    if let Some(c) = a.normalized_cost {
        ("normalized_cost", c)
    } else if let Some(s) = a.success_rate {
        ("success_rate", s)
    } else {
        ("mean_return", a.mean_return)
    }
}

fn per_episode(e: &EpisodeRecord) -> f64 {
    match (e.quadratic_cost, e.reference_cost, e.success) {
        (Some(q), Some(r), _) => q / r,
        (_, _, Some(s)) => s as u8 as f64,
        _ => e.episode_return,
    }
}

/// Mean and standard error of per-episode differences `arm - reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub arm: String,
    pub reference: String,
    pub mean: f64,
    pub std_err: f64,
}

pub fn paired_diff(arm: &RolloutReport, reference: &RolloutReport) -> Result<(f64, f64)> {
    if arm.episodes.len() != reference.episodes.len()
        || arm.episodes.iter().zip(&reference.episodes).any(|(a, b)| a.seed != b.seed)
    {
        return Err(Error::Usage("paired comparison needs the same evaluation episodes".into()));
    }
    let d: Vec<f64> = arm
        .episodes
        .iter()
        .zip(&reference.episodes)
        .map(|(a, b)| per_episode(a) - per_episode(b))
        .collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((m, (var / n).sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub config_hash: String,
    pub arms: Vec<ArmResult>,
    /// Every arm against the first.
    pub paired: Vec<PairedDiff>,
    /// Rank correlation of the swept setting with the headline metric, for dyn-noise.
    pub trend: Option<f64>,
    #[serde(skip)]
    pub reports: Vec<RolloutReport>,
}

/// Runs every arm of `ablation` on the shared evaluation episodes,
/// training or loading the models each arm needs from `store`.
pub fn run_ablation(base: &ExperimentConfig, ablation: Ablation, store: &mut ModelStore) -> Result<AblationReport> {
    base.validate()?;
    let arms = ablation_arms(base, ablation);
    let mut results = Vec::with_capacity(arms.len());
    let mut reports = Vec::with_capacity(arms.len());
    for (name, cfg) in &arms {
        log::info!("ablation {}: arm {name}", ablation.id());
        let models = store.models(cfg)?;
        let rep = run_closed_loop(cfg, &models)?;
        let (metric, value) = headline(&rep.aggregates);
        results.push(ArmResult {
            name: name.clone(),
            config_hash: cfg.hash(),
            metric: metric.into(),
            value,
            aggregates: rep.aggregates.clone(),
        });
        reports.push(rep);
    }
    let mut paired = Vec::new();
    for (i, r) in reports.iter().enumerate().skip(1) {
        let (mean, std_err) = paired_diff(r, &reports[0])?;
        paired.push(PairedDiff {
            arm: arms[i].0.clone(),
            reference: arms[0].0.clone(),
            mean,
            std_err,
        });
    }
    let trend = (ablation == Ablation::DynNoise).then(|| {
        let x: Vec<f64> = arms.iter().map(|(_, c)| c.dataset.dynamics_state_noise).collect();
        let y: Vec<f64> = results.iter().map(|r| r.value).collect();
        spearman(&x, &y)
    });
    Ok(AblationReport {
        ablation,
        config_hash: base.hash(),
        arms: results,
        paired,
        trend,
        reports,
    })
}

/// `ablation.json` with everything, `ablation.csv` with one row per arm.
pub fn emit_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_file(dir.join("ablation.json"), &to_json(report)?)?;
    let mut s = String::from("arm,metric,value,mean_return,mean_evals,success_rate,within_budget_rate\n");
    for a in &report.arms {
        let g = &a.aggregates;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            a.name,
            a.metric,
            a.value,
            g.mean_return,
            g.mean_evals,
            g.success_rate.map(|v| v.to_string()).unwrap_or_default(),
            g.within_budget_rate.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    write_file(dir.join("ablation.csv"), &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_unknown_is_usage_error() {
        for a in Ablation::ALL {
            assert_eq!(a.id().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!("nope".parse::<Ablation>(), Err(Error::Usage(_))));
    }

    #[test]
    fn step_count_arms_match_evaluation_budgets() {
        let base = ExperimentConfig::double_integrator();
        let arms = ablation_arms(&base, Ablation::StepCount);
        let names: Vec<_> = arms.iter().map(|a| a.0.as_str()).collect();
        assert_eq!(names, ["planner-25", "planner-50", "alternating-25"]);
        assert_eq!(arms[2].1.sampler.mode, SamplerMode::Alternating);
        assert_eq!(arms[2].1.sampler.steps, Some(25));
        for (_, c) in &arms {
            c.validate().unwrap();
        }
    }

    #[test]
    fn all_arms_validate() {
        for a in Ablation::ALL {
            for (name, c) in ablation_arms(&ExperimentConfig::double_integrator(), a) {
                c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}

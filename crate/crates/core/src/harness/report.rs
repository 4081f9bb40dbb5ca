use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::rollout::{RolloutReport, Timing};
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.json";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const PROFILE_FILE: &str = "profile.csv";
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Machine-readable results: the resolved config, its hash and the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub report: RolloutReport,
}

/// Everything that legitimately changes between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub timestamp: u64,
    pub timing: Timing,
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn episodes_csv(report: &RolloutReport) -> String {
    let cd = report.episodes.first().map_or(0, |e| e.cost.len());
    let mut s = String::from("index,seed,steps,return");
    for d in 0..cd {
        let _ = write!(s, ",cost{d}");
    }
    s.push_str(",quadratic_cost,reference_cost,within_budget,final_error,success,plans,evals,budget_violations\n");
    for e in &report.episodes {
        let _ = write!(s, "{},{},{},{}", e.index, e.seed, e.steps, e.episode_return);
        for c in &e.cost {
            let _ = write!(s, ",{c}");
        }
        let _ = writeln!(
            s,
            ",{},{},{},{},{},{},{},{}",
            opt(e.quadratic_cost),
            opt(e.reference_cost),
            opt(e.within_budget),
            opt(e.final_error),
            opt(e.success),
            e.plans,
            e.evals,
            e.budget_violations
        );
    }
    s
}

/// One row per horizon step: mean and standard deviation of the consistency error.
pub fn profile_csv(report: &RolloutReport) -> String {
    let mut s = String::from("t,mean_error,std_error\n");
    let n = report.episodes.len().max(1) as f64;
    for (t, m) in report.aggregates.mean_profile.iter().enumerate() {
        let var = report.episodes.iter().map(|e| (e.profile[t] - m).powi(2)).sum::<f64>() / n;
        let _ = writeln!(s, "{},{m},{}", t + 1, var.sqrt());
    }
    s
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

pub(crate) fn write_file(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes results, per-episode and per-step tables, the resolved config and
/// run timing into `dir`. Only `run_info.json` differs between identical runs.
pub fn emit_report(report: &RolloutReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let results = ResultsFile {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        report: report.clone(),
    };
    write_file(dir.join(RESULTS_FILE), &to_json(&results)?)?;
    write_file(dir.join(EPISODES_FILE), &episodes_csv(report))?;
    write_file(dir.join(PROFILE_FILE), &profile_csv(report))?;
    write_file(dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    write_file(
        dir.join(RUN_INFO_FILE),
        &to_json(&RunInfo {
            timestamp: now(),
            timing: report.timing,
        })?,
    )
}

pub fn load_results(path: &Path) -> Result<ResultsFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Confirms that the echoed config hashes to the recorded hash and that the
/// aggregates match their recomputation.
pub fn verify_results(r: &ResultsFile) -> Result<()> {
    let h = r.config.hash();
    if h != r.config_hash {
        return Err(Error::mismatch("config hash", r.config_hash.clone(), h));
    }
    r.report.check_consistency()
}

/// One sampled plan with the consistency profile of its actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub profile: Vec<f64>,
}

/// Writes `samples.json` into `dir`.
pub fn emit_samples(samples: &[SampleRecord], dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_file(dir.join("samples.json"), &to_json(&samples)?)
}

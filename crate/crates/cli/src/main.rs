use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trajdiff::checkpoint::{load_checkpoint, save_checkpoint};
use trajdiff::dataset::{check_env_hash, load_dataset, save_dataset, Dataset};
use trajdiff::denoiser::Role;
use trajdiff::harness::{
    self, build_dataset, emit_ablation, emit_report, emit_samples, load_results, run_ablation, run_closed_loop, sample_plans, train_denoiser,
    verify_results, Ablation, ExperimentConfig, ModelStore, Models,
};
use trajdiff::sampler::SamplerMode;
use trajdiff::{Error, Result};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable that relocates relative output directories.
const OUT_ROOT_VAR: &str = "TRAJDIFF_OUT_ROOT";
const ACCEPTANCE_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "trajdiff", version, about = "Diffusion planning experiments: data, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the sampler mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Alternating,
    PlannerOnly,
    CombinedScore,
    JointBaseline,
}

impl From<Mode> for SamplerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Alternating => SamplerMode::Alternating,
            Mode::PlannerOnly => SamplerMode::PlannerOnly,
            Mode::CombinedScore => SamplerMode::CombinedScore,
            Mode::JointBaseline => SamplerMode::JointBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Planner,
    Dynamics,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the expert dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also write a plain-text dump of every step.
        #[arg(long)]
        export_text: bool,
    },
    /// Train the planner and/or dynamics denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        role: RoleArg,
    },
    /// Sample first plans for the evaluation episodes.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Closed-loop evaluation with replanning.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Run an ablation study; models are trained on demand and cached.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// step-count, combined, dyn-noise, dyn-cond, params, sample-count, inpainting or warm-start.
        #[arg(long)]
        ablation: String,
    },
    /// Verify a results file and optionally gate on thresholds.
    Report {
        /// results.json written by `eval`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        max_normalized_cost: Option<f64>,
        #[arg(long)]
        min_success_rate: Option<f64>,
        #[arg(long)]
        min_within_budget_rate: Option<f64>,
    },
}

#[derive(clap::Args, Clone)]
struct Checkpoints {
    /// Planner checkpoint; defaults to `<out>/planner.ckpt`.
    #[arg(long)]
    planner: Option<PathBuf>,
    /// Dynamics checkpoint; defaults to `<out>/dynamics.ckpt`.
    #[arg(long)]
    dynamics: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(m) = common.mode {
        cfg.sampler.mode = m.into();
    }
    if cfg.out.is_relative() {
        if let Some(root) = std::env::var_os(OUT_ROOT_VAR) {
            cfg.out = Path::new(&root).join(&cfg.out);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.out.join("dataset.bin");
    if !path.exists() {
        log::info!("no dataset at {}; generating", path.display());
        return build_dataset(cfg);
    }
    let data = load_dataset(&path)?;
    if let Some(w) = check_env_hash(&data, &cfg.env.hash()) {
        log::warn!("{w}");
    }
    Ok(data)
}

fn load_models(cfg: &ExperimentConfig, ckpt: &Checkpoints) -> Result<Models> {
    let p = ckpt.planner.clone().unwrap_or_else(|| cfg.out.join("planner.ckpt"));
    let d = ckpt.dynamics.clone().unwrap_or_else(|| cfg.out.join("dynamics.ckpt"));
    let load = |path: &Path| {
        load_checkpoint(path).map_err(|e| match e {
            Error::Io(io) => Error::Usage(format!("cannot read checkpoint {}: {io} (run `trajdiff train` first)", path.display())),
            e => e,
        })
    };
    Ok(Models {
        planner: load(&p)?,
        dynamics: load(&d)?,
    })
}

fn mode_dir(cfg: &ExperimentConfig, verb: &str) -> PathBuf {
    let mode = match cfg.sampler.mode {
        SamplerMode::Alternating => "alternating",
        SamplerMode::PlannerOnly => "planner_only",
        SamplerMode::CombinedScore => "combined_score",
        SamplerMode::JointBaseline => "joint_baseline",
    };
    cfg.out.join(verb).join(mode)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::GenData { common, export_text } => {
            let cfg = resolve(&common)?;
            let data = build_dataset(&cfg)?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("dataset.bin");
            save_dataset(&data, &path)?;
            if export_text {
                data.export_text(std::io::BufWriter::new(std::fs::File::create(cfg.out.join("dataset.txt"))?))?;
            }
            write_config(&cfg, &cfg.out)?;
            println!("wrote {} episodes to {}", data.len(), path.display());
        }
        Cmd::Train { common, role } => {
            let cfg = resolve(&common)?;
            let data = dataset_for(&cfg)?;
            let roles: &[Role] = match role {
                RoleArg::Planner => &[Role::Planner],
                RoleArg::Dynamics => &[Role::Dynamics],
                RoleArg::Both => &[Role::Planner, Role::Dynamics],
            };
            std::fs::create_dir_all(&cfg.out)?;
            for &r in roles {
                let steps = cfg.training.steps;
                let ck = train_denoiser(&cfg, &data, r, &mut harness::models::log_progress(r, steps, (steps / 20).max(1)))?;
                let path = cfg.out.join(format!("{r}.ckpt"));
                save_checkpoint(&ck.meta, &ck.params, &ck.ema, &path)?;
                println!("wrote {}", path.display());
            }
            write_config(&cfg, &cfg.out)?;
        }
        Cmd::Sample { common, ckpt } => {
            let cfg = resolve(&common)?;
            let models = load_models(&cfg, &ckpt)?;
            let samples = sample_plans(&cfg, &models)?;
            let dir = mode_dir(&cfg, "sample");
            emit_samples(&samples, &dir)?;
            write_config(&cfg, &dir)?;
            println!("wrote {} plans to {}", samples.len(), dir.display());
        }
        Cmd::Eval { common, ckpt } => {
            let cfg = resolve(&common)?;
            let models = load_models(&cfg, &ckpt)?;
            let report = run_closed_loop(&cfg, &models)?;
            let dir = mode_dir(&cfg, "eval");
            emit_report(&report, &cfg, &dir)?;
            let a = &report.aggregates;
            println!("{} episodes, mean return {:.4}", a.episodes, a.mean_return);
            if let Some(c) = a.normalized_cost {
                println!("normalized cost {c:.4}");
            }
            if let Some(s) = a.success_rate {
                println!("success rate {s:.4}");
            }
            if let Some(b) = a.within_budget_rate {
                println!("within budget {b:.4}");
            }
            println!("results in {}", dir.display());
        }
        Cmd::Ablate { common, ablation } => {
            let ablation: Ablation = ablation.parse()?;
            let cfg = resolve(&common)?;
            let mut store = ModelStore::new(cfg.out.join("models"));
            let rep = run_ablation(&cfg, ablation, &mut store)?;
            let dir = cfg.out.join("ablate").join(ablation.id());
            emit_ablation(&rep, &dir)?;
            write_config(&cfg, &dir)?;
            for a in &rep.arms {
                println!("{:<20} {} {:.4}", a.name, a.metric, a.value);
            }
            if let Some(t) = rep.trend {
                println!("rank correlation {t:.3}");
            }
        }
        Cmd::Report {
            results,
            max_normalized_cost,
            min_success_rate,
            min_within_budget_rate,
        } => {
            let r = load_results(&results)?;
            verify_results(&r)?;
            let a = &r.report.aggregates;
            println!("config {} ({} episodes, {:?})", &r.config_hash[..16], a.episodes, r.report.mode);
            let mut ok = true;
            let mut gate = |name: &str, value: Option<f64>, bound: Option<f64>, upper: bool| {
                if let Some(v) = value {
                    println!("{name} {v:.4}");
                }
                if let Some(b) = bound {
                    let pass = value.is_some_and(|v| if upper { v <= b } else { v >= b });
                    println!("{} {name} {} {b}", if pass { "PASS" } else { "FAIL" }, if upper { "<=" } else { ">=" });
                    ok &= pass;
                }
            };
            gate("normalized_cost", a.normalized_cost, max_normalized_cost, true);
            gate("success_rate", a.success_rate, min_success_rate, false);
            gate("within_budget_rate", a.within_budget_rate, min_within_budget_rate, false);
            if !ok {
                return Ok(ACCEPTANCE_FAILURE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

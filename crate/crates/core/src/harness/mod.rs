//! Experiment orchestration: configs, training, closed-loop evaluation,
//! ablations and report files.

pub mod ablation;
pub mod config;
pub mod models;
pub mod report;
pub mod rollout;

pub use ablation::{ablation_arms, emit_ablation, run_ablation, Ablation, AblationReport};
pub use config::{eval_seeds, ExperimentConfig, RankerKind, ScoreModels};
pub use models::{build_dataset, train_denoiser, ModelStore, Models};
pub use report::{emit_report, emit_samples, load_results, verify_results, ResultsFile, SampleRecord};
pub use rollout::{eval_tasks, run_closed_loop, sample_plans, Aggregates, EpisodeRecord, RolloutReport};

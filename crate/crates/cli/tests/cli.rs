use std::path::Path;
use std::process::{Command, Output};

use trajdiff::denoiser::ArchConfig;
use trajdiff::harness::ExperimentConfig;
use trajdiff::schedule::ScheduleParams;

fn trajdiff(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajdiff"))
        .args(args)
        .env("TRAJDIFF_OUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::double_integrator();
    c.out = "run".into();
    c.dataset.episodes = 12;
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
    c.training.steps = 4;
    c.training.batch_size = 4;
    c.schedule = ScheduleParams::default_for_steps(4);
    c.sampler.warm_start_steps = 4;
    c.eval.episodes = 2;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&trajdiff(&["--help"], dir.path())), 0);
    assert_eq!(code(&trajdiff(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&trajdiff(&["eval"], dir.path())), 1);
    let cfg = tiny_config(dir.path());
    let o = trajdiff(&["ablate", "--config", &cfg, "--ablation", "nope"], dir.path());
    assert_eq!(code(&o), 1);
    let o = trajdiff(&["eval", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 1, "missing checkpoints: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |args: &[&str]| {
        let o = trajdiff(args, dir.path());
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["gen-data", "--config", &cfg]);
    let out = dir.path().join("run");
    assert!(out.join("dataset.bin").exists());
    run(&["train", "--config", &cfg]);
    assert!(out.join("planner.ckpt").exists() && out.join("dynamics.ckpt").exists());
    run(&["sample", "--config", &cfg, "--mode", "planner-only"]);
    assert!(out.join("sample/planner_only/samples.json").exists());
    run(&["eval", "--config", &cfg, "--mode", "alternating"]);
    let results = out.join("eval/alternating/results.json");
    let results = results.to_str().unwrap();
    run(&["report", "--results", results, "--max-normalized-cost", "1e12"]);

    let o = trajdiff(&["report", "--results", results, "--max-normalized-cost", "0"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

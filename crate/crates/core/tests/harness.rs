use std::fs;

use trajdiff::denoiser::ArchConfig;
use trajdiff::harness::report::{PROFILE_FILE, RESULTS_FILE, RUN_INFO_FILE};
use trajdiff::harness::{
    emit_report, load_results, run_closed_loop, sample_plans, verify_results, ExperimentConfig, ModelStore, Models, RankerKind,
};
use trajdiff::schedule::ScheduleParams;
use trajdiff::sampler::SamplerMode;
use trajdiff::Error;

fn shrink(mut c: ExperimentConfig) -> ExperimentConfig {
    c.dataset.episodes = 16;
    c.dataset.random_episodes = 0;
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
    c.training.steps = 5;
    c.training.batch_size = 8;
    c.schedule = ScheduleParams::default_for_steps(4);
    c.sampler.warm_start_steps = 4;
    c.eval.episodes = 3;
    c.eval.chunk = 4;
    c
}

fn models(c: &ExperimentConfig, dir: &std::path::Path) -> Models {
    ModelStore::new(dir).models(c).unwrap()
}

#[test]
fn open_loop_executes_a_single_plan() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = shrink(ExperimentConfig::double_integrator());
    c.eval.open_loop = true;
    c.eval.chunk = c.model.horizon;
    let m = models(&c, dir.path());
    let r = run_closed_loop(&c, &m).unwrap();
    for e in &r.episodes {
        assert_eq!(e.plans, 1);
        assert_eq!(e.steps, c.model.horizon);
    }
}

#[test]
fn single_candidate_ignores_the_ranker() {
    let dir = tempfile::tempdir().unwrap();
    let c = shrink(ExperimentConfig::double_integrator());
    let m = models(&c, dir.path());
    let first = run_closed_loop(&c, &m).unwrap();
    let mut d = c.clone();
    d.ranker.kind = RankerKind::Return;
    let ret = run_closed_loop(&d, &m).unwrap();
    assert_eq!(first.episodes, ret.episodes);
}

#[test]
fn budget_flags_agree_with_realized_cost() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = shrink(ExperimentConfig::constrained());
    c.ranker.candidates = 4;
    let m = models(&c, dir.path());
    let r = run_closed_loop(&c, &m).unwrap();
    let budget = c.budget().unwrap();
    let mut inside = 0;
    for e in &r.episodes {
        let ok = e.cost.iter().all(|&x| x <= budget);
        assert_eq!(e.within_budget, Some(ok));
        inside += ok as usize;
    }
    let rate = r.aggregates.within_budget_rate.unwrap();
    assert!((rate - inside as f64 / r.episodes.len() as f64).abs() < 1e-12);
}

#[test]
fn emitted_report_echoes_config_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let c = shrink(ExperimentConfig::double_integrator());
    let m = models(&c, &dir.path().join("models"));
    let r = run_closed_loop(&c, &m).unwrap();
    let out = dir.path().join("eval");
    emit_report(&r, &c, &out).unwrap();

    let loaded = load_results(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(loaded.config_hash, c.hash());
    assert_eq!(loaded.config, c);
    verify_results(&loaded).unwrap();
    let profile = fs::read_to_string(out.join(PROFILE_FILE)).unwrap();
    assert_eq!(profile.lines().count(), c.model.horizon + 1);

    let mut tampered = loaded.clone();
    tampered.report.aggregates.mean_return += 1.0;
    assert!(verify_results(&tampered).is_err());
    let mut rehashed = loaded;
    rehashed.config.seed += 1;
    assert!(matches!(verify_results(&rehashed), Err(Error::Mismatch { .. })));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = shrink(ExperimentConfig::double_integrator());
    c.ranker.candidates = 3;
    c.ranker.kind = RankerKind::Return;
    let m = models(&c, &dir.path().join("models"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    emit_report(&run_closed_loop(&c, &m).unwrap(), &c, &a).unwrap();
    let m = models(&c, &dir.path().join("models"));
    emit_report(&run_closed_loop(&c, &m).unwrap(), &c, &b).unwrap();
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == RUN_INFO_FILE {
            continue;
        }
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn checkpoints_for_another_task_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = shrink(ExperimentConfig::double_integrator());
    let m = models(&c, dir.path());
    let mut other = shrink(ExperimentConfig::constrained());
    other.ranker.kind = RankerKind::First;
    other.ranker.candidates = 1;
    assert!(matches!(run_closed_loop(&other, &m), Err(Error::Config(_))));

    let mut wrong_dims = c.clone();
    wrong_dims.model.horizon = 4;
    wrong_dims.eval.chunk = 2;
    assert!(matches!(run_closed_loop(&wrong_dims, &m), Err(Error::Config(_))));
}

#[test]
fn sampled_plans_cover_the_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = shrink(ExperimentConfig::double_integrator());
    c.sampler.mode = SamplerMode::Alternating;
    let m = models(&c, dir.path());
    let s = sample_plans(&c, &m).unwrap();
    assert_eq!(s.len(), c.eval.episodes);
    for p in &s {
        assert_eq!(p.profile.len(), c.model.horizon);
        assert_eq!(p.states.len(), c.model.horizon * p.x0.len());
        assert!(p.profile.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn shipped_configs_match_presets() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["double_integrator", "bicycle", "constrained_integrator"] {
        let loaded = ExperimentConfig::load(&root.join(format!("{name}.toml"))).unwrap();
        assert_eq!(loaded, ExperimentConfig::preset(name).unwrap(), "{name}");
    }
}

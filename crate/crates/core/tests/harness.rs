use std::path::{Path, PathBuf};

use trebi_core::harness::{
    self, read_episodes_csv, read_stats_csv, read_steps, summarize, ExperimentConfig, EPISODES_CSV_HEADER,
    STATS_CSV_HEADER,
};
use trebi_core::planner::PlanMode;
use trebi_core::Error;

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        env: "grid-budget".into(),
        seed: 3,
        out: out.to_path_buf(),
        ..Default::default()
    };
    cfg.data.episodes = 30;
    cfg.model.horizon = 2;
    cfg.model.diffusion_steps = 4;
    cfg.model.denoiser_hidden = vec![16];
    cfg.model.guide_hidden = vec![16];
    cfg.model.diffusion.steps = 20;
    cfg.model.guides.steps = 20;
    cfg.planner.candidates = 3;
    cfg.sweep.budget_ratios = vec![0.5, 1.0];
    cfg.sweep.episodes = 2;
    cfg.sweep.seeds = vec![0, 1];
    cfg.sweep.calibration_episodes = 2;
    cfg.sweep.b_max = Some(2.0);
    cfg.sweep.baselines = vec![PlanMode::UnconstrainedGuided, PlanMode::BehaviorSample];
    cfg
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn pipeline_exports_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (results, paths) = harness::run_pipeline(&cfg).unwrap();

    assert_eq!(results.b_max, 2.0);
    assert_eq!(results.budgets, vec![(0.5, 1.0), (1.0, 2.0)]);
    assert_eq!(first_line(&paths.stats), STATS_CSV_HEADER);
    assert_eq!(first_line(&paths.episodes), EPISODES_CSV_HEADER);

    // 3 planners x 2 ratios x 3 metrics.
    let rows = read_stats_csv(&paths.stats).unwrap();
    assert_eq!(rows, results.stats);
    assert_eq!(rows.len(), 18);
    assert!(rows.iter().all(|r| r.count == 4 && r.config_hash == cfg.config_hash() && r.seed_set == "0;1"));

    // Each planner scores 2 seeds x 2 episodes against each budget.
    let episodes = read_episodes_csv(&paths.episodes).unwrap();
    assert_eq!(episodes, results.episodes);
    assert_eq!(episodes.len(), 3 * 2 * 4);
    for e in &episodes {
        assert_eq!(e.violation == 1, e.cost > e.budget);
        assert!((e.normalized_cost - e.cost / e.budget).abs() < 1e-12);
    }

    // Baselines run once per (seed, episode) and are scored for both budgets.
    for planner in ["unconstrained-guided", "behavior-sample"] {
        for seed in [0, 1] {
            for ep in 0..2 {
                let costs: Vec<f64> = episodes
                    .iter()
                    .filter(|e| e.planner == planner && e.seed == seed && e.episode == ep)
                    .map(|e| e.cost)
                    .collect();
                assert_eq!(costs.len(), 2);
                assert_eq!(costs[0], costs[1]);
            }
        }
    }

    let steps = read_steps(paths.steps.as_ref().unwrap()).unwrap();
    assert_eq!(steps.len(), (2 * 2 + 2 * 2) * 2 * 4);

    let report = summarize(&rows);
    assert_eq!(report.len(), 2);
    assert!(report.iter().all(|l| l.baseline_violation_rate.is_some()));

    let stored: harness::SweepResults =
        serde_json::from_str(&std::fs::read_to_string(&paths.results).unwrap()).unwrap();
    assert_eq!(stored, results);
}

#[test]
fn reruns_reuse_artifacts_and_reproduce_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (first, _) = harness::run_pipeline(&cfg).unwrap();
    let (second, _) = harness::run_pipeline(&cfg).unwrap();
    assert_eq!(first, second);
}

#[test]
fn config_hash_tracks_settings_not_paths() {
    let a = tiny_config(Path::new("/tmp/a"));
    let mut b = tiny_config(Path::new("/tmp/b"));
    b.artifacts = Some(PathBuf::from("/elsewhere"));
    assert_eq!(a.config_hash(), b.config_hash());
    b.planner.guide.n = 5.0;
    assert_ne!(a.config_hash(), b.config_hash());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config(Path::new("runs/x"));
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_config(Path::new("runs/x"));
    let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
        Box::new(|c| c.env = "nowhere".into()),
        Box::new(|c| c.sweep.budget_ratios = vec![]),
        Box::new(|c| c.sweep.budget_ratios = vec![1.5]),
        Box::new(|c| c.sweep.seeds.clear()),
        Box::new(|c| c.sweep.b_max = Some(-1.0)),
        Box::new(|c| c.sweep.baselines = vec![PlanMode::Budgeted]),
        Box::new(|c| c.planner.replan_interval = 3),
        Box::new(|c| c.planner.candidates = 0),
    ];
    for (k, mutate) in cases.iter().enumerate() {
        let mut cfg = base.clone();
        mutate(&mut cfg);
        assert!(cfg.validate().is_err(), "case {k} accepted");
    }
    assert!(matches!(
        ExperimentConfig::from_toml_str("unknown_key = 1"),
        Err(Error::Config(_))
    ));
}

#[test]
fn dataset_from_another_environment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    harness::collect(&cfg).unwrap();
    let mut other = cfg.clone();
    other.env = "grid-budget-slip".into();
    assert!(matches!(harness::load_or_collect(&other), Err(Error::Artifact { .. })));
    let ds = harness::load_or_collect(&cfg).unwrap();
    assert!(matches!(harness::train(&other, &ds), Err(Error::Config(_))));
}

#[test]
fn explicit_dataset_path_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.data.path = Some(dir.path().join("missing.jsonl"));
    let err = harness::load_or_collect(&cfg).unwrap_err();
    assert!(err.to_string().contains("trebi collect"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

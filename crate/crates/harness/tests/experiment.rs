use std::fs;

use feddom_core::fl::{Strategy, StrategyConfig};
use feddom_harness::config::{ExperimentConfig, PartitionSpec};
use feddom_harness::experiment::{run_experiment, RunOptions, CHECKPOINT_FILE, RESULTS_FILE, ROUNDS_FILE, TRACE_FILE};

fn config(dir: &std::path::Path) -> ExperimentConfig {
    let mut s = StrategyConfig::new(Strategy::moon());
    s.lr = 0.5;
    s.rounds = 4;
    s.batch_size = 4;
    let mut cfg = ExperimentConfig::new(s);
    cfg.seed = 6;
    cfg.partition = PartitionSpec::Moderate { scale: 0.01 };
    cfg.eval.eval_every = 1;
    cfg.eval.snr_points_db = vec![1.0, 10.0];
    cfg.eval.max_test_images = Some(2);
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn outputs(dir: &std::path::Path) -> Vec<Vec<u8>> {
    [RESULTS_FILE, ROUNDS_FILE, TRACE_FILE].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}

#[test]
fn interrupted_run_resumes_to_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run_experiment(&config(a.path()), &RunOptions::default()).unwrap();
    assert_eq!(full.rounds_completed, 4);

    let mut cfg = config(b.path());
    cfg.checkpoint_every = Some(2);
    let partial = run_experiment(&cfg, &RunOptions { stop_after: Some(3), ..RunOptions::default() }).unwrap();
    assert_eq!(partial.rounds_completed, 3);
    assert!(b.path().join(CHECKPOINT_FILE).exists());
    let resumed = run_experiment(&cfg, &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(resumed.rounds_completed, 4);
    assert_eq!(outputs(a.path()), outputs(b.path()));
    assert_eq!(resumed.rows, full.rows);
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_experiment(&cfg, &RunOptions { stop_after: Some(1), ..RunOptions::default() }).unwrap();
    let mut changed = cfg.clone();
    changed.seed = 7;
    let err = run_experiment(&changed, &RunOptions { resume: true, ..RunOptions::default() }).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("run.json"), "{err}");
}

#[test]
fn worker_threads_do_not_change_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config(a.path()), &RunOptions::default()).unwrap();
    let mut cfg = config(b.path());
    cfg.threads = 3;
    run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(outputs(a.path()), outputs(b.path()));
}

use std::fs;
use std::path::Path;

use feddom_harness::cli::main_with_args;
use feddom_harness::config::ExperimentConfig;
use feddom_harness::experiment::{RESULTS_FILE, ROUNDS_FILE};
use feddom_harness::results::{read_rows, ResultRow, RoundRow};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("feddom").chain(args.iter().copied()))
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = r#"{
  "schema": "feddom-config/1",
  "seed": 3,
  "partition": {"kind": "moderate", "scale": 0.01},
  "strategy": {"kind": "feddom", "lr": 0.5, "rounds": 1, "batch_size": 4},
  "eval": {"snr_points_db": [1, 7, 13], "eval_every": 1, "max_test_images": 2},
  "output_dir": "out"
}"#;

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let err = ExperimentConfig::load(Path::new("/nonexistent/exp.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("/nonexistent/exp.json"), "{err}");
    assert_eq!(run(&["run", "--config", "/nonexistent/exp.json"]), 2);
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"schema": "feddom-config/2", "strategy": {"kind": "fedavg"}}"#,
        r#"{"schema": "feddom-config/1", "strategy": {"kind": "fedavg"}, "colour": true}"#,
        r#"{"schema": "feddom-config/1", "strategy": {"kind": "feddom", "lambda": -1}}"#,
        r#"{"schema": "feddom-config/1", "strategy": {"kind": "fedavg"}, "eval": {"snr_points_db": []}}"#,
        r#"{"schema": "feddom-config/1"}"#,
        "not json",
    ];
    for body in cases {
        let path = write_config(dir.path(), body);
        let err = ExperimentConfig::load(Path::new(&path)).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{body}");
        assert!(err.to_string().contains("exp.json"), "{err}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["run"]), 1);
    assert_eq!(run(&["gen-data"]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn single_round_run_writes_one_row_per_domain_and_snr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(run(&["run", "--config", &cfg]), 0);
    let out = dir.path().join("out");
    let rows: Vec<ResultRow> = read_rows(&out.join(RESULTS_FILE)).unwrap();
    assert_eq!(rows.len(), 4 * 3);
    assert!(rows.iter().all(|r| r.round == 1 && r.strategy == "FedDoM" && r.psnr.is_finite() && (0.0..=1.0).contains(&r.ms_ssim)));
    let rounds: Vec<RoundRow> = read_rows(&out.join(ROUNDS_FILE)).unwrap();
    assert_eq!(rounds.len(), 1);
    assert_eq!(rounds[0].clients, 10);
    assert!(out.join("model.fdm").exists() && out.join("run.json").exists());

    assert_eq!(run(&["eval", "--config", &cfg, "--checkpoint", &out.join("model.fdm").to_string_lossy()]), 0);
    let evaluated: Vec<ResultRow> = read_rows(&out.join("eval.csv")).unwrap();
    let psnr = |rs: &[ResultRow]| rs.iter().map(|r| r.psnr).collect::<Vec<_>>();
    assert_eq!(psnr(&evaluated), psnr(&rows));
}

#[test]
fn gen_data_then_run_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["gen-data", "--out", &data.to_string_lossy(), "--count", "20", "--size", "32", "32"]), 0);
    assert_eq!(fs::read_dir(data.join("sketch")).unwrap().count(), 20);
    let body = TINY.replace(r#""seed": 3,"#, r#""seed": 3, "dataset": {"manifest": "data/manifest.json"},"#).replace(
        r#"{"kind": "moderate", "scale": 0.01}"#,
        r#"{"kind": "explicit", "clients": [{"domain": "photo", "count": 3}, {"domain": "sketch", "count": 5}]}"#,
    );
    let cfg = write_config(dir.path(), &body);
    assert_eq!(run(&["run", "--config", &cfg]), 0);
    let rows: Vec<RoundRow> = read_rows(&dir.path().join("out").join(ROUNDS_FILE)).unwrap();
    assert_eq!(rows[0].clients, 2);
}

#[test]
fn toy_analysis_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["analyze", "--toy", "--out", &dir.path().to_string_lossy()]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert!(v["satisfied_fraction"].as_f64().unwrap() >= 0.99);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{e}"));
            cfg.manifest().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

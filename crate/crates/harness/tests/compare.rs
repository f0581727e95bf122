use std::fs;

use feddom_core::fl::{Strategy, StrategyConfig};
use feddom_harness::commands;
use feddom_harness::compare::{emit_comparison, AVG_OF_ALL};
use feddom_harness::config::{ExperimentConfig, PartitionSpec};
use feddom_harness::results::ResultRow;

fn row(round: usize, strategy: &str, domain: &str, snr_db: f64, psnr: f64, ms_ssim: f64) -> ResultRow {
    ResultRow { round, strategy: strategy.into(), domain: domain.into(), snr_db, psnr, ms_ssim, mean_loss: 0.0, param_variance: 0.0 }
}

fn order() -> Vec<String> {
    ["photo", "art", "cartoon", "sketch"].iter().map(|d| d.to_string()).collect()
}

#[test]
fn table_averages_last_round_over_snr_then_domains() {
    let rows = vec![
        row(10, "FedAvg", "sketch", 1.0, 100.0, 0.0),
        row(20, "FedAvg", "sketch", 1.0, 20.0, 0.8),
        row(20, "FedAvg", "sketch", 13.0, 30.0, 0.9),
        row(20, "FedAvg", "photo", 1.0, 10.0, 0.5),
        row(20, "FedAvg", "photo", 13.0, 14.0, 0.7),
        row(20, "FedDoM", "photo", 1.0, 12.0, 0.6),
    ];
    let cmp = emit_comparison(&rows, &order(), None);
    assert_eq!(cmp.domains, vec!["photo", "sketch"]);
    let avg = cmp.summary("FedAvg").unwrap();
    assert_eq!(avg.round, 20);
    let photo = avg.cells[0].as_ref().unwrap();
    let sketch = avg.cells[1].as_ref().unwrap();
    assert_eq!((photo.psnr, sketch.psnr), (12.0, 25.0));
    assert!((photo.ms_ssim - 0.6).abs() < 1e-12 && (sketch.ms_ssim - 0.85).abs() < 1e-12);
    assert_eq!(avg.average.psnr, 18.5);
    let dom = cmp.summary("FedDoM").unwrap();
    assert!(dom.cells[1].is_none());
    assert_eq!(dom.average.psnr, 12.0);

    let at13 = emit_comparison(&rows, &order(), Some(13.0));
    assert_eq!(at13.summary("FedAvg").unwrap().average.psnr, 22.0);
}

#[test]
fn unknown_domains_follow_declared_ones_alphabetically() {
    let rows = vec![row(1, "A", "zebra", 1.0, 1.0, 0.1), row(1, "A", "sketch", 1.0, 2.0, 0.2), row(1, "A", "mural", 1.0, 3.0, 0.3)];
    let cmp = emit_comparison(&rows, &order(), None);
    assert_eq!(cmp.domains, vec!["sketch", "mural", "zebra"]);
    let header = cmp.header();
    assert_eq!(header[2], "sketch PSNR");
    assert_eq!(header.last().unwrap(), &format!("{AVG_OF_ALL} MS-SSIM"));
    let csv = cmp.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(cmp.to_text().starts_with("Strategy"));
}

#[test]
fn compare_writes_one_run_per_strategy_and_a_merged_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = StrategyConfig::new(Strategy::feddom());
    s.lr = 0.5;
    s.rounds = 2;
    s.batch_size = 4;
    let mut cfg = ExperimentConfig::new(s);
    cfg.partition = PartitionSpec::HighSkew { scale: 0.02 };
    cfg.eval.snr_points_db = vec![4.0];
    cfg.eval.max_test_images = Some(2);
    cfg.output_dir = dir.path().to_path_buf();
    let out = commands::compare(&cfg, None, false).unwrap();
    let names: Vec<&str> = out.comparison.rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, vec!["FedAvg", "FedProx", "MOON", "FedDoM"]);
    for sub in ["fedavg", "fedprox", "moon", "feddom"] {
        assert!(dir.path().join(sub).join("results.csv").exists(), "{sub}");
    }
    let merged = fs::read_to_string(dir.path().join("merged.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 4 * 4);
    assert!(dir.path().join("comparison.csv").exists() && dir.path().join("comparison.txt").exists());

    // Same seed, same runs: a second comparison reproduces the table exactly.
    let again_dir = tempfile::tempdir().unwrap();
    let again = commands::compare(&ExperimentConfig { output_dir: again_dir.path().to_path_buf(), ..cfg }, None, false).unwrap();
    assert_eq!(again.comparison, out.comparison);
}

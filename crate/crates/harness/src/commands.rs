//! The experiment recipes behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use feddom_core::analysis::{self, Diagnostics, JsccProbe, QuadraticToy};
use feddom_core::data::{ppm, synthetic, DatasetManifest, DomainEntry, DomainSource};
use feddom_core::fl::{self, Strategy, StrategyConfig};
use feddom_core::{rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::compare::{emit_comparison, Comparison};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, RunOptions, RunSummary, MODEL_FILE, TRACE_FILE};
use crate::results::{self, CsvAppender, ResultRow, TraceCsvRow, RESULTS_HEADER};

pub const SWEEP_LAMBDAS: [f64; 3] = [1.0, 1.5, 2.0];

/// Writes `count` images per built-in domain as PPM files plus `manifest.json`.
pub fn gen_data(out: &Path, count: usize, size: [usize; 2], seed: u64) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Usage("--count must be >= 1".into()));
    }
    let [h, w] = size;
    let mut domains = Vec::new();
    for &d in synthetic::BUILTIN_DOMAINS.iter() {
        let dir = out.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..count {
            let img = synthetic::generate(d, h, w, seed, i as u64)?;
            ppm::write(&dir.join(format!("{i:05}.ppm")), &img, h, w)?;
        }
        domains.push(DomainEntry { name: d.to_string(), source: DomainSource::Directory { path: PathBuf::from(d) } });
    }
    let manifest = DatasetManifest { image_size: size, domains };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_comparison(dir: &Path, cmp: &Comparison, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, cmp.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, cmp.to_text()).map_err(|e| Error::io(&txt, e))
}

fn merged_rows(runs: &[RunSummary]) -> Vec<ResultRow> {
    runs.iter().flat_map(|r| r.rows.iter().cloned()).collect()
}

fn write_merged(path: &Path, rows: &[ResultRow]) -> Result<()> {
    CsvAppender::create(path, &RESULTS_HEADER)?.write(rows)
}

/// The four strategies compared, sharing every setting except the kind.
pub fn comparison_strategies(base: &StrategyConfig) -> Vec<StrategyConfig> {
    let lambda = match base.kind {
        Strategy::FedDom { lambda, .. } => lambda,
        _ => fl::DEFAULT_LAMBDA,
    };
    [Strategy::fedavg(), Strategy::fedprox(), Strategy::moon(), Strategy::FedDom { lambda, domain_aware: true }]
        .into_iter()
        .map(|kind| StrategyConfig { kind, ..base.clone() })
        .collect()
}

pub struct CompareOutcome {
    pub runs: Vec<RunSummary>,
    pub comparison: Comparison,
}

/// Runs FedAvg, FedProx, MOON and FedDoM with shared seeds, each into its own
/// subdirectory of the output directory, then writes the merged rows and the table.
pub fn compare(cfg: &ExperimentConfig, snr_db: Option<f64>, resume: bool) -> Result<CompareOutcome> {
    let mut runs = Vec::new();
    for strategy in comparison_strategies(&cfg.strategy) {
        let label = strategy.kind.label();
        let run_cfg = ExperimentConfig { strategy, output_dir: cfg.output_dir.join(label.to_lowercase()), ..cfg.clone() };
        runs.push(experiment::run_experiment(&run_cfg, &RunOptions { resume, ..RunOptions::default() })?);
    }
    let rows = merged_rows(&runs);
    write_merged(&cfg.output_dir.join("merged.csv"), &rows)?;
    let domains = domain_order(cfg)?;
    let comparison = emit_comparison(&rows, &domains, snr_db);
    write_comparison(&cfg.output_dir, &comparison, "comparison")?;
    Ok(CompareOutcome { runs, comparison })
}

fn domain_order(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(cfg.manifest()?.domains.into_iter().map(|d| d.name).collect())
}

pub fn lambda_label(lambda: f64) -> String {
    format!("FedDoM (lambda={lambda:.1})")
}

/// FedDoM at each alignment weight of the sensitivity sweep.
pub fn sweep_lambda(cfg: &ExperimentConfig, snr_db: Option<f64>, resume: bool) -> Result<CompareOutcome> {
    let domain_aware = match cfg.strategy.kind {
        Strategy::FedDom { domain_aware, .. } => domain_aware,
        _ => true,
    };
    let mut runs = Vec::new();
    for lambda in SWEEP_LAMBDAS {
        let strategy = StrategyConfig { kind: Strategy::FedDom { lambda, domain_aware }, ..cfg.strategy.clone() };
        let run_cfg = ExperimentConfig { strategy, output_dir: cfg.output_dir.join(format!("lambda-{lambda:.1}")), ..cfg.clone() };
        let opts = RunOptions { resume, label: Some(lambda_label(lambda)), ..RunOptions::default() };
        runs.push(experiment::run_experiment(&run_cfg, &opts)?);
    }
    let rows = merged_rows(&runs);
    write_merged(&cfg.output_dir.join("merged.csv"), &rows)?;
    let comparison = emit_comparison(&rows, &domain_order(cfg)?, snr_db);
    write_comparison(&cfg.output_dir, &comparison, "lambda_comparison")?;
    Ok(CompareOutcome { runs, comparison })
}

/// Settings for constant estimation in `analyze`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub probes: usize,
    pub radius: f64,
    pub batches: usize,
    pub batch_size: usize,
    /// Train images per client used for the estimates.
    pub images_per_client: usize,
    pub snr_db: f64,
    pub tolerance: f64,
    pub window: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { probes: 8, radius: 1e-3, batches: 8, batch_size: 4, images_per_client: 2, snr_db: 5.0, tolerance: 1e-9, window: 3 }
    }
}

/// Convergence diagnostics for a finished run traced with `trace_half_step`.
pub fn analyze(cfg: &ExperimentConfig, opts: &AnalyzeOptions) -> Result<Diagnostics> {
    let dir = &cfg.output_dir;
    let trace_path = dir.join(TRACE_FILE);
    if !trace_path.exists() {
        return Err(Error::config(&trace_path, "no trace found; run the experiment first"));
    }
    let rows: Vec<TraceCsvRow> = results::read_rows(&trace_path)?;
    let trace: Vec<fl::TraceRow> = rows
        .into_iter()
        .map(|r| fl::TraceRow {
            round: r.round,
            client: r.client,
            step: r.step,
            loss: r.loss,
            grad_norm_sq: r.grad_norm_sq,
            eta: r.eta,
            lambda: r.lambda,
            half_step_loss: r.half_step_loss,
        })
        .collect();
    let rounds = analysis::round_traces(&trace)?;
    if rounds.is_empty() {
        return Err(Error::config(&trace_path, "trace has no half-step losses; rerun with \"trace_half_step\": true"));
    }
    let prepared = experiment::prepare(cfg)?;
    let (params, _) = experiment::load_model_params(&prepared.model, &dir.join(MODEL_FILE))?;
    let params = params.cast::<f64>();
    let images: Vec<Tensor<f64>> =
        prepared.clients.iter().flat_map(|c| c.images.iter().take(opts.images_per_client).map(|t| t.cast::<f64>())).collect();
    let probe = JsccProbe {
        model: &prepared.model,
        template: &params,
        channel: &cfg.channel,
        images: &images,
        snr_db: opts.snr_db,
        seed: cfg.seed,
    };
    let mut r = rng::stream(cfg.seed, &[rng::label_key("analyze")]);
    let est = probe.estimate(opts.probes, opts.radius, opts.batches, opts.batch_size, &mut r)?;
    let diag = analysis::diagnose(&rounds, &est, opts.tolerance, opts.window)?;
    write_diagnostics(dir, &diag)?;
    Ok(diag)
}

/// Diagnostics for the quadratic toy federation with analytic constants.
pub fn analyze_toy(out: &Path, seed: u64) -> Result<Diagnostics> {
    let toy = QuadraticToy::standard(8, 10, seed);
    let eta = 1.0 / toy.l1();
    let (rounds, _) = toy.run(&[4.0; 8], eta, 5, 100, seed);
    let diag = analysis::diagnose(&toy.traces(&rounds, eta), &toy.analytic_estimates(), 1e-12, 3)?;
    write_diagnostics(out, &diag)?;
    Ok(diag)
}

fn write_diagnostics(dir: &Path, diag: &Diagnostics) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("diagnostics.json");
    let text = serde_json::to_string_pretty(diag).map_err(|e| Error::config(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Metrics of a saved model over the evaluation SNR grid, written to `eval.csv`.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<ResultRow>> {
    let prepared = experiment::prepare(cfg)?;
    let (params, round) = experiment::load_model_params(&prepared.model, checkpoint)?;
    let rows = experiment::evaluate_rows(cfg, &prepared, &params, round.unwrap_or(0), cfg.strategy.kind.label(), f64::NAN, f64::NAN)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_merged(&cfg.output_dir.join("eval.csv"), &rows)?;
    Ok(rows)
}

//! Building a federation from a config and driving it round by round, with
//! incremental CSV output and checkpoint/resume.

use std::fs;
use std::path::{Path, PathBuf};

use feddom_core::channel::ChannelConfig;
use feddom_core::checkpoint;
use feddom_core::data::{self, ClientDataset, DatasetManifest, DomainSource};
use feddom_core::eval;
use feddom_core::fl::{Federation, RoundReport};
use feddom_core::model::Jscc;
use feddom_core::params::ModelParams;
use feddom_core::rng;
use feddom_core::{Tensor, TrainScalar};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Plan};
use crate::error::{Error, Result};
use crate::results::{self, CsvAppender, ResultRow, RoundRow, TraceCsvRow, RESULTS_HEADER, RESULTS_SCHEMA, ROUNDS_HEADER, TRACE_HEADER};

pub const RESULTS_FILE: &str = "results.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fdm";
pub const MODEL_FILE: &str = "model.fdm";
pub const RUN_FILE: &str = "run.json";

/// Data ready for training and evaluation.
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub model: Jscc,
    pub clients: Vec<ClientDataset<TrainScalar>>,
    /// Held-out images per domain, in manifest order.
    pub tests: Vec<(String, Vec<Tensor<TrainScalar>>)>,
}

impl Prepared {
    pub fn domains(&self) -> Vec<String> {
        self.tests.iter().map(|(d, _)| d.clone()).collect()
    }
}

/// Loads the domain pools used by the partition and carves out client datasets.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let manifest = cfg.manifest()?;
    let model = Jscc::new(cfg.model.clone())?;
    let [h, w] = manifest.image_size;
    let [_, mh, mw] = cfg.model.image_shape;
    if (h, w) != (mh, mw) {
        return Err(feddom_core::Error::Config(format!("dataset images are {h}x{w} but the model expects {mh}x{mw}")).into());
    }
    let plan = cfg.partition.plan()?;
    let mut pools = Vec::new();
    for entry in &manifest.domains {
        if !plan.domains().contains(&entry.name.as_str()) {
            continue;
        }
        let needed = match (&plan, &entry.source) {
            (Plan::Dirichlet { .. }, DomainSource::Directory { .. }) => None,
            _ => plan.train_needed(&entry.name),
        };
        let pool = data::load_pool::<TrainScalar>(entry, manifest.image_size, cfg.seed, needed)?;
        if !pool.skipped.is_empty() {
            log::warn!("domain '{}': skipped {} non-PPM files", entry.name, pool.skipped.len());
        }
        pools.push(pool);
    }
    for d in plan.domains() {
        if manifest.position(d).is_none() {
            return Err(feddom_core::Error::Config(format!("partition refers to domain '{d}' missing from the dataset")).into());
        }
    }
    let clients = match &plan {
        Plan::Table(t) => data::assign_table(&pools, t)?,
        Plan::Dirichlet { clients, alpha, .. } => data::assign_dirichlet(&pools, clients, *alpha, cfg.seed)?,
    };
    let cap = cfg.eval.max_test_images.unwrap_or(usize::MAX);
    let tests = pools.into_iter().map(|p| (p.domain, p.test.into_iter().take(cap).collect())).collect();
    Ok(Prepared { manifest, model, clients, tests })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.fdm` in the output directory.
    pub resume: bool,
    /// Stop after this round as if the process had been killed (no final checkpoint).
    pub stop_after: Option<usize>,
    /// Strategy column value; the strategy's own label when absent.
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub rounds_completed: usize,
    pub rows: Vec<ResultRow>,
    /// Feature dispersion after the last completed round.
    pub final_dispersion: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    results_schema: String,
    strategy: String,
    config: ExperimentConfig,
}

/// Mean per-image PSNR and MS-SSIM of `params` on every test domain and SNR point.
pub fn evaluate_rows(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    params: &ModelParams<TrainScalar>,
    round: usize,
    label: &str,
    mean_loss: f64,
    param_variance: f64,
) -> Result<Vec<ResultRow>> {
    let channel: &ChannelConfig = cfg.eval.channel.as_ref().unwrap_or(&cfg.channel);
    let mut rows = Vec::new();
    for (domain, images) in &prepared.tests {
        if images.is_empty() {
            log::warn!("domain '{domain}' has no test images; skipping evaluation");
            continue;
        }
        for &snr in &cfg.eval.snr_points_db {
            let q = eval::evaluate(&prepared.model, params, images, channel, snr, cfg.seed, &[rng::label_key(domain)])?;
            rows.push(ResultRow {
                round,
                strategy: label.to_string(),
                domain: domain.clone(),
                snr_db: snr,
                psnr: q.psnr,
                ms_ssim: q.ms_ssim,
                mean_loss,
                param_variance,
            });
        }
    }
    Ok(rows)
}

fn trace_rows(report: &RoundReport) -> Vec<TraceCsvRow> {
    report
        .trace
        .iter()
        .map(|t| TraceCsvRow {
            round: t.round,
            client: t.client,
            step: t.step,
            loss: t.loss,
            grad_norm_sq: t.grad_norm_sq,
            eta: t.eta,
            lambda: t.lambda,
            half_step_loss: t.half_step_loss,
        })
        .collect()
}

fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig { threads: 1, output_dir: PathBuf::new(), ..cfg.clone() }
}

fn write_meta(dir: &Path, cfg: &ExperimentConfig, label: &str) -> Result<()> {
    let meta = RunMeta { results_schema: RESULTS_SCHEMA.into(), strategy: label.into(), config: comparable(cfg) };
    let text = serde_json::to_string_pretty(&meta).expect("config serializes");
    results::write_atomic(&dir.join(RUN_FILE), text.as_bytes())
}

fn check_meta(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::config(&path, e.to_string()))?;
    if meta.config != comparable(cfg) {
        return Err(Error::config(&path, "existing run was started with a different configuration"));
    }
    Ok(())
}

fn save_checkpoint(fed: &Federation<TrainScalar>, path: &Path) -> Result<()> {
    let bytes = checkpoint::encode(&fed.state_layers())?;
    results::write_atomic(path, &bytes)
}

/// Runs the experiment described by `cfg`, writing CSVs into `cfg.output_dir`.
///
/// On divergence the error is returned after the rows of every completed
/// round have been flushed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let prepared = prepare(cfg)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let label = opts.label.clone().unwrap_or_else(|| cfg.strategy.kind.label().to_string());
    let domains = prepared.domains();
    let mut fed = Federation::<TrainScalar>::new(
        prepared.model.clone(),
        cfg.strategy.clone(),
        cfg.channel.clone(),
        prepared.clients.clone(),
        domains,
        cfg.seed,
        cfg.threads,
    )?;
    fed.trace_half_step(cfg.trace_half_step);

    let (results_path, rounds_path, trace_path) = (dir.join(RESULTS_FILE), dir.join(ROUNDS_FILE), dir.join(TRACE_FILE));
    let ckpt = dir.join(CHECKPOINT_FILE);
    let (mut res_w, mut rounds_w, mut trace_w) = if opts.resume && ckpt.exists() {
        check_meta(&dir, cfg)?;
        fed.load_state(&ckpt)?;
        let done = fed.server.round;
        log::info!("resuming {} from round {done}", dir.display());
        for p in [&results_path, &rounds_path, &trace_path] {
            results::truncate_after_round(p, done)?;
        }
        (
            CsvAppender::append(&results_path, &RESULTS_HEADER)?,
            CsvAppender::append(&rounds_path, &ROUNDS_HEADER)?,
            CsvAppender::append(&trace_path, &TRACE_HEADER)?,
        )
    } else {
        if opts.resume {
            log::warn!("no checkpoint in {}; starting from round 0", dir.display());
        }
        write_meta(&dir, cfg, &label)?;
        (
            CsvAppender::create(&results_path, &RESULTS_HEADER)?,
            CsvAppender::create(&rounds_path, &ROUNDS_HEADER)?,
            CsvAppender::create(&trace_path, &TRACE_HEADER)?,
        )
    };

    let total = cfg.strategy.rounds;
    let mut final_dispersion = None;
    while fed.server.round < total {
        let report = fed.run_round()?;
        let r = report.round;
        let excluded = report.clients.iter().filter(|c| c.diverged.is_some()).count();
        rounds_w.write(&[RoundRow {
            round: r,
            strategy: label.clone(),
            mean_loss: report.mean_loss,
            param_variance: report.param_variance,
            feature_dispersion: report.feature_dispersion,
            clients: report.clients.len() - excluded,
            excluded,
        }])?;
        trace_w.write(&trace_rows(&report))?;
        final_dispersion = Some(report.feature_dispersion);
        if r % cfg.eval.eval_every == 0 || r == total {
            let rows = evaluate_rows(cfg, &prepared, &fed.server.global_params, r, &label, report.mean_loss, report.param_variance)?;
            res_w.write(&rows)?;
            let avg = rows.iter().map(|x| x.psnr).sum::<f64>() / rows.len().max(1) as f64;
            log::info!("{label} round {r}/{total}: loss {:.5}, mean PSNR {avg:.3} dB", report.mean_loss);
        }
        if r % cfg.checkpoint_every() == 0 || r == total {
            save_checkpoint(&fed, &ckpt)?;
        }
        if opts.stop_after == Some(r) && r < total {
            return Ok(RunSummary { output_dir: dir, rounds_completed: r, rows: results::read_rows(&results_path)?, final_dispersion });
        }
    }
    let model_bytes = checkpoint::encode(&checkpoint::params_to_layers("", &fed.server.global_params))?;
    results::write_atomic(&dir.join(MODEL_FILE), &model_bytes)?;
    if final_dispersion.is_none() {
        final_dispersion = results::read_rows::<RoundRow>(&rounds_path)?.last().map(|r| r.feature_dispersion);
    }
    Ok(RunSummary { output_dir: dir, rounds_completed: fed.server.round, rows: results::read_rows(&results_path)?, final_dispersion })
}

/// Loads model parameters from either a state checkpoint or a plain model file.
pub fn load_model_params(model: &Jscc, path: &Path) -> Result<(ModelParams<TrainScalar>, Option<usize>)> {
    let layers = checkpoint::read_layers(path)?;
    let template = model.zero_params::<TrainScalar>();
    if layers.iter().any(|l| l.name.starts_with("global.")) {
        let params = checkpoint::params_from_layers("global.", &layers, &template, path)?;
        let round = layers.iter().find(|l| l.name == "state.round").and_then(|l| l.data.first()).map(|&r| r as usize);
        Ok((params, round))
    } else {
        Ok((checkpoint::params_from_layers("", &layers, &template, path)?, None))
    }
}

//! CSV result files. Every file starts with a fixed header row and has the
//! round number in its first column.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version of the column layout of `results.csv`, recorded in `run.json`.
pub const RESULTS_SCHEMA: &str = "feddom-results/1";

pub const RESULTS_HEADER: [&str; 8] = ["round", "strategy", "domain", "snr_db", "psnr", "ms_ssim", "mean_loss", "param_variance"];
pub const ROUNDS_HEADER: [&str; 7] = ["round", "strategy", "mean_loss", "param_variance", "feature_dispersion", "clients", "excluded"];
pub const TRACE_HEADER: [&str; 8] = ["round", "client", "step", "loss", "grad_norm_sq", "eta", "lambda", "half_step_loss"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub round: usize,
    pub strategy: String,
    pub domain: String,
    pub snr_db: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub mean_loss: f64,
    pub param_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub strategy: String,
    pub mean_loss: f64,
    pub param_variance: f64,
    pub feature_dispersion: f64,
    pub clients: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
    pub lambda: f64,
    pub half_step_loss: Option<f64>,
}

/// Appends serialized rows to a CSV file, flushing after every batch.
pub struct CsvAppender {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvAppender {
    /// Creates (or truncates) `path` and writes `header`.
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut app = CsvAppender::wrap(path, file);
        app.writer.write_record(header).map_err(|e| app.csv_err(e))?;
        app.flush()?;
        Ok(app)
    }

    /// Opens an existing file for appending; its header is checked against `header`.
    pub fn append(path: &Path, header: &[&str]) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        let found = rd.headers().map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        if found.iter().ne(header.iter().copied()) {
            return Err(Error::config(path, format!("unexpected CSV header {found:?}")));
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvAppender::wrap(path, file))
    }

    fn wrap(path: &Path, file: File) -> Self {
        CsvAppender { path: path.to_path_buf(), writer: csv::WriterBuilder::new().has_headers(false).from_writer(file) }
    }

    fn csv_err(&self, source: csv::Error) -> Error {
        Error::Csv { path: self.path.clone(), source }
    }

    pub fn write<S: Serialize>(&mut self, rows: &[S]) -> Result<()> {
        for r in rows {
            self.writer.serialize(r).map_err(|e| self.csv_err(e))?;
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
    rd.deserialize().collect::<std::result::Result<Vec<R>, _>>().map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })
}

/// Drops every row whose round (first column) is beyond `round`.
pub fn truncate_after_round(path: &Path, round: usize) -> Result<()> {
    let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.clone();
    let mut kept = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let r: usize = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config(path, format!("row without a round number: {rec:?}")))?;
        if r <= round {
            kept.push(rec);
        }
    }
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for rec in &kept {
            w.write_record(rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path` through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

//! Per-strategy, per-domain summary tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::results::ResultRow;

pub const AVG_OF_ALL: &str = "Avg of All";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub strategy: String,
    /// Round the summary was taken from (the last evaluated one).
    pub round: usize,
    /// One cell per entry of [`Comparison::domains`]; `None` when the domain has no rows.
    pub cells: Vec<Option<Cell>>,
    /// Mean of the available domain cells.
    pub average: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub domains: Vec<String>,
    pub rows: Vec<StrategySummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Averages the rows of each strategy's last evaluated round over SNR points
/// (or only `snr_db`, if given), per domain, plus the mean over domains.
///
/// Domains appear in `domain_order` first, then any others alphabetically.
/// Strategies keep their order of first appearance.
pub fn emit_comparison(rows: &[ResultRow], domain_order: &[String], snr_db: Option<f64>) -> Comparison {
    let mut domains: Vec<String> = domain_order.iter().filter(|d| rows.iter().any(|r| &r.domain == *d)).cloned().collect();
    let mut extra: Vec<String> = rows.iter().map(|r| r.domain.clone()).filter(|d| !domains.contains(d)).collect();
    extra.sort();
    extra.dedup();
    domains.extend(extra);

    let mut strategies: Vec<&str> = Vec::new();
    for r in rows {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let out = strategies
        .into_iter()
        .map(|s| {
            let round = rows.iter().filter(|r| r.strategy == s).map(|r| r.round).max().unwrap_or(0);
            let selected: Vec<&ResultRow> =
                rows.iter().filter(|r| r.strategy == s && r.round == round && snr_db.is_none_or(|v| r.snr_db == v)).collect();
            let cells: Vec<Option<Cell>> = domains
                .iter()
                .map(|d| {
                    let mine: Vec<&&ResultRow> = selected.iter().filter(|r| &r.domain == d).collect();
                    (!mine.is_empty()).then(|| Cell { psnr: mean(mine.iter().map(|r| r.psnr)), ms_ssim: mean(mine.iter().map(|r| r.ms_ssim)) })
                })
                .collect();
            let present: Vec<&Cell> = cells.iter().flatten().collect();
            let average = Cell { psnr: mean(present.iter().map(|c| c.psnr)), ms_ssim: mean(present.iter().map(|c| c.ms_ssim)) };
            StrategySummary { strategy: s.to_string(), round, cells, average }
        })
        .collect();
    Comparison { domains, rows: out }
}

impl Comparison {
    pub fn summary(&self, strategy: &str) -> Option<&StrategySummary> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Column headers of the CSV form.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["strategy".to_string(), "round".to_string()];
        for d in self.domains.iter().map(String::as_str).chain([AVG_OF_ALL]) {
            h.push(format!("{d} PSNR"));
            h.push(format!("{d} MS-SSIM"));
        }
        h
    }

    fn records(&self) -> Vec<Vec<String>> {
        let fmt = |c: Option<&Cell>| match c {
            Some(c) => [c.psnr.to_string(), c.ms_ssim.to_string()],
            None => [String::new(), String::new()],
        };
        self.rows
            .iter()
            .map(|r| {
                let mut rec = vec![r.strategy.clone(), r.round.to_string()];
                for c in r.cells.iter().map(Option::as_ref).chain([Some(&r.average)]) {
                    rec.extend(fmt(c));
                }
                rec
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory write");
        for rec in self.records() {
            w.write_record(rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Fixed-width table with `PSNR / MS-SSIM` per cell.
    pub fn to_text(&self) -> String {
        let mut cols = vec!["Strategy".to_string()];
        cols.extend(self.domains.iter().cloned());
        cols.push(AVG_OF_ALL.to_string());
        let cell = |c: Option<&Cell>| c.map_or("-".to_string(), |c| format!("{:.3} / {:.4}", c.psnr, c.ms_ssim));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.strategy.clone()];
                line.extend(r.cells.iter().map(|c| cell(c.as_ref())));
                line.push(cell(Some(&r.average)));
                line
            })
            .collect();
        let widths: Vec<usize> = (0..cols.len()).map(|i| body.iter().map(|l| l[i].len()).chain([cols[i].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in std::iter::once(&cols).chain(&body) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        }
        out
    }
}

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, AnalyzeOptions};
use crate::compare::emit_comparison;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{self, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "feddom", version, about = "Federated training of a learned image codec across visual domains")]
pub struct Cli {
    /// Experiment config (JSON, schema feddom-config/1).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for client training.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic domains as PPM files plus a manifest.
    GenData {
        /// Images per domain.
        #[arg(long, default_value_t = 250)]
        count: usize,
        /// Image height and width.
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
        size: Vec<usize>,
    },
    /// Run one experiment.
    Run(RunArgs),
    /// Run FedDoM with lambda in {1.0, 1.5, 2.0}.
    SweepLambda(TableArgs),
    /// Run FedAvg, FedProx, MOON and FedDoM with shared seeds and tabulate them.
    Compare(TableArgs),
    /// Convergence diagnostics for a traced run.
    Analyze {
        /// Diagnose the quadratic toy federation instead of a run.
        #[arg(long)]
        toy: bool,
        #[arg(long, default_value_t = AnalyzeOptions::default().probes)]
        probes: usize,
    },
    /// Evaluate a checkpoint over the SNR grid.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this round without finishing the run.
    #[arg(long, value_name = "ROUND", hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Tabulate only this SNR point instead of averaging over the grid.
    #[arg(long, value_name = "DB")]
    pub snr: Option<f64>,
    #[arg(long)]
    pub resume: bool,
}

impl Cli {
    fn load_config(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_deref().ok_or_else(|| Error::Usage("this command needs --config PATH".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::Usage("--threads must be >= 1".into()));
            }
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Usage("this command needs --out DIR".into()))
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { count, size } => {
            let out = cli.out_dir()?;
            let manifest = commands::gen_data(out, *count, [size[0], size[1]], cli.seed.unwrap_or(0))?;
            println!("wrote {}", manifest.display());
        }
        Command::Run(args) => {
            let cfg = cli.load_config()?;
            let opts = RunOptions { resume: args.resume, stop_after: args.stop_after, label: None };
            let summary = experiment::run_experiment(&cfg, &opts)?;
            let domains: Vec<String> = cfg.manifest()?.domains.into_iter().map(|d| d.name).collect();
            print!("{}", emit_comparison(&summary.rows, &domains, None).to_text());
            println!("results in {}", summary.output_dir.display());
        }
        Command::Compare(args) => {
            let cfg = cli.load_config()?;
            let out = commands::compare(&cfg, args.snr, args.resume)?;
            print!("{}", out.comparison.to_text());
        }
        Command::SweepLambda(args) => {
            let cfg = cli.load_config()?;
            let out = commands::sweep_lambda(&cfg, args.snr, args.resume)?;
            print!("{}", out.comparison.to_text());
        }
        Command::Analyze { toy, probes } => {
            let diag = if *toy {
                commands::analyze_toy(cli.out_dir()?, cli.seed.unwrap_or(0))?
            } else {
                let cfg = cli.load_config()?;
                commands::analyze(&cfg, &AnalyzeOptions { probes: *probes, ..AnalyzeOptions::default() })?
            };
            let e = &diag.estimates;
            println!("L1 >= {:.4e}  L2 >= {:.4e}  sigma2 ~ {:.4e}  V ~ {:.4e}  ({} samples)", e.l1, e.l2, e.sigma2, e.v, e.samples);
            match diag.satisfied_fraction {
                Some(f) => println!("one-round bound satisfied in {:.1}% of {} round transitions (conditional on the estimates)", 100.0 * f, diag.rounds.len()),
                None => println!("no consecutive rounds to check"),
            }
        }
        Command::Eval { checkpoint } => {
            let cfg = cli.load_config()?;
            let rows = commands::eval_checkpoint(&cfg, checkpoint)?;
            for r in &rows {
                println!("{:<10} {:>6.1} dB  PSNR {:.3}  MS-SSIM {:.4}", r.domain, r.snr_db, r.psnr, r.ms_ssim);
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

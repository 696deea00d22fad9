//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_results, RunSummary};
use crate::engine::{build_stream, diagnose_model, run_experiment, Ablation, DatasetSpec, ExperimentConfig};
use crate::error::{Error, Result};
use crate::etf::{verify_vertices, EtfTarget};
use crate::model::FeatureModel;

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ETF_DIR: &str = "etf";
pub const RETAINED_FILE: &str = "retained_means.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Debug, Parser)]
#[command(name = "pronc", version, about = "Continual learning with a growing simplex ETF target")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train through every task of a config and write the run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Repeat a run over several seeds and aggregate FAA/FF.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// First seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the same seed for every run instead of consecutive seeds.
        #[arg(long)]
        fixed_seed: bool,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Check an exported ETF for equal norms and equal angles.
    VerifyEtf {
        #[arg(long)]
        etf: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Recompute neural-collapse statistics of a checkpoint on a dataset.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config describing the dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        etf: PathBuf,
        /// Class means saved by `run`; enables the retention statistic.
        #[arg(long)]
        retained: Option<PathBuf>,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(e: impl ToString) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }

    /// Config problems are usage errors; everything else happened at runtime.
    fn classify(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::NoTraining | Error::DimensionBelowClasses { .. } => Self::usage(e),
            _ => Self::runtime(e),
        }
    }
}

pub fn execute(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            ablation,
        } => cmd_run(&config, &out, seed, ablation.as_deref()),
        Command::Sweep {
            config,
            seeds,
            out,
            seed,
            fixed_seed,
            ablation,
        } => cmd_sweep(&config, seeds, &out, seed, fixed_seed, ablation.as_deref()),
        Command::VerifyEtf { etf, tol } => cmd_verify_etf(&etf, tol),
        Command::Diagnose {
            checkpoint,
            data,
            etf,
            retained,
        } => cmd_diagnose(&checkpoint, &data, &etf, retained.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>, ablation: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path).map_err(CliError::usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(name) = ablation {
        cfg.ablation = Ablation::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            CliError::usage(format!("unknown ablation {name:?}; expected one of {}", known.join(", ")))
        })?;
    }
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one configuration and writes results, the final checkpoint, the
/// ETF and the retained class means under `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let output = run_experiment(cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let summary = write_results(out, &output.accuracy, &output.checkpoints, cfg, elapsed)?;
    let exp = &output.experiment;
    exp.model().save(&out.join(CHECKPOINT_DIR))?;
    exp.etf().ok_or(Error::MissingEtf)?.save(&out.join(ETF_DIR))?;
    write_json(&out.join(RETAINED_FILE), exp.retained_means())?;
    Ok(summary)
}

fn fmt_ff(ff: Option<f64>) -> String {
    ff.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, ablation: Option<&str>) -> Result<u8, CliError> {
    let cfg = load_config(config, seed, ablation)?;
    let summary = run_to_dir(&cfg, out).map_err(CliError::classify)?;
    println!("FAA={:.4} FF={}", summary.faa, fmt_ff(summary.ff));
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub dir: PathBuf,
    pub faa: f64,
    pub ff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: Vec<SweepEntry>,
    pub failed_seeds: Vec<u64>,
    pub faa: Option<MeanStd>,
    pub ff: Option<MeanStd>,
}

pub fn cmd_sweep(
    config: &Path,
    seeds: usize,
    out: &Path,
    first_seed: Option<u64>,
    fixed_seed: bool,
    ablation: Option<&str>,
) -> Result<u8, CliError> {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let base = load_config(config, first_seed, ablation)?;
    let jobs: Vec<(usize, u64)> = (0..seeds)
        .map(|i| (i, if fixed_seed { base.seed } else { base.seed + i as u64 }))
        .collect();
    let results: Vec<(usize, u64, Result<RunSummary>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            (i, seed, run_to_dir(&cfg, &out.join(format!("run_{i}"))))
        })
        .collect();

    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (i, seed, r) in results {
        match r {
            Ok(s) => runs.push(SweepEntry {
                seed,
                dir: PathBuf::from(format!("run_{i}")),
                faa: s.faa,
                ff: s.ff,
            }),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                failed.push(seed);
            }
        }
    }
    let faas: Vec<f64> = runs.iter().map(|r| r.faa).collect();
    let ffs: Option<Vec<f64>> = runs.iter().map(|r| r.ff).collect();
    let agg = Aggregate {
        faa: MeanStd::of(&faas),
        ff: ffs.and_then(|v| MeanStd::of(&v)),
        runs,
        failed_seeds: failed,
    };
    fs::create_dir_all(out).map_err(|e| CliError::runtime(Error::io(out, e)))?;
    write_json(&out.join(AGGREGATE_FILE), &agg).map_err(CliError::runtime)?;
    if let Some(f) = agg.faa {
        let ff = agg.ff.map_or_else(|| "n/a".into(), |m| format!("{:.4} ± {:.4}", m.mean, m.std));
        println!("FAA={:.4} ± {:.4} FF={ff}", f.mean, f.std);
    }
    if agg.failed_seeds.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err(CliError::runtime(format!("{} seed(s) failed", agg.failed_seeds.len())))
    }
}

pub fn cmd_verify_etf(dir: &Path, tol: f64) -> Result<u8, CliError> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(CliError::usage(format!("invalid tolerance {tol}")));
    }
    let etf = EtfTarget::load(dir).map_err(CliError::usage)?;
    let diag = verify_vertices(etf.vertices(), tol);
    println!("{}", serde_json::to_string(&diag).map_err(CliError::runtime)?);
    Ok(if diag.is_valid { EXIT_OK } else { EXIT_RUNTIME })
}

pub fn cmd_diagnose(checkpoint: &Path, data: &Path, etf: &Path, retained: Option<&Path>) -> Result<u8, CliError> {
    let model = FeatureModel::load(checkpoint).map_err(CliError::usage)?;
    let etf = EtfTarget::load(etf).map_err(CliError::usage)?;
    if model.feature_dim() != etf.dim() {
        return Err(CliError::usage(format!(
            "checkpoint feature dim {} does not match ETF dim {}",
            model.feature_dim(),
            etf.dim()
        )));
    }
    // Only the dataset description matters here, so training fields are not validated.
    let text = fs::read_to_string(data).map_err(|e| CliError::usage(Error::io(data, e)))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::usage(Error::json(data, e)))?;
    if matches!(cfg.dataset, DatasetSpec::Synthetic { samples_per_class: 0, .. }) {
        return Err(CliError::usage("dataset has no samples"));
    }
    let stream = build_stream(&cfg).map_err(CliError::classify)?;
    let train: Vec<_> = stream.tasks().iter().map(|t| &t.train).collect();
    if train.iter().all(|d| d.is_empty()) {
        return Err(CliError::usage("dataset has no samples"));
    }
    if stream.input_dim() != Some(model.input_dim()) {
        return Err(CliError::usage(format!(
            "dataset input dim {:?} does not match checkpoint input dim {}",
            stream.input_dim(),
            model.input_dim()
        )));
    }
    let retained: BTreeMap<usize, Vec<f64>> = match retained {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(Error::io(p, e)))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(Error::json(p, e)))?
        }
        None => BTreeMap::new(),
    };
    let task_classes: Vec<Vec<usize>> = stream.tasks().iter().map(|t| t.classes.clone()).collect();
    let report = diagnose_model(&model, &etf, &task_classes, &train, &retained).map_err(CliError::classify)?;
    println!("{}", serde_json::to_string(&report).map_err(CliError::runtime)?);
    Ok(EXIT_OK)
}

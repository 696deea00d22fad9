use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Ablation, CheckpointRecord, ExperimentConfig, Scenario};
use crate::error::{Error, Result};
use crate::metrics::{faa, ff, AccuracyMatrix};

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub faa: f64,
    /// Undefined for a single task.
    pub ff: Option<f64>,
    pub seed: u64,
    pub ablation: Ablation,
    pub scenario: Scenario,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

fn accuracy_csv(acc: &AccuracyMatrix) -> String {
    let mut out = String::new();
    for t in 0..acc.tasks() {
        let cells: Vec<String> = (0..acc.tasks())
            .map(|i| match acc.get(t, i) {
                Some(v) => format!("{v:.16e}"),
                None => String::new(),
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))
}

/// Writes the run's accuracy matrix, per-task checkpoint records, summary and
/// resolved config into `run_dir`, creating it if needed.
pub fn write_results(
    run_dir: &Path,
    acc: &AccuracyMatrix,
    records: &[CheckpointRecord],
    config: &ExperimentConfig,
    wall_time_secs: f64,
) -> Result<RunSummary> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write(&run_dir.join(ACCURACY_FILE), &accuracy_csv(acc))?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut lines = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(&metrics_path, e))?;
        lines.push_str(&line);
        lines.push('\n');
    }
    write(&metrics_path, &lines)?;

    let summary = RunSummary {
        faa: faa(acc)?,
        ff: ff(acc)?,
        seed: config.seed,
        ablation: config.ablation,
        scenario: config.scenario,
        wall_time_secs,
        config: config.clone(),
    };
    let summary_path = run_dir.join(SUMMARY_FILE);
    write(&summary_path, &to_json(&summary_path, &summary)?)?;
    let config_path = run_dir.join(CONFIG_FILE);
    write(&config_path, &to_json(&config_path, config)?)?;
    Ok(summary)
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

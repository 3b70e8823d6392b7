//! Run artifacts on disk: the per-step metrics log, retrieval tables and a
//! machine-readable summary. Writers replace their files, so re-emitting
//! from the same inputs gives byte-identical output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HdcError, Result};
use crate::evaluator::{LabelMode, RetrievalReport};
use crate::loss::LossBreakdown;
use crate::trainer::{METRICS_HEADER, StepRecord, write_metrics};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RETRIEVAL_FILE: &str = "retrieval.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field.parse().map_err(|_| HdcError::CorruptFile {
        path: path.to_path_buf(),
        reason: format!("row {line}: cannot parse {field:?}"),
    })
}

/// Reads a metrics log written by the trainer.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(HdcError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut log = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let mut losses = LossBreakdown {
            total: parse_field(path, line, &row[2])?,
            ..Default::default()
        };
        for (j, k) in [3usize, 4, 5].into_iter().enumerate() {
            for (offset, map) in [(0, &mut losses.spatial), (1, &mut losses.temporal)] {
                let field = &row[3 + 2 * j + offset];
                if !field.is_empty() {
                    map.insert(k, parse_field(path, line, field)?);
                }
            }
        }
        log.push(StepRecord {
            step: parse_field(path, line, &row[0])?,
            lr: parse_field(path, line, &row[1])?,
            losses,
        });
    }
    Ok(log)
}

/// Drops rows past `step`, so a resumed run can append without duplicates.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut log = read_metrics(path)?;
    log.retain(|r| r.step <= step);
    write_metrics(path, &log)
}

pub fn retrieval_csv(reports: &BTreeMap<&str, RetrievalReport>) -> String {
    let mut s = String::from("label_mode,k,accuracy,queries,gallery\n");
    for mode in LabelMode::ALL {
        let Some(r) = reports.get(mode.name()) else {
            continue;
        };
        for (k, a) in r.ks.iter().zip(&r.accuracy) {
            s.push_str(&format!(
                "{},{k},{a},{},{}\n",
                mode.name(),
                r.queries,
                r.gallery
            ));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: u64,
    /// Absent when no metrics were logged, e.g. for an untrained encoder.
    pub total_loss_final: Option<f64>,
    /// Composite-label top-1 and top-5, repeated here for quick lookup.
    pub top1: f64,
    pub top5: Option<f64>,
    pub retrieval: BTreeMap<String, RetrievalReport>,
}

impl Summary {
    pub fn new(seed: u64, log: &[StepRecord], reports: &BTreeMap<&str, RetrievalReport>) -> Self {
        let composite = &reports[LabelMode::Composite.name()];
        Summary {
            schema_version: SCHEMA_VERSION,
            seed,
            steps: log.last().map_or(0, |r| r.step),
            total_loss_final: log.last().map(|r| r.losses.total),
            top1: composite.accuracy[0],
            top5: composite.at(5),
            retrieval: reports
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HdcError::io(path, e))
}

/// Writes `retrieval.csv` and `summary.json` into `dir`, plus `metrics.csv`
/// when `log` is non-empty and `dir` has none yet.
pub fn emit_report(
    dir: &Path,
    seed: u64,
    log: &[StepRecord],
    reports: &BTreeMap<&str, RetrievalReport>,
) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| HdcError::io(dir, e))?;
    let metrics = dir.join(METRICS_FILE);
    if !log.is_empty() && !metrics.exists() {
        write_metrics(&metrics, log)?;
    }
    write(&dir.join(RETRIEVAL_FILE), &retrieval_csv(reports))?;
    let summary = Summary::new(seed, log, reports);
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    write(&dir.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

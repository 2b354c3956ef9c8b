//! Report files: `metrics.json`, `summary.csv` and `events.jsonl`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{LogEvent, MetricsReport};

pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVENTS_FILE: &str = "events.jsonl";

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub queuing_mean: f64,
    pub queuing_median: f64,
    pub queuing_p95: f64,
    pub jct_mean: f64,
    pub jct_median: f64,
    pub jct_p95: f64,
    pub training_usage: f64,
    pub overall_usage: f64,
    pub preemption_ratio: f64,
    pub collateral_damage: f64,
    pub scale_ops: usize,
}

pub fn summary_row(r: &MetricsReport) -> SummaryRow {
    SummaryRow {
        policy: r.policy.clone(),
        queuing_mean: r.queuing.mean,
        queuing_median: r.queuing.median,
        queuing_p95: r.queuing.p95,
        jct_mean: r.jct.mean,
        jct_median: r.jct.median,
        jct_p95: r.jct.p95,
        training_usage: r.training_usage,
        overall_usage: r.overall_usage,
        preemption_ratio: r.preemption_ratio,
        collateral_damage: r.collateral_damage,
        scale_ops: r.scale_ops,
    }
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.json` and a one-row `summary.csv` into `dir`, creating it.
pub fn write_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_summary(dir.join(SUMMARY_FILE), &[summary_row(report)])
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_events(path: impl AsRef<Path>, events: &[LogEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

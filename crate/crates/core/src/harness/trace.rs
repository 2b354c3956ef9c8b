//! Job traces (JSON Lines), utilization traces (CSV) and loan plans (JSON Lines).

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::JobSpec;
use crate::error::{Error, Result};
use crate::loaning::LoanInstruction;

pub const UTIL_INTERVAL_S: u64 = 300;

/// On-disk job record; `max_workers` falls back to `min_workers`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJob {
    id: String,
    submit_s: u64,
    gpus_per_worker: u32,
    min_workers: u32,
    max_workers: Option<u32>,
    runtime_at_max_s: f64,
    #[serde(default)]
    gpu_flexible: bool,
    #[serde(default)]
    checkpointing: bool,
    #[serde(default)]
    hetero_capable: bool,
}

pub fn parse_job_trace_str(text: &str) -> Result<Vec<JobSpec>> {
    let mut out: Vec<JobSpec> = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawJob = serde_json::from_str(line).map_err(|e| Error::parse(n, e.to_string()))?;
        let spec = JobSpec {
            max_workers: raw.max_workers.unwrap_or(raw.min_workers),
            id: raw.id,
            submit_s: raw.submit_s,
            gpus_per_worker: raw.gpus_per_worker,
            min_workers: raw.min_workers,
            runtime_at_max_s: raw.runtime_at_max_s,
            gpu_flexible: raw.gpu_flexible,
            checkpointing: raw.checkpointing,
            hetero_capable: raw.hetero_capable,
        };
        spec.validate().map_err(|m| Error::parse(n, m))?;
        if !ids.insert(spec.id.clone()) {
            return Err(Error::parse(n, format!("duplicate job id `{}`", spec.id)));
        }
        if let Some(prev) = out.last() {
            if spec.submit_s < prev.submit_s {
                return Err(Error::parse(
                    n,
                    format!("submit_s {} is earlier than the previous record's {}", spec.submit_s, prev.submit_s),
                ));
            }
        }
        out.push(spec);
    }
    Ok(out)
}

pub fn parse_job_trace(path: impl AsRef<Path>) -> Result<Vec<JobSpec>> {
    parse_job_trace_str(&fs::read_to_string(path)?)
}

pub fn write_job_trace(path: impl AsRef<Path>, jobs: &[JobSpec]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for j in jobs {
        serde_json::to_writer(&mut f, j)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilPoint {
    pub t_s: u64,
    pub utilization: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilTrace {
    pub samples: Vec<UtilPoint>,
}

impl UtilTrace {
    pub fn pairs(&self) -> Vec<(u64, f64)> {
        self.samples.iter().map(|p| (p.t_s, p.utilization)).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), (usize, String)> {
        let step = match self.samples.as_slice() {
            [a, b, ..] => b.t_s.checked_sub(a.t_s).filter(|d| *d > 0),
            _ => None,
        };
        for (i, p) in self.samples.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.utilization) {
                return Err((i, format!("utilization {} outside [0, 1]", p.utilization)));
            }
            if i > 0 {
                let prev = self.samples[i - 1].t_s;
                if p.t_s <= prev {
                    return Err((i, format!("t_s {} does not increase", p.t_s)));
                }
                if Some(p.t_s - prev) != step {
                    return Err((i, "samples are not evenly spaced".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_util_trace_str(text: &str) -> Result<UtilTrace> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_s", "utilization"] {
        return Err(Error::parse(1, "expected header `t_s,utilization`"));
    }
    let mut trace = UtilTrace::default();
    for (i, rec) in rdr.deserialize::<UtilPoint>().enumerate() {
        let p = rec.map_err(|e| Error::parse(i + 2, e.to_string()))?;
        trace.samples.push(p);
    }
    trace.validate().map_err(|(i, m)| Error::parse(i + 2, m))?;
    Ok(trace)
}

pub fn parse_util_trace(path: impl AsRef<Path>) -> Result<UtilTrace> {
    parse_util_trace_str(&fs::read_to_string(path)?)
}

pub fn write_util_trace(path: impl AsRef<Path>, trace: &UtilTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    // serialize emits the header with the first record
    if trace.samples.is_empty() {
        w.write_record(["t_s", "utilization"])?;
    }
    for p in &trace.samples {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_loan_plan_str(text: &str) -> Result<Vec<LoanInstruction>> {
    let mut out: Vec<LoanInstruction> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ins: LoanInstruction = serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        if out.last().is_some_and(|p| ins.at_s < p.at_s) {
            return Err(Error::parse(i + 1, "at_s goes backwards"));
        }
        out.push(ins);
    }
    Ok(out)
}

pub fn parse_loan_plan(path: impl AsRef<Path>) -> Result<Vec<LoanInstruction>> {
    parse_loan_plan_str(&fs::read_to_string(path)?)
}

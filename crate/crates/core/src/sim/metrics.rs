//! Per-job and aggregate results of a simulation run.

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the sample at or below it. Empty input gives 0.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        Summary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: percentile(values, 50.0),
            p95: percentile(values, 95.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub id: String,
    pub submit_s: u64,
    pub queuing_s: f64,
    pub running_s: f64,
    pub overhead_s: f64,
    pub jct_s: f64,
    pub preemptions: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub t_s: f64,
    pub training: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    /// Finished jobs only, in submission order.
    pub jobs: Vec<JobMetrics>,
    pub queuing: Summary,
    pub jct: Summary,
    pub usage: Vec<UsageSample>,
    pub training_usage: f64,
    pub overall_usage: f64,
    pub submissions: usize,
    pub preemptions: usize,
    pub preemption_ratio: f64,
    /// Mean over preempting reclaims of excess vacated GPUs per demanded GPU.
    pub collateral_damage: f64,
    /// Share of returned servers obtained by draining flexible workers.
    pub flex_reclaim_share: f64,
    pub scale_ops: usize,
    pub unfinished: usize,
}

impl MetricsReport {
    pub fn finalize(&mut self) {
        let q: Vec<f64> = self.jobs.iter().map(|j| j.queuing_s).collect();
        let c: Vec<f64> = self.jobs.iter().map(|j| j.jct_s).collect();
        self.queuing = Summary::of(&q);
        self.jct = Summary::of(&c);
        if !self.usage.is_empty() {
            let n = self.usage.len() as f64;
            self.training_usage = self.usage.iter().map(|u| u.training).sum::<f64>() / n;
            self.overall_usage = self.usage.iter().map(|u| u.overall).sum::<f64>() / n;
        }
        self.preemption_ratio = if self.submissions == 0 {
            0.0
        } else {
            self.preemptions as f64 / self.submissions as f64
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 1.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn empty_report_is_zero() {
        let mut r = MetricsReport::default();
        r.finalize();
        assert_eq!(r.queuing, Summary::default());
        assert_eq!(r.preemption_ratio, 0.0);
    }
}

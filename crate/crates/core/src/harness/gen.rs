//! Synthetic traces: Poisson job arrivals with a small share of elastic jobs
//! and a diurnal inference utilization curve.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::trace::{UtilPoint, UtilTrace, UTIL_INTERVAL_S};
use crate::cluster::JobSpec;
use crate::error::{Error, Result};

const DAY_S: f64 = 86_400.0;
/// Largest GPU count any single job may ask for.
const MAX_JOB_GPUS: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_jobs: usize,
    pub days: f64,
    pub training_servers: usize,
    pub gpus_per_server: u32,
    pub seed: u64,
    pub util_mean: f64,
    /// Peak-to-trough ratio of the utilization curve.
    pub util_ratio: f64,
    /// Uniform noise amplitude added to each utilization sample.
    pub util_noise: f64,
    pub elastic_fraction: f64,
    /// Share of total GPU-time carried by elastic jobs.
    pub elastic_gpu_share: f64,
    /// Offered GPU-time over training capacity during the arrival window.
    pub target_load: f64,
    pub gpu_flexible_fraction: f64,
    pub hetero_fraction: f64,
    pub checkpoint_fraction: f64,
    /// Median job runtime before load scaling, seconds.
    pub median_runtime_s: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_jobs: 2000,
            days: 2.0,
            training_servers: 64,
            gpus_per_server: 8,
            seed: 42,
            util_mean: 0.65,
            util_ratio: 2.2,
            util_noise: 0.02,
            elastic_fraction: 0.05,
            elastic_gpu_share: 0.36,
            target_load: 1.0,
            gpu_flexible_fraction: 0.21,
            hetero_fraction: 0.10,
            checkpoint_fraction: 0.5,
            median_runtime_s: 1800.0,
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_jobs == 0 || self.days <= 0.0 || self.training_servers == 0 || self.gpus_per_server == 0 {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if !(self.util_ratio >= 1.0 && self.util_mean > 0.0 && self.util_mean < 1.0) {
            return Err(Error::Config("utilization mean must lie in (0, 1) and ratio >= 1".into()));
        }
        let all = [
            self.elastic_fraction,
            self.elastic_gpu_share,
            self.gpu_flexible_fraction,
            self.hetero_fraction,
            self.checkpoint_fraction,
        ];
        if !all.into_iter().all(frac) || self.target_load <= 0.0 || self.median_runtime_s <= 0.0 {
            return Err(Error::Config("generator fractions out of range".into()));
        }
        Ok(())
    }
}

fn gpu_time(j: &JobSpec) -> f64 {
    j.runtime_at_max_s * f64::from(j.max_workers * j.gpus_per_worker)
}

/// Diurnal utilization: a sinusoid around `util_mean` whose peak-to-trough
/// ratio is `util_ratio`, plus bounded noise, clipped to `[0, 1]`.
pub fn gen_util(p: &GenParams, horizon_s: f64, rng: &mut ChaCha8Rng) -> UtilTrace {
    let amp = p.util_mean * (p.util_ratio - 1.0) / (p.util_ratio + 1.0);
    let n = (horizon_s / UTIL_INTERVAL_S as f64).ceil() as u64 + 1;
    let samples = (0..n)
        .map(|k| {
            let t = k * UTIL_INTERVAL_S;
            // trough at midnight, peak at noon
            let phase = 2.0 * PI * (t as f64 / DAY_S) - PI / 2.0;
            let noise = if p.util_noise > 0.0 {
                rng.random_range(-p.util_noise..=p.util_noise)
            } else {
                0.0
            };
            UtilPoint {
                t_s: t,
                utilization: (p.util_mean + amp * phase.sin() + noise).clamp(0.0, 1.0),
            }
        })
        .collect();
    UtilTrace { samples }
}

/// Generates a job trace and a utilization trace, deterministic in `p.seed`.
pub fn gen_traces(p: &GenParams) -> Result<(Vec<JobSpec>, UtilTrace)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let window = p.days * DAY_S;
    let gap = Exp::new(p.n_jobs as f64 / window).map_err(|e| Error::Config(e.to_string()))?;
    let runtime = LogNormal::new(p.median_runtime_s.ln(), 1.2).map_err(|e| Error::Config(e.to_string()))?;

    let n_elastic = ((p.elastic_fraction * p.n_jobs as f64).round() as usize).min(p.n_jobs);
    let elastic: Vec<bool> = {
        let mut v = vec![false; p.n_jobs];
        for i in sample(&mut rng, p.n_jobs, n_elastic) {
            v[i] = true;
        }
        v
    };

    let max_gpus = MAX_JOB_GPUS.min(p.gpus_per_server * p.training_servers as u32);
    let mut t = 0.0;
    let mut jobs = Vec::with_capacity(p.n_jobs);
    for (i, &is_elastic) in elastic.iter().enumerate() {
        t += gap.sample(&mut rng);
        let d = *pick(&mut rng, &[(1, 0.45), (2, 0.2), (4, 0.15), (8, 0.2)]);
        let d = d.min(p.gpus_per_server);
        let cap = (max_gpus / d).max(1);
        let (min_w, max_w) = if is_elastic {
            let w = *pick(&mut rng, &[(1, 0.4), (2, 0.35), (4, 0.25)]);
            let w = w.min(cap);
            (w, (4 * w).min(cap))
        } else {
            let w = *pick(&mut rng, &[(1, 0.6), (2, 0.2), (4, 0.15), (8, 0.05)]);
            let w = w.min(cap);
            (w, w)
        };
        let rt: f64 = runtime.sample(&mut rng);
        let flexible = is_elastic || rng.random_bool(p.gpu_flexible_fraction);
        let hetero = rng.random_bool(p.hetero_fraction);
        let ckpt = rng.random_bool(p.checkpoint_fraction);
        jobs.push(JobSpec {
            id: format!("job-{i:05}"),
            submit_s: t as u64,
            gpus_per_worker: d,
            min_workers: min_w,
            max_workers: max_w,
            runtime_at_max_s: rt.clamp(60.0, 2.0 * DAY_S),
            gpu_flexible: flexible,
            checkpointing: ckpt,
            hetero_capable: hetero,
        });
    }

    // hit the elastic GPU-time share exactly, then the offered load
    let el: f64 = jobs.iter().filter(|j| j.is_elastic()).map(gpu_time).sum();
    let inel: f64 = jobs.iter().filter(|j| !j.is_elastic()).map(gpu_time).sum();
    if el > 0.0 && inel > 0.0 && p.elastic_gpu_share < 1.0 {
        let k = p.elastic_gpu_share / (1.0 - p.elastic_gpu_share) * inel / el;
        for j in jobs.iter_mut().filter(|j| j.is_elastic()) {
            j.runtime_at_max_s *= k;
        }
    }
    let total: f64 = jobs.iter().map(gpu_time).sum();
    let capacity = f64::from(p.gpus_per_server) * p.training_servers as f64 * window;
    let scale = p.target_load * capacity / total;
    for j in &mut jobs {
        j.runtime_at_max_s *= scale;
    }

    let util = gen_util(p, window + 2.0 * DAY_S, &mut rng);
    Ok((jobs, util))
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, table: &'a [(T, f64)]) -> &'a T {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (v, w) in table {
        if x < *w {
            return v;
        }
        x -= w;
    }
    &table[table.len() - 1].0
}

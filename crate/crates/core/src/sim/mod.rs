//! Discrete-event simulation of the training cluster.

mod engine;
pub mod metrics;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use engine::{ClusterShape, LogEvent, SimOutput, Simulation};
pub use metrics::{percentile, JobMetrics, MetricsReport, Summary, UsageSample};

use crate::cluster::{JobSpec, DEFAULT_INFERENCE_SPEED};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Only the trace's elastic jobs scale; no job mixes GPU kinds.
    Basic,
    /// Jobs flagged hetero-capable may mix GPU kinds at reduced efficiency.
    Advanced,
    /// Every job scales and mixes GPU kinds at full efficiency.
    Ideal,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Scenario::Basic),
            "advanced" => Ok(Scenario::Advanced),
            "ideal" => Ok(Scenario::Ideal),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImperfectScaling {
    pub loss_per_step: f64,
}

impl Default for ImperfectScaling {
    fn default() -> Self {
        ImperfectScaling { loss_per_step: 0.10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictError {
    pub fraction: f64,
    pub max_rel: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub sched_interval_s: u64,
    pub orch_interval_s: u64,
    pub preempt_overhead_s: f64,
    pub scale_overhead_s: f64,
    pub hetero_efficiency: f64,
    pub imperfect_scaling: Option<ImperfectScaling>,
    pub predict_error: Option<PredictError>,
    pub inference_speed_factor: f64,
    /// Lend idle inference servers to training.
    pub loaning: bool,
    /// When off, every job runs at its maximum worker count.
    pub elastic_scaling: bool,
    pub loan_headroom: f64,
    /// Stop the clock here even if jobs remain.
    pub horizon_s: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Basic,
            sched_interval_s: 60,
            orch_interval_s: 300,
            preempt_overhead_s: 63.0,
            scale_overhead_s: 0.0,
            hetero_efficiency: 0.7,
            imperfect_scaling: None,
            predict_error: None,
            inference_speed_factor: DEFAULT_INFERENCE_SPEED,
            loaning: true,
            elastic_scaling: true,
            loan_headroom: 0.10,
            horizon_s: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if self.sched_interval_s == 0 || self.orch_interval_s == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if !unit(self.hetero_efficiency) || !unit(self.inference_speed_factor) {
            return Err(Error::Config("efficiency and speed factors must lie in (0, 1]".into()));
        }
        if self.preempt_overhead_s < 0.0 || self.scale_overhead_s < 0.0 {
            return Err(Error::Config("overheads must be non-negative".into()));
        }
        if let Some(i) = self.imperfect_scaling {
            if !(0.0..1.0).contains(&i.loss_per_step) {
                return Err(Error::Config("loss_per_step must lie in [0, 1)".into()));
            }
        }
        if let Some(p) = self.predict_error {
            if !(0.0..=1.0).contains(&p.fraction) || p.max_rel < 0.0 {
                return Err(Error::Config("prediction error parameters out of range".into()));
            }
        }
        if !(0.0..1.0).contains(&self.loan_headroom) {
            return Err(Error::Config("headroom must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Efficiency applied to a job whose workers span both GPU kinds.
    pub fn mixed_efficiency(&self) -> f64 {
        match self.scenario {
            Scenario::Ideal => 1.0,
            _ => self.hetero_efficiency,
        }
    }

    /// Rewrites job specs for the scenario and the elastic-scaling switch.
    pub fn transform_jobs(&self, jobs: &[JobSpec]) -> Vec<JobSpec> {
        jobs.iter()
            .map(|j| {
                let mut j = j.clone();
                match self.scenario {
                    Scenario::Basic => j.hetero_capable = false,
                    Scenario::Advanced => {}
                    Scenario::Ideal => {
                        j.hetero_capable = true;
                        j.gpu_flexible = true;
                        if !j.is_elastic() {
                            // same work and base demand, wider range
                            let w = j.max_workers;
                            let cap = (64 / j.gpus_per_worker).max(w);
                            let max = (4 * w).min(cap);
                            j.runtime_at_max_s = j.runtime_at_max_s * f64::from(w) / f64::from(max);
                            j.max_workers = max;
                        }
                    }
                }
                if !self.elastic_scaling {
                    j.min_workers = j.max_workers;
                }
                j
            })
            .collect()
    }
}

/// Progress in worker-equivalents per second for a job with the given
/// numbers of training-GPU and inference-GPU workers.
pub fn progress_rate(spec: &JobSpec, training_workers: u32, inference_workers: u32, cfg: &ScenarioConfig) -> f64 {
    let w = training_workers + inference_workers;
    let eta = cfg.imperfect_scaling.map_or(1.0, |i| {
        let mid = (spec.min_workers + spec.max_workers).div_ceil(2);
        (1.0 - i.loss_per_step).powi(w.saturating_sub(mid) as i32)
    });
    let mut speed = f64::from(training_workers) + f64::from(inference_workers) * cfg.inference_speed_factor;
    if training_workers > 0 && inference_workers > 0 {
        speed *= cfg.mixed_efficiency();
    }
    eta * speed
}

/// Runtime estimates per job: a seeded `fraction` of them (rounded to the
/// nearest count) is off by a uniform relative error in `(0, max_rel]`,
/// either direction.
pub fn inject_prediction_error(jobs: &[JobSpec], fraction: f64, max_rel: f64, seed: u64) -> Vec<f64> {
    let mut est: Vec<f64> = jobs.iter().map(|j| j.runtime_at_max_s).collect();
    let k = ((fraction.clamp(0.0, 1.0) * jobs.len() as f64).round() as usize).min(jobs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, jobs.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let u = max_rel * (1.0 - rng.random::<f64>());
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        est[i] *= 1.0 + sign * u;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(min: u32, max: u32) -> JobSpec {
        JobSpec {
            id: "j".into(),
            submit_s: 0,
            gpus_per_worker: 1,
            min_workers: min,
            max_workers: max,
            runtime_at_max_s: 10.0,
            gpu_flexible: true,
            checkpointing: false,
            hetero_capable: true,
        }
    }

    #[test]
    fn rates() {
        let mut cfg = ScenarioConfig::default();
        assert_eq!(progress_rate(&spec(4, 4), 4, 0, &cfg), 4.0);
        cfg.scenario = Scenario::Advanced;
        assert!((progress_rate(&spec(4, 4), 2, 2, &cfg) - 1.75).abs() < 1e-12);
        cfg.imperfect_scaling = Some(ImperfectScaling::default());
        assert!((progress_rate(&spec(2, 6), 5, 0, &cfg) - 4.5).abs() < 1e-12);
        assert_eq!(progress_rate(&spec(2, 6), 4, 0, &cfg), 4.0);
    }

    #[test]
    fn prediction_error_counts() {
        let jobs: Vec<JobSpec> = (0..100).map(|_| spec(1, 1)).collect();
        let exact = |e: &[f64]| e.iter().filter(|x| **x == 10.0).count();
        assert_eq!(exact(&inject_prediction_error(&jobs, 0.0, 0.25, 1)), 100);
        assert_eq!(exact(&inject_prediction_error(&jobs, 1.0, 0.0, 1)), 100);
        let e = inject_prediction_error(&jobs, 0.6, 0.25, 9);
        assert_eq!(exact(&e), 40);
        assert!(e.iter().all(|x| (x / 10.0 - 1.0).abs() <= 0.25 + 1e-12));
    }

    #[test]
    fn ideal_widens_rigid_jobs_without_changing_work() {
        let cfg = ScenarioConfig {
            scenario: Scenario::Ideal,
            ..ScenarioConfig::default()
        };
        let j = cfg.transform_jobs(&[spec(2, 2)]).remove(0);
        assert_eq!((j.min_workers, j.max_workers), (2, 8));
        assert!((j.total_workload() - 20.0).abs() < 1e-12);
        let rigid = ScenarioConfig {
            elastic_scaling: false,
            ..ScenarioConfig::default()
        };
        assert_eq!(rigid.transform_jobs(&[spec(2, 6)])[0].min_workers, 6);
    }
}

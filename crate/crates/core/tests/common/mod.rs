//! Event-log replay shared by the simulator tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lyra_core::sim::{progress_rate, LogEvent, ScenarioConfig};
use lyra_core::JobSpec;

#[derive(Clone, Debug, Default)]
pub struct Replayed {
    /// Work done when the log says the job completed.
    pub done_at_completion: Option<f64>,
    pub completion_s: Option<f64>,
    /// Finish time obtained by integrating `rate_cfg` rates over the logged
    /// worker segments, extending the last segment if needed.
    pub replay_finish_s: Option<f64>,
    pub segments: Vec<(f64, u32, u32)>,
    pub preempted: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct Live {
    rate: f64,
    from: f64,
    stall_until: f64,
    done: f64,
    restart: bool,
}

/// Integrates the logged rates per job. `overhead_s` is the restart stall.
pub fn replay(events: &[LogEvent], specs: &[JobSpec], overhead_s: f64) -> BTreeMap<String, Replayed> {
    let by_id: BTreeMap<&str, &JobSpec> = specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut live: BTreeMap<String, Live> = BTreeMap::new();
    let mut out: BTreeMap<String, Replayed> = BTreeMap::new();
    let step = |l: &mut Live, t: f64| {
        let begin = l.from.max(l.stall_until);
        if t > begin {
            l.done += l.rate * (t - begin);
        }
        l.from = t;
    };
    for e in events {
        match e {
            LogEvent::Start { t, job, workers, inference_workers, rate } => {
                let l = live.entry(job.clone()).or_default();
                l.stall_until = if l.restart { t + overhead_s } else { *t };
                l.restart = false;
                l.rate = *rate;
                l.from = *t;
                out.entry(job.clone()).or_default().segments.push((*t, *workers, *inference_workers));
            }
            LogEvent::Scale { t, job, workers, inference_workers, rate, .. } => {
                let l = live.get_mut(job).expect("scale after start");
                step(l, *t);
                l.rate = *rate;
                out.entry(job.clone()).or_default().segments.push((*t, *workers, *inference_workers));
            }
            LogEvent::Preempt { t, job } => {
                let l = live.get_mut(job).expect("preempt after start");
                step(l, *t);
                if !by_id[job.as_str()].checkpointing {
                    l.done = 0.0;
                }
                l.rate = 0.0;
                l.restart = true;
                let r = out.entry(job.clone()).or_default();
                r.preempted = true;
                r.segments.push((*t, 0, 0));
            }
            LogEvent::Completion { t, job } => {
                let l = live.get_mut(job).expect("completion after start");
                step(l, *t);
                let r = out.entry(job.clone()).or_default();
                r.done_at_completion = Some(l.done);
                r.completion_s = Some(*t);
            }
            _ => {}
        }
    }
    out
}

/// Finish time of `spec` when its logged worker segments are replayed under
/// `cfg`'s rate model; the last segment runs on until the work is done.
pub fn replay_finish(spec: &JobSpec, segments: &[(f64, u32, u32)], cfg: &ScenarioConfig, overhead_s: f64) -> f64 {
    let total = spec.total_workload();
    let mut done = 0.0;
    let mut stall_until = f64::NEG_INFINITY;
    let mut restart = false;
    let mut running = false;
    for (k, &(t, w, iw)) in segments.iter().enumerate() {
        if w == 0 {
            if !spec.checkpointing {
                done = 0.0;
            }
            restart = true;
            running = false;
            continue;
        }
        if !running {
            stall_until = if restart { t + overhead_s } else { t };
            restart = false;
            running = true;
        }
        let rate = progress_rate(spec, w - iw, iw, cfg);
        let begin = t.max(stall_until);
        let end = segments.get(k + 1).map(|s| s.0);
        match end {
            Some(end) if end > begin => {
                let gain = rate * (end - begin);
                if done + gain >= total {
                    return begin + (total - done) / rate;
                }
                done += gain;
            }
            Some(_) => {}
            None => return begin + (total - done) / rate,
        }
    }
    f64::INFINITY
}

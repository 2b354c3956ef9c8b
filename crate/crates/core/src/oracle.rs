//! Ground truth at desk scale: exhaustive searches and the closed-form optimum
//! for two elastic jobs sharing a cluster.

use serde::{Deserialize, Serialize};

use crate::alloc::MckpInstance;
use crate::cluster::{JobId, ServerId};
use crate::error::{Error, Result};
use crate::reclaim::ReclaimView;
use std::collections::{BTreeMap, BTreeSet};

pub const MAX_EXHAUSTIVE_SERVERS: usize = 20;
pub const MAX_BRUTE_JOBS: usize = 4;
pub const MAX_BRUTE_CAPACITY: u32 = 32;
pub const MAX_MCKP_COMBINATIONS: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustiveReclaim {
    pub preemptions: usize,
    pub servers: Vec<ServerId>,
}

/// A hand-written reclaim instance: on-loan servers plus named jobs with their
/// GPUs per server. Servers a job lists that are not on loan count towards its
/// span only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclaimLayout {
    pub on_loan: Vec<ServerId>,
    pub jobs: BTreeMap<String, BTreeMap<ServerId, u32>>,
    #[serde(default)]
    pub n_r: usize,
}

impl ReclaimLayout {
    /// Job ids follow the name order of `jobs`.
    pub fn view(&self) -> Result<(ReclaimView, Vec<String>)> {
        let mut known: BTreeSet<ServerId> = self.on_loan.iter().copied().collect();
        known.extend(self.jobs.values().flat_map(|p| p.keys().copied()));
        let names: Vec<String> = self.jobs.keys().cloned().collect();
        let placements = self
            .jobs
            .values()
            .enumerate()
            .map(|(i, p)| (JobId(i), p.clone()))
            .collect();
        Ok((ReclaimView::from_parts(self.on_loan.iter().copied(), &known, placements)?, names))
    }
}

/// Minimum number of preempted jobs over every `n_r`-subset of on-loan
/// servers; the first minimal subset in lexicographic order is the witness.
pub fn exhaustive_reclaim(view: &ReclaimView, n_r: usize) -> Result<ExhaustiveReclaim> {
    let servers = view.on_loan();
    if servers.len() > MAX_EXHAUSTIVE_SERVERS {
        return Err(Error::Guard {
            what: "on-loan server set",
            size: servers.len() as u128,
            limit: MAX_EXHAUSTIVE_SERVERS as u128,
        });
    }
    if n_r > servers.len() {
        return Err(Error::Infeasible {
            requested: n_r,
            available: servers.len(),
        });
    }
    let mut idx: Vec<usize> = (0..n_r).collect();
    let mut best: Option<ExhaustiveReclaim> = None;
    loop {
        let hit: BTreeSet<JobId> = idx
            .iter()
            .flat_map(|&i| view.jobs_on(servers[i]).iter().copied())
            .collect();
        if best.as_ref().is_none_or(|b| hit.len() < b.preemptions) {
            best = Some(ExhaustiveReclaim {
                preemptions: hit.len(),
                servers: idx.iter().map(|&i| servers[i]).collect(),
            });
        }
        // next combination in lexicographic order
        let n = servers.len();
        let Some(pos) = (0..n_r).rev().find(|&p| idx[p] < n - n_r + p) else {
            break;
        };
        idx[pos] += 1;
        for p in pos + 1..n_r {
            idx[p] = idx[p - 1] + 1;
        }
    }
    Ok(best.expect("at least the empty or first subset is visited"))
}

/// One job of a two-job instance, sizes in GPUs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoJobSide {
    /// Work in GPU-seconds.
    pub workload: f64,
    pub g_min: u32,
    pub g_max: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoJobInstance {
    /// The job with the smaller maximum demand.
    pub p: TwoJobSide,
    pub q: TwoJobSide,
    pub capacity: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoJobSolution {
    pub g_p: u32,
    pub g_q: u32,
    pub avg_jct: f64,
}

impl TwoJobInstance {
    pub fn check_regime(&self) -> Result<()> {
        let (p, q, c) = (self.p, self.q, self.capacity);
        if p.g_min == 0 || p.g_min > p.g_max || q.g_min == 0 || q.g_min > q.g_max {
            return Err(Error::Regime("scaling ranges must satisfy 0 < g_min <= g_max".into()));
        }
        if !(p.workload > 0.0 && q.workload > 0.0) {
            return Err(Error::Regime("workloads must be positive".into()));
        }
        if !(p.g_max <= q.g_max && q.g_max < c) {
            return Err(Error::Regime(format!(
                "need g_max(p) <= g_max(q) < C, got {} <= {} < {c}",
                p.g_max, q.g_max
            )));
        }
        if !(p.g_min + q.g_min < c && c < p.g_max + q.g_max) {
            return Err(Error::Regime(format!(
                "need g_min(p) + g_min(q) < C < g_max(p) + g_max(q), got {} < {c} < {}",
                p.g_min + q.g_min,
                p.g_max + q.g_max
            )));
        }
        Ok(())
    }

    /// Feasible interval of `g_p` when the whole capacity is handed out.
    pub fn g_p_bounds(&self) -> (u32, u32) {
        let c = self.capacity;
        let lo = self.p.g_min.max(c.saturating_sub(self.q.g_max));
        let hi = self.p.g_max.min(c - self.q.g_min);
        (lo, hi)
    }

    /// Average JCT when `p` starts with `g_p` GPUs and `q` with the rest; the
    /// job finishing second then runs at its maximum.
    pub fn avg_jct(&self, g_p: f64) -> f64 {
        let (lp, lq) = (self.p.workload, self.q.workload);
        let c = f64::from(self.capacity);
        let gq = c - g_p;
        let (gmax_p, gmax_q) = (f64::from(self.p.g_max), f64::from(self.q.g_max));
        if lp / g_p <= lq / gq {
            (lp + lq) / (2.0 * gmax_q) + lp / g_p * (1.0 - c / (2.0 * gmax_q))
        } else {
            (lp + lq) / (2.0 * gmax_p) + lq / gq * (1.0 - c / (2.0 * gmax_p))
        }
    }
}

/// Optimal initial split for two elastic jobs.
///
/// With `C >= 2 g_max(p)` the average JCT falls monotonically in `g_p`, so
/// `p` gets as much as it can take. Below that the optimum sits at one end of
/// the feasible interval; both ends are evaluated and a tie goes to giving
/// the job with less work its maximum.
pub fn two_job_optimal(inst: &TwoJobInstance) -> Result<TwoJobSolution> {
    inst.check_regime()?;
    let (lo, hi) = inst.g_p_bounds();
    let g_p = if inst.capacity >= 2 * inst.p.g_max {
        hi
    } else {
        let (f_lo, f_hi) = (inst.avg_jct(f64::from(lo)), inst.avg_jct(f64::from(hi)));
        if (f_lo - f_hi).abs() <= 1e-12 * f_lo.abs().max(1.0) {
            if inst.p.workload <= inst.q.workload {
                hi
            } else {
                lo
            }
        } else if f_hi < f_lo {
            hi
        } else {
            lo
        }
    };
    Ok(TwoJobSolution {
        g_p,
        g_q: inst.capacity - g_p,
        avg_jct: inst.avg_jct(f64::from(g_p)),
    })
}

/// The rule as usually stated: above `2 g_max(p)` job `p` gets its maximum,
/// below it the job with the smaller workload does.
pub fn two_job_workload_rule(inst: &TwoJobInstance) -> Result<TwoJobSolution> {
    inst.check_regime()?;
    let (lo, hi) = inst.g_p_bounds();
    let g_p = if inst.capacity >= 2 * inst.p.g_max || inst.p.workload <= inst.q.workload {
        hi
    } else {
        lo
    };
    Ok(TwoJobSolution {
        g_p,
        g_q: inst.capacity - g_p,
        avg_jct: inst.avg_jct(f64::from(g_p)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteJob {
    /// Work in worker-seconds.
    pub workload: f64,
    pub min_workers: u32,
    pub max_workers: u32,
    pub gpus_per_worker: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteAllocation {
    pub workers: Vec<u32>,
    pub avg_jct: f64,
}

/// Average JCT of all jobs starting together with `workers`; whenever a job
/// finishes, the survivors with the least time left take the freed GPUs first,
/// each up to its maximum.
pub fn simulate_scale_up(jobs: &[BruteJob], workers: &[u32], capacity: u32) -> f64 {
    let mut left: Vec<f64> = jobs.iter().map(|j| j.workload).collect();
    let mut w = workers.to_vec();
    let mut alive: Vec<usize> = (0..jobs.len()).collect();
    let mut t = 0.0;
    let mut total = 0.0;
    while !alive.is_empty() {
        let dt = alive
            .iter()
            .map(|&i| left[i] / f64::from(w[i]))
            .fold(f64::INFINITY, f64::min);
        t += dt;
        let mut done = Vec::new();
        for &i in &alive {
            let finish = left[i] / f64::from(w[i]);
            if (finish - dt).abs() <= 1e-12 * finish.max(1.0) {
                done.push(i);
            } else {
                left[i] -= dt * f64::from(w[i]);
            }
        }
        total += t * done.len() as f64;
        alive.retain(|i| !done.contains(i));
        let used: u32 = alive.iter().map(|&i| w[i] * jobs[i].gpus_per_worker).sum();
        let mut free = capacity - used;
        let mut order = alive.clone();
        order.sort_by(|&a, &b| {
            (left[a] / f64::from(w[a]))
                .total_cmp(&(left[b] / f64::from(w[b])))
                .then(a.cmp(&b))
        });
        for i in order {
            let d = jobs[i].gpus_per_worker;
            while w[i] < jobs[i].max_workers && d <= free {
                w[i] += 1;
                free -= d;
            }
        }
    }
    total / jobs.len() as f64
}

/// Best initial allocation by enumerating every worker vector that fits.
pub fn brute_force_allocation(jobs: &[BruteJob], capacity: u32) -> Result<BruteAllocation> {
    if jobs.len() > MAX_BRUTE_JOBS {
        return Err(Error::Guard {
            what: "job count",
            size: jobs.len() as u128,
            limit: MAX_BRUTE_JOBS as u128,
        });
    }
    if capacity > MAX_BRUTE_CAPACITY {
        return Err(Error::Guard {
            what: "capacity",
            size: u128::from(capacity),
            limit: u128::from(MAX_BRUTE_CAPACITY),
        });
    }
    let mut best: Option<BruteAllocation> = None;
    let mut w: Vec<u32> = jobs.iter().map(|j| j.min_workers).collect();
    if jobs.is_empty() {
        return Ok(BruteAllocation {
            workers: Vec::new(),
            avg_jct: 0.0,
        });
    }
    loop {
        let used: u32 = w.iter().zip(jobs).map(|(w, j)| w * j.gpus_per_worker).sum();
        if used <= capacity {
            let avg = simulate_scale_up(jobs, &w, capacity);
            if best.as_ref().is_none_or(|b| avg < b.avg_jct - 1e-12) {
                best = Some(BruteAllocation {
                    workers: w.clone(),
                    avg_jct: avg,
                });
            }
        }
        let Some(k) = (0..jobs.len()).rev().find(|&k| w[k] < jobs[k].max_workers) else {
            break;
        };
        w[k] += 1;
        for (slot, j) in w.iter_mut().zip(jobs).skip(k + 1) {
            *slot = j.min_workers;
        }
    }
    best.ok_or_else(|| Error::Regime("no allocation fits every base demand".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteMckp {
    pub value: f64,
    pub choices: BTreeMap<usize, usize>,
}

/// Optimal knapsack value by trying every combination.
pub fn brute_force_mckp(inst: &MckpInstance, capacity: u32) -> Result<BruteMckp> {
    let size = inst
        .groups
        .iter()
        .try_fold(1u128, |acc, g| acc.checked_mul(g.items.len() as u128 + 1))
        .unwrap_or(u128::MAX);
    if size > MAX_MCKP_COMBINATIONS {
        return Err(Error::Guard {
            what: "MCKP combination count",
            size,
            limit: MAX_MCKP_COMBINATIONS,
        });
    }
    // pick[g] == 0 means nothing from group g, otherwise item pick[g] - 1
    let mut pick = vec![0usize; inst.groups.len()];
    let mut best = BruteMckp {
        value: 0.0,
        choices: BTreeMap::new(),
    };
    loop {
        let choices: BTreeMap<usize, usize> = pick
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0)
            .map(|(g, p)| (g, p - 1))
            .collect();
        if inst.total_weight(&choices) <= capacity {
            let v = inst.total_value(&choices);
            if v > best.value {
                best = BruteMckp { value: v, choices };
            }
        }
        let Some(g) = (0..pick.len()).find(|&g| pick[g] < inst.groups[g].items.len()) else {
            break;
        };
        pick[g] += 1;
        for p in pick.iter_mut().take(g) {
            *p = 0;
        }
    }
    Ok(best)
}

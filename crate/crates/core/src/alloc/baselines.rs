//! Baseline allocators used for comparison.

use std::collections::BTreeMap;

use super::{allocate_inelastic, arrival_cmp, elastic_capacity, sort_jobs, AllocJob, AllocationPlan, Allocator};
use crate::cluster::JobId;

/// Strict arrival order, every job asks for `max_workers`, head-of-line
/// blocking. Running jobs are left alone.
pub fn allocate_fifo(queued: &[AllocJob], capacity: u32) -> AllocationPlan {
    let mut order = queued.to_vec();
    order.sort_by(arrival_cmp);
    let mut plan = AllocationPlan::default();
    let mut left = capacity;
    let mut blocked = false;
    for j in &order {
        let need = j.max_workers * j.gpus_per_worker;
        if !blocked && need <= left {
            left -= need;
            plan.grant(j, j.max_workers);
        } else {
            blocked = true;
            plan.deferred.push(j.id);
        }
    }
    plan
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FifoAllocator;

impl Allocator for FifoAllocator {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn allocate(&self, queued: &[AllocJob], _running_elastic: &[AllocJob], idle_gpus: u32) -> AllocationPlan {
        allocate_fifo(queued, idle_gpus)
    }

    fn head_of_line_blocking(&self) -> bool {
        true
    }
}

/// Throughput of `w` workers in training-GPU units, with an optional loss per
/// worker beyond the midpoint of the scaling range.
pub(crate) fn throughput(job: &AllocJob, w: u32, imperfect_loss: Option<f64>) -> f64 {
    let eta = match imperfect_loss {
        Some(loss) => {
            let mid = (job.min_workers + job.max_workers).div_ceil(2);
            (1.0 - loss).powi(w.saturating_sub(mid) as i32)
        }
        None => 1.0,
    };
    f64::from(w) * eta
}

/// Base demands in shortest-job-first order, then one worker at a time to
/// the job with the largest throughput gain per GPU.
pub fn allocate_afs(
    queued: &[AllocJob],
    running_elastic: &[AllocJob],
    capacity: u32,
    imperfect_loss: Option<f64>,
) -> AllocationPlan {
    let sorted = sort_jobs(queued);
    let base = allocate_inelastic(&sorted, capacity);
    let mut plan = AllocationPlan {
        deferred: base.deferred.clone(),
        ..AllocationPlan::default()
    };
    let by_id: BTreeMap<JobId, &AllocJob> = queued.iter().chain(running_elastic).map(|j| (j.id, j)).collect();
    let mut workers: BTreeMap<JobId, u32> = BTreeMap::new();
    for id in base.granted.iter().chain(running_elastic.iter().map(|j| &j.id)) {
        workers.insert(*id, by_id[id].min_workers);
    }
    let mut left = base.remaining;
    loop {
        let mut best: Option<(f64, f64, JobId)> = None;
        for (&id, &w) in &workers {
            let j = by_id[&id];
            if w >= j.max_workers || j.gpus_per_worker > left {
                continue;
            }
            let gain = (throughput(j, w + 1, imperfect_loss) - throughput(j, w, imperfect_loss))
                / f64::from(j.gpus_per_worker);
            if gain <= 0.0 {
                continue;
            }
            let rt = j.remaining / f64::from(w);
            let better = match best {
                None => true,
                Some((bg, brt, bid)) => {
                    gain > bg + 1e-12 || ((gain - bg).abs() <= 1e-12 && (rt, id) < (brt, bid))
                }
            };
            if better {
                best = Some((gain, rt, id));
            }
        }
        let Some((_, _, id)) = best else { break };
        *workers.get_mut(&id).expect("candidate is tracked") += 1;
        left -= by_id[&id].gpus_per_worker;
    }
    for (id, w) in workers {
        plan.grant(by_id[&id], w);
    }
    plan
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AfsAllocator {
    pub imperfect_loss: Option<f64>,
}

impl Allocator for AfsAllocator {
    fn name(&self) -> &'static str {
        "afs"
    }

    fn allocate(&self, queued: &[AllocJob], running_elastic: &[AllocJob], idle_gpus: u32) -> AllocationPlan {
        allocate_afs(
            queued,
            running_elastic,
            elastic_capacity(running_elastic, idle_gpus),
            self.imperfect_loss,
        )
    }
}

/// Extra workers per job when the cluster is under-utilized: one worker per
/// job in id order, round after round, while idle GPUs fit.
pub fn allocate_gandiva(running_elastic: &[AllocJob], idle_gpus: u32, pending_empty: bool) -> BTreeMap<JobId, u32> {
    let mut grants = BTreeMap::new();
    if !pending_empty {
        return grants;
    }
    let mut order: Vec<&AllocJob> = running_elastic.iter().collect();
    order.sort_by_key(|j| j.id);
    let mut left = idle_gpus;
    loop {
        let mut progressed = false;
        for j in &order {
            let extra = grants.get(&j.id).copied().unwrap_or(0);
            if j.current_workers + extra < j.max_workers && j.gpus_per_worker <= left {
                left -= j.gpus_per_worker;
                grants.insert(j.id, extra + 1);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    grants
}

/// Arrival-order base demands with head-of-line blocking; elastic jobs scale
/// out only while nothing is waiting and shrink back when something is.
#[derive(Clone, Copy, Debug, Default)]
pub struct GandivaAllocator;

impl Allocator for GandivaAllocator {
    fn name(&self) -> &'static str {
        "gandiva"
    }

    fn allocate(&self, queued: &[AllocJob], running_elastic: &[AllocJob], idle_gpus: u32) -> AllocationPlan {
        let mut left = elastic_capacity(running_elastic, idle_gpus);
        let mut order = queued.to_vec();
        order.sort_by(arrival_cmp);
        let mut plan = AllocationPlan::default();
        let mut fresh = Vec::new();
        for j in &order {
            if plan.deferred.is_empty() && j.base_gpus() <= left {
                left -= j.base_gpus();
                plan.grant(j, j.min_workers);
                fresh.push(AllocJob {
                    current_workers: j.min_workers,
                    ..j.clone()
                });
            } else {
                plan.deferred.push(j.id);
            }
        }
        let mut kept = Vec::new();
        for j in running_elastic {
            let flex = (j.current_workers - j.min_workers).min(left / j.gpus_per_worker);
            left -= flex * j.gpus_per_worker;
            plan.grant(j, j.min_workers + flex);
            kept.push(AllocJob {
                current_workers: j.min_workers + flex,
                ..j.clone()
            });
        }
        let pool: Vec<AllocJob> = kept.into_iter().chain(fresh).filter(AllocJob::is_elastic).collect();
        let extra = allocate_gandiva(&pool, left, plan.deferred.is_empty());
        for j in &pool {
            if let Some(e) = extra.get(&j.id) {
                plan.grant(j, j.current_workers + e);
            }
        }
        plan
    }

    fn head_of_line_blocking(&self) -> bool {
        true
    }
}

//! Deciding how many workers each job gets at a scheduling pass.
//!
//! The two-phase allocator first grants base demands in shortest-job-first
//! order, skipping jobs that do not fit, then spends the leftover GPUs on
//! flexible workers by solving a multiple-choice knapsack whose groups are
//! the elastic jobs and whose items are flexible-worker grants.

mod baselines;
pub mod mckp;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use baselines::{allocate_afs, allocate_fifo, allocate_gandiva, AfsAllocator, FifoAllocator, GandivaAllocator};
pub use mckp::{mckp_dp, MckpGroup, MckpInstance, MckpItem, MckpSolution};

use crate::cluster::JobId;

/// What an allocator needs to know about one job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocJob {
    pub id: JobId,
    pub submit_s: u64,
    pub gpus_per_worker: u32,
    pub min_workers: u32,
    pub max_workers: u32,
    /// Estimated remaining work, worker-seconds at training-GPU speed.
    pub remaining: f64,
    /// Workers currently held; zero for queued jobs.
    pub current_workers: u32,
}

impl AllocJob {
    pub fn is_elastic(&self) -> bool {
        self.min_workers < self.max_workers
    }

    pub fn base_gpus(&self) -> u32 {
        self.min_workers * self.gpus_per_worker
    }

    /// Running time at the base worker count.
    pub fn t_max(&self) -> f64 {
        self.remaining / f64::from(self.min_workers)
    }

    pub fn flexible_gpus(&self) -> u32 {
        self.current_workers.saturating_sub(self.min_workers) * self.gpus_per_worker
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// Total workers per job. Running jobs missing here keep their workers.
    pub scheduled: BTreeMap<JobId, u32>,
    /// Workers beyond `min_workers`, for every scheduled job.
    pub flexible_grant: BTreeMap<JobId, u32>,
    /// Queued jobs left waiting.
    pub deferred: Vec<JobId>,
}

impl AllocationPlan {
    pub fn grant(&mut self, job: &AllocJob, workers: u32) {
        debug_assert!((job.min_workers..=job.max_workers).contains(&workers));
        self.scheduled.insert(job.id, workers);
        self.flexible_grant.insert(job.id, workers - job.min_workers);
    }

    /// GPUs the plan hands out, counting only jobs it lists.
    pub fn gpus<'a>(&self, jobs: impl IntoIterator<Item = &'a AllocJob>) -> u32 {
        jobs.into_iter()
            .filter_map(|j| self.scheduled.get(&j.id).map(|w| w * j.gpus_per_worker))
            .sum()
    }
}

pub trait Allocator: Send + Sync {
    fn name(&self) -> &'static str;

    /// `queued` holds waiting jobs, `running_elastic` the running elastic ones;
    /// `idle_gpus` counts free GPUs the training scheduler controls.
    fn allocate(&self, queued: &[AllocJob], running_elastic: &[AllocJob], idle_gpus: u32) -> AllocationPlan;

    /// Whether a job that cannot be placed blocks every later arrival.
    fn head_of_line_blocking(&self) -> bool {
        false
    }
}

/// Idle GPUs plus GPUs held by flexible workers of running elastic jobs.
pub fn elastic_capacity(running_elastic: &[AllocJob], idle_gpus: u32) -> u32 {
    idle_gpus + running_elastic.iter().map(AllocJob::flexible_gpus).sum::<u32>()
}

fn sjf_cmp(a: &AllocJob, b: &AllocJob) -> Ordering {
    a.t_max()
        .total_cmp(&b.t_max())
        .then(a.submit_s.cmp(&b.submit_s))
        .then(a.id.cmp(&b.id))
}

pub(crate) fn arrival_cmp(a: &AllocJob, b: &AllocJob) -> Ordering {
    a.submit_s.cmp(&b.submit_s).then(a.id.cmp(&b.id))
}

/// Shortest job first by running time at the base worker count.
pub fn sort_jobs(queued: &[AllocJob]) -> Vec<AllocJob> {
    let mut v = queued.to_vec();
    v.sort_by(sjf_cmp);
    v
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaseGrants {
    pub granted: Vec<JobId>,
    pub deferred: Vec<JobId>,
    pub remaining: u32,
}

/// Walks `sorted`, granting each job its base demand while it fits.
pub fn allocate_inelastic(sorted: &[AllocJob], capacity: u32) -> BaseGrants {
    let mut out = BaseGrants {
        remaining: capacity,
        ..BaseGrants::default()
    };
    for j in sorted {
        if j.base_gpus() <= out.remaining {
            out.remaining -= j.base_gpus();
            out.granted.push(j.id);
        } else {
            out.deferred.push(j.id);
        }
    }
    out
}

/// One group per elastic job, ordered as given; inelastic jobs are omitted.
pub fn build_mckp<'a>(jobs: impl IntoIterator<Item = &'a AllocJob>) -> MckpInstance {
    let groups = jobs
        .into_iter()
        .filter(|j| j.is_elastic())
        .map(|j| {
            let t_max = j.t_max();
            let base = f64::from(j.min_workers);
            let items = (1..=j.max_workers - j.min_workers)
                .map(|w| MckpItem {
                    flex_workers: w,
                    weight: w * j.gpus_per_worker,
                    value: t_max * f64::from(w) / (f64::from(w) + base),
                })
                .collect();
            MckpGroup { job: j.id, items }
        })
        .collect();
    MckpInstance { groups }
}

/// Two-phase allocation over `capacity` GPUs (idle plus flexible).
pub fn allocate_lyra(queued: &[AllocJob], running_elastic: &[AllocJob], capacity: u32) -> AllocationPlan {
    let sorted = sort_jobs(queued);
    let base = allocate_inelastic(&sorted, capacity);
    let mut plan = AllocationPlan {
        deferred: base.deferred.clone(),
        ..AllocationPlan::default()
    };
    let by_id: BTreeMap<JobId, &AllocJob> = queued.iter().chain(running_elastic).map(|j| (j.id, j)).collect();
    for id in &base.granted {
        plan.grant(by_id[id], by_id[id].min_workers);
    }
    for j in running_elastic {
        plan.grant(j, j.min_workers);
    }

    let mut elastic: Vec<&AllocJob> = base
        .granted
        .iter()
        .map(|id| by_id[id])
        .chain(running_elastic)
        .filter(|j| j.is_elastic())
        .collect();
    elastic.sort_by_key(|j| j.id);
    let inst = build_mckp(elastic.iter().copied());
    let sol = mckp_dp(&inst, base.remaining);
    for (id, flex) in sol.flex_grants(&inst) {
        let j = by_id[&id];
        plan.grant(j, j.min_workers + flex);
    }
    plan
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LyraAllocator;

impl Allocator for LyraAllocator {
    fn name(&self) -> &'static str {
        "lyra"
    }

    fn allocate(&self, queued: &[AllocJob], running_elastic: &[AllocJob], idle_gpus: u32) -> AllocationPlan {
        allocate_lyra(queued, running_elastic, elastic_capacity(running_elastic, idle_gpus))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocPolicy {
    Lyra,
    Fifo,
    Afs,
    Gandiva,
}

impl AllocPolicy {
    pub fn name(self) -> &'static str {
        match self {
            AllocPolicy::Lyra => "lyra",
            AllocPolicy::Fifo => "fifo",
            AllocPolicy::Afs => "afs",
            AllocPolicy::Gandiva => "gandiva",
        }
    }

    /// `imperfect_loss` feeds the throughput model of the AFS-like baseline.
    pub fn build(self, imperfect_loss: Option<f64>) -> Box<dyn Allocator> {
        match self {
            AllocPolicy::Lyra => Box::new(LyraAllocator),
            AllocPolicy::Fifo => Box::new(FifoAllocator),
            AllocPolicy::Afs => Box::new(AfsAllocator { imperfect_loss }),
            AllocPolicy::Gandiva => Box::new(GandivaAllocator),
        }
    }
}

impl std::str::FromStr for AllocPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lyra" => Ok(AllocPolicy::Lyra),
            "fifo" => Ok(AllocPolicy::Fifo),
            "afs" => Ok(AllocPolicy::Afs),
            "gandiva" => Ok(AllocPolicy::Gandiva),
            other => Err(format!("unknown allocation policy `{other}`")),
        }
    }
}

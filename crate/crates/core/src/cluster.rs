//! Cluster bookkeeping shared by every policy and by the simulator.
//!
//! A [`Cluster`] owns the servers of both the training and the inference
//! cluster together with every job known to the scheduler. Servers move
//! between the two whitelists when they are loaned or reclaimed; workers are
//! only ever placed on servers in the training whitelist.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GPUS_PER_SERVER: u32 = 8;
pub const DEFAULT_INFERENCE_SPEED: f64 = 0.25;

/// Tolerance used when checking that a finished job has no work left.
pub const WORK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub usize);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job#{}", self.0)
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "server#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpuKind {
    Training,
    Inference,
}

impl GpuKind {
    /// Progress per worker-second relative to a training GPU.
    pub fn speed_factor(self, inference_speed: f64) -> f64 {
        match self {
            GpuKind::Training => 1.0,
            GpuKind::Inference => inference_speed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerGroup {
    TrainingPool,
    LoanBase,
    LoanFlexible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Flexible,
}

impl Role {
    pub fn loan_group(self) -> ServerGroup {
        match self {
            Role::Base => ServerGroup::LoanBase,
            Role::Flexible => ServerGroup::LoanFlexible,
        }
    }
}

/// A training job as submitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    pub submit_s: u64,
    pub gpus_per_worker: u32,
    pub min_workers: u32,
    pub max_workers: u32,
    /// Running time when granted `max_workers` training-GPU workers.
    pub runtime_at_max_s: f64,
    #[serde(default)]
    pub gpu_flexible: bool,
    #[serde(default)]
    pub checkpointing: bool,
    #[serde(default)]
    pub hetero_capable: bool,
}

impl JobSpec {
    pub fn is_elastic(&self) -> bool {
        self.min_workers < self.max_workers
    }

    /// Total work in worker-seconds at training-GPU speed.
    pub fn total_workload(&self) -> f64 {
        self.runtime_at_max_s * f64::from(self.max_workers)
    }

    /// Whether the job may have workers on inference servers at all.
    pub fn inference_eligible(&self) -> bool {
        self.gpu_flexible || self.hetero_capable
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty job id".into());
        }
        if self.gpus_per_worker == 0 {
            return Err("gpus_per_worker must be positive".into());
        }
        if self.min_workers == 0 {
            return Err("min_workers must be positive".into());
        }
        if self.min_workers > self.max_workers {
            return Err(format!(
                "min_workers ({}) exceeds max_workers ({})",
                self.min_workers, self.max_workers
            ));
        }
        if !(self.runtime_at_max_s > 0.0 && self.runtime_at_max_s.is_finite()) {
            return Err("runtime_at_max_s must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub total: f64,
    pub remaining: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Queued,
    Running,
    Preempted,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub server: ServerId,
    pub role: Role,
}

/// Time accounting for a job. All times are simulation seconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accounting {
    /// Progress rate in worker-equivalents per second while running.
    pub rate: f64,
    pub last_update_s: f64,
    /// No progress is made before this instant (restore after preemption).
    pub stall_until_s: f64,
    /// Overhead to charge when the job next starts.
    pub pending_overhead_s: f64,
    pub queued_since_s: Option<f64>,
    pub queuing_s: f64,
    pub running_s: f64,
    pub overhead_s: f64,
    /// Bumped whenever a projected completion becomes stale.
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobState {
    pub spec: JobSpec,
    pub workload: Workload,
    pub phase: Phase,
    pub workers: Vec<Worker>,
    pub first_start_s: Option<f64>,
    pub finish_s: Option<f64>,
    pub preempt_count: u32,
    pub estimated_runtime_s: f64,
    pub acct: Accounting,
}

impl JobState {
    pub fn new(spec: JobSpec) -> Self {
        let total = spec.total_workload();
        let estimated_runtime_s = spec.runtime_at_max_s;
        JobState {
            workload: Workload {
                total,
                remaining: total,
            },
            phase: Phase::Queued,
            workers: Vec::new(),
            first_start_s: None,
            finish_s: None,
            preempt_count: 0,
            estimated_runtime_s,
            acct: Accounting {
                queued_since_s: Some(spec.submit_s as f64),
                ..Accounting::default()
            },
            spec,
        }
    }

    pub fn worker_count(&self) -> u32 {
        self.workers.len() as u32
    }

    pub fn base_workers(&self) -> u32 {
        self.workers.iter().filter(|w| w.role == Role::Base).count() as u32
    }

    pub fn flexible_workers(&self) -> u32 {
        self.workers
            .iter()
            .filter(|w| w.role == Role::Flexible)
            .count() as u32
    }

    pub fn is_waiting(&self) -> bool {
        matches!(self.phase, Phase::Queued | Phase::Preempted)
    }

    /// Remaining work as seen by the scheduler, scaled by the runtime estimate.
    pub fn estimated_remaining(&self) -> f64 {
        self.workload.remaining * (self.estimated_runtime_s / self.spec.runtime_at_max_s)
    }

    /// Integrates progress up to `now`.
    pub fn advance_to(&mut self, now: f64) {
        let from = self.acct.last_update_s;
        if self.phase != Phase::Running || now <= from {
            if self.phase == Phase::Running {
                self.acct.last_update_s = self.acct.last_update_s.max(now);
            }
            return;
        }
        let stall_end = self.acct.stall_until_s.clamp(from, now);
        self.acct.overhead_s += stall_end - from;
        let run = now - stall_end;
        self.acct.running_s += run;
        self.workload.remaining = (self.workload.remaining - self.acct.rate * run).max(0.0);
        self.acct.last_update_s = now;
    }

    /// Marks the job running from `now`, charging any pending overhead.
    pub fn start(&mut self, now: f64) {
        if let Some(since) = self.acct.queued_since_s.take() {
            self.acct.queuing_s += now - since;
        }
        self.phase = Phase::Running;
        self.first_start_s.get_or_insert(now);
        self.acct.last_update_s = now;
        self.acct.stall_until_s = now + self.acct.pending_overhead_s;
        self.acct.pending_overhead_s = 0.0;
    }

    /// Requeues the job after its workers were removed. Callers must have
    /// advanced progress to `now` first.
    pub fn preempt(&mut self, now: f64, overhead_s: f64) {
        debug_assert!(self.workers.is_empty());
        self.phase = Phase::Preempted;
        self.preempt_count += 1;
        if !self.spec.checkpointing {
            self.workload.remaining = self.workload.total;
        }
        self.acct.pending_overhead_s = overhead_s;
        self.acct.queued_since_s = Some(now);
        self.acct.rate = 0.0;
        self.acct.version += 1;
    }

    pub fn finish(&mut self, now: f64) {
        self.phase = Phase::Finished;
        self.finish_s = Some(now);
        self.workload.remaining = 0.0;
        self.acct.rate = 0.0;
        self.acct.version += 1;
    }

    /// Time at which the job completes if nothing changes.
    pub fn projected_finish(&self) -> Option<f64> {
        if self.phase != Phase::Running || self.acct.rate <= 0.0 {
            return None;
        }
        let begin = self.acct.last_update_s.max(self.acct.stall_until_s);
        Some(begin + self.workload.remaining / self.acct.rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Server {
    pub name: String,
    pub kind: GpuKind,
    pub total_gpus: u32,
    pub free_gpus: u32,
    pub on_loan: bool,
    /// `None` for inference servers that are not on loan, and for on-loan
    /// servers that host no workers yet.
    pub group: Option<ServerGroup>,
    pub occupants: BTreeMap<JobId, u32>,
}

impl Server {
    pub fn new(name: impl Into<String>, kind: GpuKind, total_gpus: u32) -> Self {
        Server {
            name: name.into(),
            kind,
            total_gpus,
            free_gpus: total_gpus,
            on_loan: false,
            group: (kind == GpuKind::Training).then_some(ServerGroup::TrainingPool),
            occupants: BTreeMap::new(),
        }
    }

    pub fn used_gpus(&self) -> u32 {
        self.total_gpus - self.free_gpus
    }

    pub fn is_empty(&self) -> bool {
        self.occupants.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub servers: Vec<Server>,
    pub jobs: Vec<JobState>,
    pub whitelist_training: BTreeSet<ServerId>,
    pub whitelist_inference: BTreeSet<ServerId>,
    pub now_s: f64,
    pub inference_speed: f64,
    /// Fraction of all inference GPUs busy serving requests.
    pub inference_util: f64,
}

impl Cluster {
    /// Builds `training` training servers (`t000`, ...) followed by
    /// `inference` inference servers (`i000`, ...).
    pub fn new(training: usize, inference: usize, gpus_per_server: u32) -> Self {
        let mut servers = Vec::with_capacity(training + inference);
        servers.extend((0..training).map(|i| {
            Server::new(format!("t{i:03}"), GpuKind::Training, gpus_per_server)
        }));
        servers.extend((0..inference).map(|i| {
            Server::new(format!("i{i:03}"), GpuKind::Inference, gpus_per_server)
        }));
        Self::with_servers(servers)
    }

    pub fn with_servers(servers: Vec<Server>) -> Self {
        let mut whitelist_training = BTreeSet::new();
        let mut whitelist_inference = BTreeSet::new();
        for (i, s) in servers.iter().enumerate() {
            if s.kind == GpuKind::Training || s.on_loan {
                whitelist_training.insert(ServerId(i));
            } else {
                whitelist_inference.insert(ServerId(i));
            }
        }
        Cluster {
            servers,
            jobs: Vec::new(),
            whitelist_training,
            whitelist_inference,
            now_s: 0.0,
            inference_speed: DEFAULT_INFERENCE_SPEED,
            inference_util: 0.0,
        }
    }

    pub fn add_job(&mut self, spec: JobSpec) -> JobId {
        self.jobs.push(JobState::new(spec));
        JobId(self.jobs.len() - 1)
    }

    pub fn server(&self, id: ServerId) -> Result<&Server> {
        self.servers
            .get(id.0)
            .ok_or_else(|| Error::UnknownServer(id.to_string()))
    }

    pub fn job(&self, id: JobId) -> Result<&JobState> {
        self.jobs
            .get(id.0)
            .ok_or_else(|| Error::UnknownJob(id.to_string()))
    }

    pub fn server_by_name(&self, name: &str) -> Option<ServerId> {
        self.servers
            .iter()
            .position(|s| s.name == name)
            .map(ServerId)
    }

    pub fn job_by_name(&self, name: &str) -> Option<JobId> {
        self.jobs.iter().position(|j| j.spec.id == name).map(JobId)
    }

    pub fn server_name(&self, id: ServerId) -> &str {
        &self.servers[id.0].name
    }

    pub fn job_name(&self, id: JobId) -> &str {
        &self.jobs[id.0].spec.id
    }

    pub fn on_loan_servers(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.servers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.on_loan)
            .map(|(i, _)| ServerId(i))
    }

    pub fn on_loan_count(&self) -> usize {
        self.servers.iter().filter(|s| s.on_loan).count()
    }

    /// Jobs occupying `server` and the GPUs each one uses there.
    pub fn occupancy(&self, server: ServerId) -> Result<Vec<(JobId, u32)>> {
        let s = self.server(server)?;
        Ok(s.occupants.iter().map(|(&j, &g)| (j, g)).collect())
    }

    /// Every server hosting at least one worker of `job`.
    pub fn job_servers(&self, job: JobId) -> BTreeSet<ServerId> {
        self.jobs[job.0].workers.iter().map(|w| w.server).collect()
    }

    /// Idle GPUs on servers the training scheduler controls.
    pub fn idle_training_gpus(&self) -> u32 {
        self.whitelist_training
            .iter()
            .map(|s| self.servers[s.0].free_gpus)
            .sum()
    }

    pub fn place_worker(&mut self, job: JobId, server: ServerId, role: Role) -> Result<()> {
        let gpus = self.job(job)?.spec.gpus_per_worker;
        let eligible = self.jobs[job.0].spec.inference_eligible();
        if !self.whitelist_training.contains(&server) {
            return Err(Error::Ineligible {
                job: self.job_name(job).to_owned(),
                server: self.server(server)?.name.clone(),
            });
        }
        let s = &mut self.servers[server.0];
        if s.kind == GpuKind::Inference && !eligible {
            return Err(Error::Ineligible {
                job: self.jobs[job.0].spec.id.clone(),
                server: s.name.clone(),
            });
        }
        if s.free_gpus < gpus {
            return Err(Error::Overcommit {
                server: s.name.clone(),
                free: s.free_gpus,
                needed: gpus,
            });
        }
        if s.on_loan {
            match s.group {
                None => s.group = Some(role.loan_group()),
                Some(g) if g != role.loan_group() => {
                    return Err(Error::GroupConflict(s.name.clone()))
                }
                Some(_) => {}
            }
        }
        s.free_gpus -= gpus;
        *s.occupants.entry(job).or_insert(0) += gpus;
        self.jobs[job.0].workers.push(Worker { server, role });
        Ok(())
    }

    /// Removes the worker at `index` of `job`.
    pub fn remove_worker(&mut self, job: JobId, index: usize) -> Worker {
        let gpus = self.jobs[job.0].spec.gpus_per_worker;
        let w = self.jobs[job.0].workers.remove(index);
        self.release(job, w.server, gpus);
        w
    }

    /// Removes the most recently added worker of `job` with `role` on `server`.
    pub fn remove_worker_on(&mut self, job: JobId, server: ServerId, role: Role) -> Option<Worker> {
        let idx = self.jobs[job.0]
            .workers
            .iter()
            .rposition(|w| w.server == server && w.role == role)?;
        Some(self.remove_worker(job, idx))
    }

    /// Removes every worker of `job`, returning the GPUs vacated per server.
    pub fn remove_all_workers(&mut self, job: JobId) -> BTreeMap<ServerId, u32> {
        let gpus = self.jobs[job.0].spec.gpus_per_worker;
        let workers = std::mem::take(&mut self.jobs[job.0].workers);
        let mut vacated = BTreeMap::new();
        for w in workers {
            self.release(job, w.server, gpus);
            *vacated.entry(w.server).or_insert(0) += gpus;
        }
        vacated
    }

    fn release(&mut self, job: JobId, server: ServerId, gpus: u32) {
        let s = &mut self.servers[server.0];
        s.free_gpus += gpus;
        if let Some(g) = s.occupants.get_mut(&job) {
            *g -= gpus;
            if *g == 0 {
                s.occupants.remove(&job);
            }
        }
        if s.on_loan && s.occupants.is_empty() {
            s.group = None;
        }
    }

    /// Moves an idle inference server into the training whitelist.
    pub fn loan_server(&mut self, server: ServerId) {
        let s = &mut self.servers[server.0];
        debug_assert!(s.kind == GpuKind::Inference && !s.on_loan);
        s.on_loan = true;
        s.group = None;
        self.whitelist_inference.remove(&server);
        self.whitelist_training.insert(server);
    }

    /// Hands an empty on-loan server back to the inference cluster.
    pub fn return_server(&mut self, server: ServerId) {
        let s = &mut self.servers[server.0];
        debug_assert!(s.on_loan && s.occupants.is_empty());
        s.on_loan = false;
        s.group = None;
        self.whitelist_training.remove(&server);
        self.whitelist_inference.insert(server);
    }

    /// `(training_usage, overall_usage)` in `[0, 1]`.
    ///
    /// Training usage covers servers in the training whitelist (including
    /// on-loan ones); overall usage adds the inference cluster's serving load.
    /// In normalized mode every inference GPU counts as `inference_speed`
    /// training GPUs, in both numerator and denominator.
    pub fn usage_metrics(&self, normalized: bool) -> (f64, f64) {
        let weight = |kind: GpuKind| {
            if normalized {
                kind.speed_factor(self.inference_speed)
            } else {
                1.0
            }
        };
        let (mut train_used, mut train_cap) = (0.0, 0.0);
        for id in &self.whitelist_training {
            let s = &self.servers[id.0];
            let w = weight(s.kind);
            train_used += f64::from(s.used_gpus()) * w;
            train_cap += f64::from(s.total_gpus) * w;
        }
        let all_inference: u32 = self
            .servers
            .iter()
            .filter(|s| s.kind == GpuKind::Inference)
            .map(|s| s.total_gpus)
            .sum();
        let inf_cap_phys: u32 = self
            .whitelist_inference
            .iter()
            .map(|s| self.servers[s.0].total_gpus)
            .sum();
        let w_inf = weight(GpuKind::Inference);
        let serving =
            (self.inference_util * f64::from(all_inference)).min(f64::from(inf_cap_phys)) * w_inf;
        let inf_cap = f64::from(inf_cap_phys) * w_inf;

        let training = if train_cap > 0.0 { train_used / train_cap } else { 0.0 };
        let total_cap = train_cap + inf_cap;
        let overall = if total_cap > 0.0 {
            (train_used + serving) / total_cap
        } else {
            0.0
        };
        (training.clamp(0.0, 1.0), overall.clamp(0.0, 1.0))
    }

    /// Checks whitelist partition, GPU conservation and loan-group separation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if !self.whitelist_training.is_disjoint(&self.whitelist_inference) {
            return Err("whitelists overlap".into());
        }
        if self.whitelist_training.len() + self.whitelist_inference.len() != self.servers.len() {
            return Err("whitelists do not cover every server".into());
        }
        let mut expect: Vec<BTreeMap<JobId, u32>> = vec![BTreeMap::new(); self.servers.len()];
        let mut roles: Vec<BTreeSet<Role>> = vec![BTreeSet::new(); self.servers.len()];
        for (j, job) in self.jobs.iter().enumerate() {
            if job.phase == Phase::Running {
                if job.base_workers() < job.spec.min_workers {
                    return Err(format!("job {} runs below its base demand", job.spec.id));
                }
                if job.worker_count() > job.spec.max_workers {
                    return Err(format!("job {} exceeds max_workers", job.spec.id));
                }
            } else if !job.workers.is_empty() {
                return Err(format!("job {} holds workers while {:?}", job.spec.id, job.phase));
            }
            if job.phase == Phase::Finished && job.workload.remaining.abs() > WORK_EPS {
                return Err(format!("job {} finished with work left", job.spec.id));
            }
            for w in &job.workers {
                *expect[w.server.0].entry(JobId(j)).or_insert(0) += job.spec.gpus_per_worker;
                roles[w.server.0].insert(w.role);
            }
        }
        for (i, s) in self.servers.iter().enumerate() {
            if s.free_gpus > s.total_gpus {
                return Err(format!("server {} has more free GPUs than installed", s.name));
            }
            if s.on_loan != (s.kind == GpuKind::Inference && self.whitelist_training.contains(&ServerId(i))) {
                return Err(format!("server {} loan flag disagrees with whitelists", s.name));
            }
            let used: u32 = expect[i].values().sum();
            if used + s.free_gpus != s.total_gpus || expect[i] != s.occupants {
                return Err(format!("server {} GPU accounting is inconsistent", s.name));
            }
            if s.on_loan && roles[i].len() > 1 {
                return Err(format!("on-loan server {} mixes base and flexible workers", s.name));
            }
        }
        Ok(())
    }
}

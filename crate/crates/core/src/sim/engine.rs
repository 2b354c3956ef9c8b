use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::metrics::{JobMetrics, MetricsReport, UsageSample};
use super::{inject_prediction_error, progress_rate, ScenarioConfig};
use crate::alloc::{arrival_cmp, AllocJob, AllocPolicy, Allocator, LyraAllocator};
use crate::cluster::{Cluster, GpuKind, JobId, JobSpec, Phase, DEFAULT_GPUS_PER_SERVER};
use crate::error::{Error, Result};
use crate::loaning::{execute_loan, execute_reclaim, plan_loaning, LoanAction, LoanInstruction, LoanPolicy};
use crate::place::{apply_placement, place_workers, PlacementPlan};
use crate::reclaim::ReclaimPolicy;

/// Re-planning rounds per scheduling pass after placement defers jobs.
const MAX_REPLANS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterShape {
    pub training_servers: usize,
    pub inference_servers: usize,
    pub gpus_per_server: u32,
}

impl Default for ClusterShape {
    fn default() -> Self {
        ClusterShape {
            training_servers: 64,
            inference_servers: 64,
            gpus_per_server: DEFAULT_GPUS_PER_SERVER,
        }
    }
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LogEvent {
    Arrival {
        t: f64,
        job: String,
    },
    Start {
        t: f64,
        job: String,
        workers: u32,
        inference_workers: u32,
        rate: f64,
    },
    Scale {
        t: f64,
        job: String,
        delta: i64,
        workers: u32,
        inference_workers: u32,
        rate: f64,
    },
    Completion {
        t: f64,
        job: String,
    },
    Preempt {
        t: f64,
        job: String,
    },
    LoanMove {
        t: f64,
        servers: Vec<String>,
    },
    ReclaimMove {
        t: f64,
        servers: Vec<String>,
        drained: usize,
        preempted: usize,
    },
}

impl LogEvent {
    pub fn t(&self) -> f64 {
        match self {
            LogEvent::Arrival { t, .. }
            | LogEvent::Start { t, .. }
            | LogEvent::Scale { t, .. }
            | LogEvent::Completion { t, .. }
            | LogEvent::Preempt { t, .. }
            | LogEvent::LoanMove { t, .. }
            | LogEvent::ReclaimMove { t, .. } => *t,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub events: Vec<LogEvent>,
    pub cluster: Cluster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EvKind {
    Completion { job: JobId, version: u64 },
    OrchTick { periodic: bool },
    SchedTick,
    Arrival { job: JobId },
}

impl EvKind {
    fn rank(self) -> u8 {
        match self {
            EvKind::Completion { .. } => 0,
            EvKind::OrchTick { .. } => 1,
            EvKind::SchedTick => 2,
            EvKind::Arrival { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ev {
    t: f64,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ev {}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

/// A configured simulation, ready to run.
pub struct Simulation {
    shape: ClusterShape,
    config: ScenarioConfig,
    jobs: Vec<JobSpec>,
    util: Vec<(u64, f64)>,
    loan_plan: Option<Vec<LoanInstruction>>,
    allocator: Box<dyn Allocator>,
    reclaim: ReclaimPolicy,
    seed: u64,
    label: Option<String>,
    checked: bool,
}

impl Simulation {
    pub fn new(shape: ClusterShape, config: ScenarioConfig, jobs: Vec<JobSpec>) -> Self {
        Simulation {
            shape,
            config,
            jobs,
            util: Vec::new(),
            loan_plan: None,
            allocator: Box::new(LyraAllocator),
            reclaim: ReclaimPolicy::Lyra,
            seed: 0,
            label: None,
            checked: cfg!(debug_assertions),
        }
    }

    pub fn with_allocator(mut self, allocator: Box<dyn Allocator>) -> Self {
        self.allocator = allocator;
        self
    }

    pub fn with_alloc_policy(self, policy: AllocPolicy) -> Self {
        let loss = self.config.imperfect_scaling.map(|i| i.loss_per_step);
        self.with_allocator(policy.build(loss))
    }

    pub fn with_reclaim(mut self, policy: ReclaimPolicy) -> Self {
        self.reclaim = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Inference utilization samples `(t_s, utilization)`, sorted by time.
    pub fn with_util(mut self, util: Vec<(u64, f64)>) -> Self {
        self.util = util;
        self
    }

    /// Replays recorded instructions instead of the threshold rule.
    pub fn with_loan_plan(mut self, plan: Vec<LoanInstruction>) -> Self {
        self.loan_plan = Some(plan);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Check cluster invariants after every batch of events.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn run(self) -> Result<SimOutput> {
        self.config.validate()?;
        let specs = self.config.transform_jobs(&self.jobs);
        let mut names = BTreeSet::new();
        for s in &specs {
            s.validate().map_err(|e| Error::Config(format!("job {}: {e}", s.id)))?;
            if !names.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate job id {}", s.id)));
            }
        }
        let mut cluster = Cluster::new(
            self.shape.training_servers,
            self.shape.inference_servers,
            self.shape.gpus_per_server,
        );
        cluster.inference_speed = self.config.inference_speed_factor;
        let estimates = self
            .config
            .predict_error
            .map(|p| inject_prediction_error(&specs, p.fraction, p.max_rel, p.seed));
        for (i, s) in specs.into_iter().enumerate() {
            let id = cluster.add_job(s);
            if let Some(e) = &estimates {
                cluster.jobs[id.0].estimated_runtime_s = e[i];
            }
        }
        let label = self
            .label
            .clone()
            .unwrap_or_else(|| format!("{}+{}", self.allocator.name(), self.reclaim.name()));
        let mut engine = Engine::new(self, cluster, label);
        engine.run()?;
        Ok(engine.finish())
    }
}

struct Engine {
    sim: Simulation,
    cluster: Cluster,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    arrived: Vec<bool>,
    pending_arrivals: usize,
    unfinished: usize,
    loan_policy: Option<LoanPolicy>,
    plan_next: usize,
    reclaims: u64,
    log: Vec<LogEvent>,
    report: MetricsReport,
    collateral: Vec<f64>,
    drained: usize,
    returned: usize,
}

impl Engine {
    fn new(sim: Simulation, cluster: Cluster, label: String) -> Self {
        let n = cluster.jobs.len();
        let loan_policy = (sim.config.loaning && sim.loan_plan.is_none() && !sim.util.is_empty()).then_some({
            LoanPolicy {
                headroom: sim.config.loan_headroom,
                interval_s: sim.config.orch_interval_s,
                total_inference_servers: sim.shape.inference_servers,
            }
        });
        let mut e = Engine {
            sim,
            cluster,
            heap: BinaryHeap::new(),
            seq: 0,
            arrived: vec![false; n],
            pending_arrivals: n,
            unfinished: n,
            loan_policy,
            plan_next: 0,
            reclaims: 0,
            log: Vec::new(),
            report: MetricsReport {
                policy: label,
                submissions: n,
                ..MetricsReport::default()
            },
            collateral: Vec::new(),
            drained: 0,
            returned: 0,
        };
        for j in 0..n {
            let t = e.cluster.jobs[j].spec.submit_s as f64;
            e.push(t, EvKind::Arrival { job: JobId(j) });
        }
        e.push(0.0, EvKind::SchedTick);
        e.push(0.0, EvKind::OrchTick { periodic: true });
        if e.sim.config.loaning {
            if let Some(plan) = &e.sim.loan_plan {
                let times: BTreeSet<u64> = plan.iter().map(|i| i.at_s).collect();
                for t in times {
                    e.push(t as f64, EvKind::OrchTick { periodic: false });
                }
            }
        }
        e
    }

    fn push(&mut self, t: f64, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev { t, seq: self.seq, kind }));
    }

    fn util_at(&self, t: f64) -> f64 {
        let u = &self.sim.util;
        let idx = u.partition_point(|(ts, _)| (*ts as f64) <= t);
        match idx {
            0 => u.first().map_or(0.0, |p| p.1),
            i => u[i - 1].1,
        }
    }

    /// Whether the orchestrator may still change the loaned capacity.
    fn orchestrator_active(&self, now: f64) -> bool {
        if !self.sim.config.loaning {
            return false;
        }
        if let Some(plan) = &self.sim.loan_plan {
            return plan[self.plan_next..].iter().any(|i| i.at_s as f64 > now);
        }
        self.loan_policy.is_some() && self.sim.util.last().is_some_and(|(t, _)| *t as f64 > now)
    }

    fn running(&self) -> impl Iterator<Item = JobId> + '_ {
        self.cluster
            .jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| j.phase == Phase::Running)
            .map(|(i, _)| JobId(i))
    }

    fn run(&mut self) -> Result<()> {
        while let Some(Reverse(first)) = self.heap.pop() {
            let now = first.t;
            if self.sim.config.horizon_s.is_some_and(|h| now > h) {
                break;
            }
            let mut batch = vec![first];
            while self.heap.peek().is_some_and(|Reverse(e)| e.t == now) {
                batch.push(self.heap.pop().expect("peeked").0);
            }
            self.cluster.now_s = now;
            let running: Vec<JobId> = self.running().collect();
            for j in running {
                self.cluster.jobs[j.0].advance_to(now);
            }

            let mut need_pass = false;
            let mut sample = false;
            for ev in batch {
                match ev.kind {
                    EvKind::Completion { job, version } => {
                        let st = &self.cluster.jobs[job.0];
                        if st.phase == Phase::Running && st.acct.version == version {
                            self.complete(job, now);
                            need_pass = true;
                        }
                    }
                    EvKind::OrchTick { periodic } => {
                        if periodic {
                            sample = true;
                            let next = now + self.sim.config.orch_interval_s as f64;
                            self.push(next, EvKind::OrchTick { periodic: true });
                        }
                        need_pass |= self.orchestrate(now, periodic)?;
                    }
                    EvKind::SchedTick => {
                        need_pass = true;
                        let next = now + self.sim.config.sched_interval_s as f64;
                        self.push(next, EvKind::SchedTick);
                    }
                    EvKind::Arrival { job } => {
                        self.arrived[job.0] = true;
                        self.pending_arrivals -= 1;
                        self.log.push(LogEvent::Arrival {
                            t: now,
                            job: self.cluster.jobs[job.0].spec.id.clone(),
                        });
                        need_pass = true;
                    }
                }
            }
            if need_pass {
                self.schedule(now)?;
            }
            if sample {
                let (training, overall) = self.cluster.usage_metrics(false);
                self.report.usage.push(UsageSample {
                    t_s: now,
                    training,
                    overall,
                });
            }
            if self.sim.checked {
                self.cluster
                    .check_invariants()
                    .map_err(|e| Error::Invariant(format!("t={now}: {e}")))?;
            }
            if self.unfinished == 0 {
                break;
            }
            let idle = self.running().next().is_none() && self.pending_arrivals == 0;
            if idle && !self.orchestrator_active(now) {
                break;
            }
        }
        Ok(())
    }

    fn complete(&mut self, job: JobId, now: f64) {
        self.cluster.remove_all_workers(job);
        let st = &mut self.cluster.jobs[job.0];
        st.finish(now);
        self.unfinished -= 1;
        self.log.push(LogEvent::Completion {
            t: now,
            job: st.spec.id.clone(),
        });
    }

    /// Applies loan decisions due at `now`. Returns whether capacity changed.
    fn orchestrate(&mut self, now: f64, periodic: bool) -> Result<bool> {
        if !self.sim.util.is_empty() {
            self.cluster.inference_util = self.util_at(now);
        }
        if !self.sim.config.loaning {
            return Ok(false);
        }
        let mut actions = Vec::new();
        if let Some(plan) = &self.sim.loan_plan {
            while self.plan_next < plan.len() && plan[self.plan_next].at_s as f64 <= now {
                actions.push(plan[self.plan_next].action);
                self.plan_next += 1;
            }
        } else if let (Some(policy), true) = (self.loan_policy, periodic) {
            let util = self.util_at(now);
            actions.push(plan_loaning(util, self.cluster.on_loan_count(), &policy));
        }
        let mut changed = false;
        for a in actions {
            match a {
                LoanAction::Hold => {}
                LoanAction::Loan { n } => {
                    let r = execute_loan(&mut self.cluster, n);
                    if !r.moved.is_empty() {
                        changed = true;
                        self.log.push(LogEvent::LoanMove {
                            t: now,
                            servers: r.moved.iter().map(|s| self.cluster.server_name(*s).to_owned()).collect(),
                        });
                    }
                }
                LoanAction::Reclaim { n } => {
                    let n = n.min(self.cluster.on_loan_count());
                    if n > 0 {
                        self.reclaim(n, now)?;
                        changed = true;
                    }
                }
            }
        }
        Ok(changed)
    }

    fn reclaim(&mut self, n: usize, now: f64) -> Result<()> {
        let seed = self.sim.seed.wrapping_add(self.reclaims);
        self.reclaims += 1;
        let r = execute_reclaim(
            &mut self.cluster,
            n,
            self.sim.reclaim,
            seed,
            now,
            self.sim.config.preempt_overhead_s,
        )?;
        for (&j, &removed) in &r.scaled_in {
            if self.cluster.jobs[j.0].phase == Phase::Running {
                self.refresh(j, now);
                self.log_scale(j, -i64::from(removed), now);
            }
        }
        let preempted: Vec<JobId> = r.outcome.iter().flat_map(|o| o.preempted_jobs.iter().copied()).collect();
        for &j in &preempted {
            self.log.push(LogEvent::Preempt {
                t: now,
                job: self.cluster.jobs[j.0].spec.id.clone(),
            });
        }
        self.report.preemptions += preempted.len();
        if let Some(cd) = r.collateral_damage(self.sim.shape.gpus_per_server) {
            self.collateral.push(cd);
        }
        let drained = r
            .steps
            .iter()
            .filter(|s| matches!(s, crate::loaning::ReclaimStep::Drained { .. }))
            .count();
        self.drained += drained;
        self.returned += r.returned.len();
        self.log.push(LogEvent::ReclaimMove {
            t: now,
            servers: r.returned.iter().map(|s| self.cluster.server_name(*s).to_owned()).collect(),
            drained,
            preempted: preempted.len(),
        });
        Ok(())
    }

    fn alloc_job(&self, j: JobId) -> AllocJob {
        let st = &self.cluster.jobs[j.0];
        AllocJob {
            id: j,
            submit_s: st.spec.submit_s,
            gpus_per_worker: st.spec.gpus_per_worker,
            min_workers: st.spec.min_workers,
            max_workers: st.spec.max_workers,
            remaining: st.estimated_remaining(),
            current_workers: st.worker_count(),
        }
    }

    fn schedule(&mut self, now: f64) -> Result<()> {
        let waiting: Vec<AllocJob> = (0..self.cluster.jobs.len())
            .filter(|&i| self.arrived[i] && self.cluster.jobs[i].is_waiting())
            .map(|i| self.alloc_job(JobId(i)))
            .collect();
        let running_elastic: Vec<AllocJob> = self
            .running()
            .filter(|j| self.cluster.jobs[j.0].spec.is_elastic())
            .map(|j| self.alloc_job(j))
            .collect();
        if waiting.is_empty() && running_elastic.is_empty() {
            return Ok(());
        }
        let idle = self.cluster.idle_training_gpus();
        let hol = self.sim.allocator.head_of_line_blocking();

        let mut excluded: BTreeSet<JobId> = BTreeSet::new();
        let mut placement = PlacementPlan::default();
        for _ in 0..MAX_REPLANS {
            let candidates: Vec<AllocJob> = waiting.iter().filter(|j| !excluded.contains(&j.id)).cloned().collect();
            let plan = self.sim.allocator.allocate(&candidates, &running_elastic, idle);
            placement = place_workers(&plan, &self.cluster);
            if placement.deferred.is_empty() {
                break;
            }
            let before = excluded.len();
            if hol {
                let first = candidates
                    .iter()
                    .filter(|j| placement.deferred.contains(&j.id))
                    .min_by(|a, b| arrival_cmp(a, b))
                    .expect("deferred jobs are candidates");
                // drop later arrivals first; they may have taken the head's
                // servers. The head itself goes only when it fails alone.
                let later: Vec<JobId> = candidates
                    .iter()
                    .filter(|j| arrival_cmp(j, first) == Ordering::Greater)
                    .map(|j| j.id)
                    .collect();
                if later.is_empty() {
                    excluded.insert(first.id);
                } else {
                    excluded.extend(later);
                }
            } else {
                excluded.extend(placement.deferred.iter().copied());
            }
            if excluded.len() == before {
                break;
            }
        }

        let before: BTreeMap<JobId, u32> = placement
            .granted
            .keys()
            .map(|&j| (j, self.cluster.jobs[j.0].worker_count()))
            .collect();
        apply_placement(&mut self.cluster, &placement)?;
        for (&j, &had) in &before {
            let now_workers = self.cluster.jobs[j.0].worker_count();
            if had == 0 && now_workers > 0 {
                self.cluster.jobs[j.0].start(now);
                self.refresh(j, now);
                let (w, iw) = self.worker_split(j);
                self.log.push(LogEvent::Start {
                    t: now,
                    job: self.cluster.jobs[j.0].spec.id.clone(),
                    workers: w,
                    inference_workers: iw,
                    rate: self.cluster.jobs[j.0].acct.rate,
                });
            } else if now_workers != had {
                let so = self.sim.config.scale_overhead_s;
                if so > 0.0 {
                    let acct = &mut self.cluster.jobs[j.0].acct;
                    acct.stall_until_s = acct.stall_until_s.max(now + so);
                }
                self.refresh(j, now);
                self.log_scale(j, i64::from(now_workers) - i64::from(had), now);
            }
        }
        Ok(())
    }

    fn worker_split(&self, j: JobId) -> (u32, u32) {
        let st = &self.cluster.jobs[j.0];
        let inf = st
            .workers
            .iter()
            .filter(|w| self.cluster.servers[w.server.0].kind == GpuKind::Inference)
            .count() as u32;
        (st.worker_count(), inf)
    }

    fn log_scale(&mut self, j: JobId, delta: i64, now: f64) {
        let (w, iw) = self.worker_split(j);
        self.report.scale_ops += 1;
        self.log.push(LogEvent::Scale {
            t: now,
            job: self.cluster.jobs[j.0].spec.id.clone(),
            delta,
            workers: w,
            inference_workers: iw,
            rate: self.cluster.jobs[j.0].acct.rate,
        });
    }

    /// Recomputes the progress rate of `j` and schedules its completion.
    fn refresh(&mut self, j: JobId, now: f64) {
        let (w, iw) = self.worker_split(j);
        let st = &mut self.cluster.jobs[j.0];
        debug_assert!(st.acct.last_update_s >= now);
        st.acct.rate = progress_rate(&st.spec, w - iw, iw, &self.sim.config);
        st.acct.version += 1;
        let version = st.acct.version;
        if let Some(t) = st.projected_finish() {
            self.push(t, EvKind::Completion { job: j, version });
        }
    }

    fn finish(mut self) -> SimOutput {
        self.report.unfinished = self.unfinished;
        if !self.collateral.is_empty() {
            self.report.collateral_damage = self.collateral.iter().sum::<f64>() / self.collateral.len() as f64;
        }
        if self.returned > 0 {
            self.report.flex_reclaim_share = self.drained as f64 / self.returned as f64;
        }
        self.report.jobs = self
            .cluster
            .jobs
            .iter()
            .filter(|st| st.phase == Phase::Finished)
            .map(|st| JobMetrics {
                id: st.spec.id.clone(),
                submit_s: st.spec.submit_s,
                queuing_s: st.acct.queuing_s,
                running_s: st.acct.running_s,
                overhead_s: st.acct.overhead_s,
                jct_s: st.finish_s.expect("finished jobs have a finish time") - st.spec.submit_s as f64,
                preemptions: st.preempt_count,
            })
            .collect();
        self.report.finalize();
        SimOutput {
            report: self.report,
            events: self.log,
            cluster: self.cluster,
        }
    }
}

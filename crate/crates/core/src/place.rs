//! Mapping granted workers onto servers.
//!
//! Jobs are handled in descending per-worker GPU demand. Each worker goes to
//! the non-empty server of its preferred pool that leaves the fewest GPUs
//! free; an empty server is opened only when no partly used one fits. On-loan
//! servers are split lazily into a base group and a flexible group so that
//! flexible workers can be drained during reclaiming without preemption.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alloc::AllocationPlan;
use crate::cluster::{Cluster, GpuKind, JobId, JobState, Role, ServerGroup, ServerId};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub job: JobId,
    pub worker_index: u32,
    pub server: ServerId,
    pub role: Role,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub job: JobId,
    pub server: ServerId,
    pub role: Role,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    /// Flexible workers to take away first, most recent first.
    pub removals: Vec<Removal>,
    pub assignments: Vec<Assignment>,
    pub new_servers_opened: Vec<ServerId>,
    /// Queued jobs that could not be placed at all.
    pub deferred: Vec<JobId>,
    /// Worker totals after the plan is applied, for every job it touches.
    pub granted: BTreeMap<JobId, u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pool {
    Training,
    Loan(ServerGroup),
}

impl Pool {
    fn kind(self) -> GpuKind {
        match self {
            Pool::Training => GpuKind::Training,
            Pool::Loan(_) => GpuKind::Inference,
        }
    }
}

fn pools(job: &JobState, role: Role) -> Vec<Pool> {
    let eligible = job.spec.inference_eligible();
    let mut v = Vec::with_capacity(2);
    if !job.spec.is_elastic() {
        v.push(Pool::Training);
        if eligible {
            v.push(Pool::Loan(ServerGroup::LoanBase));
        }
    } else {
        if eligible {
            v.push(Pool::Loan(role.loan_group()));
        }
        v.push(Pool::Training);
    }
    v
}

#[derive(Clone)]
struct Scratch<'a> {
    cluster: &'a Cluster,
    free: Vec<u32>,
    group: Vec<Option<ServerGroup>>,
}

impl<'a> Scratch<'a> {
    fn new(cluster: &'a Cluster) -> Self {
        Scratch {
            cluster,
            free: cluster.servers.iter().map(|s| s.free_gpus).collect(),
            group: cluster.servers.iter().map(|s| s.group).collect(),
        }
    }

    fn is_empty(&self, s: ServerId) -> bool {
        self.free[s.0] == self.cluster.servers[s.0].total_gpus
    }

    fn pick(&self, pool: Pool, gpus: u32) -> Option<ServerId> {
        let mut best: Option<(u32, ServerId)> = None;
        let mut empty: Option<ServerId> = None;
        for &s in &self.cluster.whitelist_training {
            let srv = &self.cluster.servers[s.0];
            let in_pool = match pool {
                Pool::Training => srv.kind == GpuKind::Training,
                Pool::Loan(g) => srv.on_loan && self.group[s.0].is_none_or(|have| have == g),
            };
            if !in_pool || self.free[s.0] < gpus {
                continue;
            }
            if self.is_empty(s) {
                empty = empty.or(Some(s));
            } else if best.is_none_or(|(f, _)| self.free[s.0] < f) {
                best = Some((self.free[s.0], s));
            }
        }
        best.map(|(_, s)| s).or(empty)
    }

    fn take(&mut self, s: ServerId, gpus: u32, role: Role) -> bool {
        let opened = self.is_empty(s);
        self.free[s.0] -= gpus;
        if self.cluster.servers[s.0].on_loan && self.group[s.0].is_none() {
            self.group[s.0] = Some(role.loan_group());
        }
        opened
    }

    fn give_back(&mut self, s: ServerId, gpus: u32) {
        self.free[s.0] += gpus;
        if self.cluster.servers[s.0].on_loan && self.is_empty(s) {
            self.group[s.0] = None;
        }
    }

    /// Places `roles.len()` workers of `job`, all or nothing.
    fn place_all(
        &mut self,
        id: JobId,
        job: &JobState,
        roles: &[Role],
        first_index: u32,
        kind: Option<GpuKind>,
    ) -> Option<(Vec<Assignment>, Vec<ServerId>)> {
        let before = self.clone();
        let d = job.spec.gpus_per_worker;
        let mut out = Vec::with_capacity(roles.len());
        let mut opened = Vec::new();
        for (k, &role) in roles.iter().enumerate() {
            let server = pools(job, role)
                .into_iter()
                .filter(|p| kind.is_none_or(|k| p.kind() == k))
                .find_map(|p| self.pick(p, d));
            let Some(server) = server else {
                *self = before;
                return None;
            };
            if self.take(server, d, role) {
                opened.push(server);
            }
            out.push(Assignment {
                job: id,
                worker_index: first_index + k as u32,
                server,
                role,
            });
        }
        Some((out, opened))
    }
}

/// Kinds to try, in order, for a job whose workers must share one GPU kind.
fn kind_locks(job: &JobState, cluster: &Cluster) -> Vec<Option<GpuKind>> {
    if job.spec.hetero_capable {
        return vec![None];
    }
    if let Some(w) = job.workers.first() {
        return vec![Some(cluster.servers[w.server.0].kind)];
    }
    let mut kinds: Vec<Option<GpuKind>> = Vec::with_capacity(2);
    for p in pools(job, Role::Base) {
        if !kinds.contains(&Some(p.kind())) {
            kinds.push(Some(p.kind()));
        }
    }
    kinds
}

/// Turns an allocation into concrete worker moves against `cluster`.
pub fn place_workers(plan: &AllocationPlan, cluster: &Cluster) -> PlacementPlan {
    let mut scratch = Scratch::new(cluster);
    let mut out = PlacementPlan::default();

    // scale-ins first, so their GPUs are available to everyone else
    for (&id, &target) in &plan.scheduled {
        let job = &cluster.jobs[id.0];
        let mut surplus = job.worker_count().saturating_sub(target);
        if surplus == 0 {
            continue;
        }
        let mut removed = 0;
        for w in job.workers.iter().rev() {
            if surplus == 0 {
                break;
            }
            if w.role == Role::Flexible {
                scratch.give_back(w.server, job.spec.gpus_per_worker);
                out.removals.push(Removal {
                    job: id,
                    server: w.server,
                    role: w.role,
                });
                surplus -= 1;
                removed += 1;
            }
        }
        out.granted.insert(id, job.worker_count() - removed);
    }

    let mut growing: Vec<(JobId, u32)> = plan
        .scheduled
        .iter()
        .filter(|(id, t)| **t > cluster.jobs[id.0].worker_count())
        .map(|(&id, &t)| (id, t))
        .collect();
    growing.sort_by_key(|(id, _)| (std::cmp::Reverse(cluster.jobs[id.0].spec.gpus_per_worker), *id));

    for (id, target) in growing {
        let job = &cluster.jobs[id.0];
        let have = job.worker_count();
        if have > 0 {
            // a running job scales out as far as servers allow
            let mut placed = have;
            let lock = kind_locks(job, cluster)[0];
            while placed < target {
                let Some((a, opened)) = scratch.place_all(id, job, &[Role::Flexible], placed, lock) else {
                    break;
                };
                out.assignments.extend(a);
                out.new_servers_opened.extend(opened);
                placed += 1;
            }
            out.granted.insert(id, placed);
            continue;
        }

        let min = job.spec.min_workers;
        let mut done = false;
        for t in [target, min].into_iter().filter(|t| *t >= min) {
            let roles: Vec<Role> = (0..t)
                .map(|k| if k < min { Role::Base } else { Role::Flexible })
                .collect();
            for lock in kind_locks(job, cluster) {
                if let Some((a, opened)) = scratch.place_all(id, job, &roles, 0, lock) {
                    out.assignments.extend(a);
                    out.new_servers_opened.extend(opened);
                    out.granted.insert(id, t);
                    done = true;
                    break;
                }
            }
            if done || t == min {
                break;
            }
        }
        if !done {
            out.deferred.push(id);
        }
    }
    out
}

/// Applies `plan` to `cluster` in order: removals, then assignments.
pub fn apply_placement(cluster: &mut Cluster, plan: &PlacementPlan) -> Result<()> {
    for r in &plan.removals {
        cluster.remove_worker_on(r.job, r.server, r.role);
    }
    for a in &plan.assignments {
        cluster.place_worker(a.job, a.server, a.role)?;
    }
    Ok(())
}

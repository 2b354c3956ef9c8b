//! Choosing which on-loan servers to hand back.
//!
//! Reclaiming a server preempts every job with a worker on it. Server costs
//! are coupled through jobs that span several servers, so the greedy selector
//! charges each hosted job `1 / |S_j|` (its server fraction) and, after each
//! pick, subtracts the preempted jobs' contribution from the servers they
//! leave behind.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, JobId, ServerId};
use crate::error::{Error, Result};

/// Costs closer than this are treated as equal and broken by server id.
const COST_EPS: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReclaimOutcome {
    pub selected_servers: Vec<ServerId>,
    pub preempted_jobs: BTreeSet<JobId>,
    /// GPUs vacated by preempted jobs on servers that were not selected.
    pub excess_freed_gpus: u32,
}

impl ReclaimOutcome {
    pub fn preemptions(&self) -> usize {
        self.preempted_jobs.len()
    }
}

/// Snapshot of the on-loan servers and the jobs that touch them.
#[derive(Clone, Debug, PartialEq)]
pub struct ReclaimView {
    on_loan: Vec<ServerId>,
    /// For every job with a worker on an on-loan server: GPUs per server,
    /// including its servers in the training pool.
    placements: BTreeMap<JobId, BTreeMap<ServerId, u32>>,
    jobs_on: BTreeMap<ServerId, BTreeSet<JobId>>,
}

impl ReclaimView {
    pub fn from_cluster(cluster: &Cluster) -> Self {
        let on_loan: Vec<ServerId> = cluster.on_loan_servers().collect();
        let mut placements: BTreeMap<JobId, BTreeMap<ServerId, u32>> = BTreeMap::new();
        let mut jobs_on: BTreeMap<ServerId, BTreeSet<JobId>> = BTreeMap::new();
        for &s in &on_loan {
            let hosted: BTreeSet<JobId> = cluster.servers[s.0].occupants.keys().copied().collect();
            for &j in &hosted {
                placements.entry(j).or_insert_with(|| {
                    let d = cluster.jobs[j.0].spec.gpus_per_worker;
                    let mut per = BTreeMap::new();
                    for w in &cluster.jobs[j.0].workers {
                        *per.entry(w.server).or_insert(0) += d;
                    }
                    per
                });
            }
            jobs_on.insert(s, hosted);
        }
        ReclaimView {
            on_loan,
            placements,
            jobs_on,
        }
    }

    /// Builds a view from explicit placements. Every server a job lists must
    /// be in `known`; the on-loan set must be a subset of `known`.
    pub fn from_parts(
        on_loan: impl IntoIterator<Item = ServerId>,
        known: &BTreeSet<ServerId>,
        placements: BTreeMap<JobId, BTreeMap<ServerId, u32>>,
    ) -> Result<Self> {
        let on_loan: BTreeSet<ServerId> = on_loan.into_iter().collect();
        for s in on_loan.iter().chain(placements.values().flat_map(|p| p.keys())) {
            if !known.contains(s) {
                return Err(Error::UnknownServer(s.to_string()));
            }
        }
        let mut jobs_on: BTreeMap<ServerId, BTreeSet<JobId>> =
            on_loan.iter().map(|&s| (s, BTreeSet::new())).collect();
        let mut kept = BTreeMap::new();
        for (j, per) in placements {
            let mut touches = false;
            for s in per.keys() {
                if let Some(set) = jobs_on.get_mut(s) {
                    set.insert(j);
                    touches = true;
                }
            }
            if touches {
                kept.insert(j, per);
            }
        }
        Ok(ReclaimView {
            on_loan: on_loan.into_iter().collect(),
            placements: kept,
            jobs_on,
        })
    }

    pub fn on_loan(&self) -> &[ServerId] {
        &self.on_loan
    }

    pub fn jobs_on(&self, server: ServerId) -> &BTreeSet<JobId> {
        static EMPTY: BTreeSet<JobId> = BTreeSet::new();
        self.jobs_on.get(&server).unwrap_or(&EMPTY)
    }

    /// Number of servers (both pools) hosting `job`.
    pub fn span(&self, job: JobId) -> usize {
        self.placements.get(&job).map_or(0, |p| p.len())
    }

    pub fn jobs(&self) -> impl Iterator<Item = JobId> + '_ {
        self.placements.keys().copied()
    }

    fn check_demand(&self, n_r: usize) -> Result<()> {
        if n_r > self.on_loan.len() {
            return Err(Error::Infeasible {
                requested: n_r,
                available: self.on_loan.len(),
            });
        }
        Ok(())
    }

    /// Recounts the preemptions and excess GPUs implied by `selected`.
    pub fn outcome_for(&self, selected: Vec<ServerId>) -> ReclaimOutcome {
        let chosen: BTreeSet<ServerId> = selected.iter().copied().collect();
        let preempted: BTreeSet<JobId> = selected
            .iter()
            .flat_map(|s| self.jobs_on(*s).iter().copied())
            .collect();
        let excess = preempted
            .iter()
            .flat_map(|j| self.placements[j].iter())
            .filter(|(s, _)| !chosen.contains(s))
            .map(|(_, g)| *g)
            .sum();
        ReclaimOutcome {
            selected_servers: selected,
            preempted_jobs: preempted,
            excess_freed_gpus: excess,
        }
    }
}

/// Server preemption cost: the sum of `1 / |S_j|` over hosted jobs.
pub fn preemption_costs(view: &ReclaimView) -> BTreeMap<ServerId, f64> {
    let mut costs: BTreeMap<ServerId, f64> = view.on_loan.iter().map(|&s| (s, 0.0)).collect();
    for per in view.placements.values() {
        let share = 1.0 / per.len() as f64;
        for s in per.keys() {
            if let Some(c) = costs.get_mut(s) {
                *c += share;
            }
        }
    }
    costs
}

/// Greedy min-cost selection with cost updates after each pick.
pub fn select_servers_lyra(view: &ReclaimView, n_r: usize) -> Result<ReclaimOutcome> {
    view.check_demand(n_r)?;
    if n_r == 0 {
        return Ok(ReclaimOutcome::default());
    }
    if n_r == 1 {
        // A single server: scan for the one with the fewest running jobs.
        let best = view
            .on_loan
            .iter()
            .min_by_key(|s| (view.jobs_on(**s).len(), **s))
            .copied()
            .expect("demand checked against on-loan count");
        return Ok(view.outcome_for(vec![best]));
    }

    let mut costs = preemption_costs(view);
    let mut hosted: BTreeMap<ServerId, BTreeSet<JobId>> = view.jobs_on.clone();
    let mut selected = Vec::with_capacity(n_r);
    while selected.len() < n_r {
        let (&pick, _) = costs
            .iter()
            .min_by(|(sa, ca), (sb, cb)| {
                if (**ca - **cb).abs() <= COST_EPS {
                    sa.cmp(sb)
                } else {
                    ca.total_cmp(cb)
                }
            })
            .expect("enough servers remain");
        costs.remove(&pick);
        selected.push(pick);
        let victims = hosted.remove(&pick).unwrap_or_default();
        for j in victims {
            let per = &view.placements[&j];
            let share = 1.0 / per.len() as f64;
            for s in per.keys().filter(|s| **s != pick) {
                if let Some(set) = hosted.get_mut(s) {
                    if set.remove(&j) {
                        if let Some(c) = costs.get_mut(s) {
                            *c -= share;
                        }
                    }
                }
            }
        }
    }
    Ok(view.outcome_for(selected))
}

/// Uniform sample without replacement, reproducible from `seed`.
pub fn select_servers_random(view: &ReclaimView, n_r: usize, seed: u64) -> Result<ReclaimOutcome> {
    view.check_demand(n_r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<ServerId> = sample(&mut rng, view.on_loan.len(), n_r)
        .into_iter()
        .map(|i| view.on_loan[i])
        .collect();
    picked.sort();
    Ok(view.outcome_for(picked))
}

/// Smallest job count first, ties by server id.
pub fn select_servers_scf(view: &ReclaimView, n_r: usize) -> Result<ReclaimOutcome> {
    view.check_demand(n_r)?;
    let mut order = view.on_loan.clone();
    order.sort_by_key(|s| (view.jobs_on(*s).len(), *s));
    order.truncate(n_r);
    Ok(view.outcome_for(order))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReclaimPolicy {
    Lyra,
    Random,
    Scf,
}

impl ReclaimPolicy {
    pub fn select(self, view: &ReclaimView, n_r: usize, seed: u64) -> Result<ReclaimOutcome> {
        match self {
            ReclaimPolicy::Lyra => select_servers_lyra(view, n_r),
            ReclaimPolicy::Random => select_servers_random(view, n_r, seed),
            ReclaimPolicy::Scf => select_servers_scf(view, n_r),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReclaimPolicy::Lyra => "lyra",
            ReclaimPolicy::Random => "random",
            ReclaimPolicy::Scf => "scf",
        }
    }
}

impl std::str::FromStr for ReclaimPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "lyra" => Ok(ReclaimPolicy::Lyra),
            "random" => Ok(ReclaimPolicy::Random),
            "scf" => Ok(ReclaimPolicy::Scf),
            other => Err(format!("unknown reclaim policy `{other}`")),
        }
    }
}

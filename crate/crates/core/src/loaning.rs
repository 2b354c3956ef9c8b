//! Orchestrator side of capacity loaning.
//!
//! A threshold rule turns the inference utilization into a number of servers
//! that may be lent out. Reclaiming first hands back idle on-loan servers,
//! then drains the flexible group (scale-in, no preemption) and only then
//! asks a reclaim selector to pick servers whose jobs get preempted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, JobId, Role, ServerGroup, ServerId};
use crate::error::{Error, Result};
use crate::reclaim::{ReclaimOutcome, ReclaimPolicy, ReclaimView};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoanPolicy {
    pub headroom: f64,
    pub interval_s: u64,
    pub total_inference_servers: usize,
}

impl LoanPolicy {
    pub fn new(total_inference_servers: usize) -> Self {
        LoanPolicy {
            headroom: 0.10,
            interval_s: 300,
            total_inference_servers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.headroom) {
            return Err(Error::Config(format!("headroom {} outside [0, 1)", self.headroom)));
        }
        if self.interval_s == 0 {
            return Err(Error::Config("loan interval must be positive".into()));
        }
        Ok(())
    }

    /// Servers that may be on loan at inference utilization `util`.
    pub fn loanable(&self, util: f64) -> usize {
        let total = self.total_inference_servers;
        let reserved = (util.clamp(0.0, 1.0) * (1.0 + self.headroom) * total as f64 - 1e-9).ceil();
        total.saturating_sub((reserved.max(0.0) as usize).min(total))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LoanAction {
    Loan { n: usize },
    Reclaim { n: usize },
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoanInstruction {
    pub at_s: u64,
    #[serde(flatten)]
    pub action: LoanAction,
}

pub fn plan_loaning(util: f64, on_loan: usize, policy: &LoanPolicy) -> LoanAction {
    let loanable = policy.loanable(util);
    match loanable.cmp(&on_loan) {
        std::cmp::Ordering::Greater => LoanAction::Loan { n: loanable - on_loan },
        std::cmp::Ordering::Less => LoanAction::Reclaim { n: on_loan - loanable },
        std::cmp::Ordering::Equal => LoanAction::Hold,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoanReport {
    pub moved: Vec<ServerId>,
    pub shortfall: usize,
}

/// Moves up to `n` inference servers, lowest id first, into the training
/// whitelist.
pub fn execute_loan(cluster: &mut Cluster, n: usize) -> LoanReport {
    let moved: Vec<ServerId> = cluster.whitelist_inference.iter().copied().take(n).collect();
    for &s in &moved {
        cluster.loan_server(s);
    }
    LoanReport {
        shortfall: n - moved.len(),
        moved,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ReclaimStep {
    Idle { server: ServerId },
    Drained { server: ServerId, jobs: Vec<JobId> },
    Preempted { job: JobId },
    Returned { server: ServerId },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReclaimReport {
    pub returned: Vec<ServerId>,
    /// Servers handed back without any preemption.
    pub without_preemption: usize,
    /// Flexible workers removed per job while draining.
    pub scaled_in: BTreeMap<JobId, u32>,
    /// Result of the preempting stage, if it ran.
    pub outcome: Option<ReclaimOutcome>,
    pub steps: Vec<ReclaimStep>,
}

impl ReclaimReport {
    /// Excess GPUs vacated by the preempting stage over what it was asked for.
    pub fn collateral_damage(&self, gpus_per_server: u32) -> Option<f64> {
        let o = self.outcome.as_ref()?;
        let asked = o.selected_servers.len() as f64 * f64::from(gpus_per_server);
        (asked > 0.0).then(|| f64::from(o.excess_freed_gpus) / asked)
    }
}

/// Returns `n` on-loan servers to the inference cluster.
///
/// Callers must have advanced job progress to `now_s`; preempted jobs are
/// requeued with `overhead_s` charged at their next start.
pub fn execute_reclaim(
    cluster: &mut Cluster,
    n: usize,
    policy: ReclaimPolicy,
    seed: u64,
    now_s: f64,
    overhead_s: f64,
) -> Result<ReclaimReport> {
    let on_loan: Vec<ServerId> = cluster.on_loan_servers().collect();
    if n > on_loan.len() {
        return Err(Error::Infeasible {
            requested: n,
            available: on_loan.len(),
        });
    }
    let mut report = ReclaimReport::default();
    let mut need = n;

    let idle: Vec<ServerId> = on_loan.iter().copied().filter(|s| cluster.servers[s.0].is_empty()).collect();
    for s in idle {
        if need == 0 {
            break;
        }
        report.steps.push(ReclaimStep::Idle { server: s });
        give_back(cluster, s, &mut report);
        need -= 1;
    }

    let mut flexible: Vec<ServerId> = on_loan
        .iter()
        .copied()
        .filter(|s| {
            let srv = &cluster.servers[s.0];
            srv.on_loan && !srv.is_empty() && srv.group == Some(ServerGroup::LoanFlexible)
        })
        .collect();
    flexible.sort_by_key(|s| (cluster.servers[s.0].used_gpus(), *s));
    for s in flexible {
        if need == 0 {
            break;
        }
        let jobs: Vec<JobId> = cluster.servers[s.0].occupants.keys().copied().collect();
        for &j in &jobs {
            while cluster.remove_worker_on(j, s, Role::Flexible).is_some() {
                *report.scaled_in.entry(j).or_insert(0) += 1;
            }
        }
        debug_assert!(cluster.servers[s.0].is_empty());
        report.steps.push(ReclaimStep::Drained { server: s, jobs });
        give_back(cluster, s, &mut report);
        need -= 1;
    }
    report.without_preemption = report.returned.len();

    if need > 0 {
        let view = ReclaimView::from_cluster(cluster);
        let outcome = policy.select(&view, need, seed)?;
        for &j in &outcome.preempted_jobs {
            cluster.remove_all_workers(j);
            cluster.jobs[j.0].preempt(now_s, overhead_s);
            report.steps.push(ReclaimStep::Preempted { job: j });
        }
        for &s in &outcome.selected_servers {
            give_back(cluster, s, &mut report);
        }
        report.outcome = Some(outcome);
    }
    Ok(report)
}

fn give_back(cluster: &mut Cluster, s: ServerId, report: &mut ReclaimReport) {
    cluster.return_server(s);
    report.returned.push(s);
    report.steps.push(ReclaimStep::Returned { server: s });
}

use std::collections::{BTreeMap, BTreeSet};

use lyra_core::oracle::{exhaustive_reclaim, ReclaimLayout};
use lyra_core::reclaim::{
    preemption_costs, select_servers_lyra, select_servers_random, select_servers_scf, ReclaimPolicy, ReclaimView,
};
use lyra_core::{Error, JobId, ServerId};
use proptest::prelude::*;

fn s(i: usize) -> ServerId {
    ServerId(i)
}

/// Six on-loan servers s1..s6 (ids 1..=6) hosting jobs a..d.
fn six_servers() -> ReclaimView {
    let layout: ReclaimLayout = serde_json::from_str(
        r#"{
            "on_loan": [1, 2, 3, 4, 5, 6],
            "jobs": {
                "a": {"1": 4, "2": 4},
                "b": {"3": 8},
                "c": {"4": 8, "5": 2},
                "d": {"6": 8, "5": 2}
            }
        }"#,
    )
    .unwrap();
    layout.view().unwrap().0
}

#[test]
fn six_servers_costs() {
    let c = preemption_costs(&six_servers());
    let want = [0.5, 0.5, 1.0, 0.5, 1.0, 0.5];
    for (i, w) in want.iter().enumerate() {
        assert!((c[&s(i + 1)] - w).abs() < 1e-12, "s{} {}", i + 1, c[&s(i + 1)]);
    }
}

#[test]
fn six_servers_lyra_two_servers() {
    let o = select_servers_lyra(&six_servers(), 2).unwrap();
    assert_eq!(o.selected_servers, [s(1), s(2)]);
    assert_eq!(o.preempted_jobs, BTreeSet::from([JobId(0)]));
    assert_eq!(exhaustive_reclaim(&six_servers(), 2).unwrap().preemptions, 1);
}

#[test]
fn six_servers_single_server() {
    let o = select_servers_lyra(&six_servers(), 1).unwrap();
    assert_eq!(o.selected_servers.len(), 1);
    assert_eq!(o.preemptions(), 1);
}

#[test]
fn six_servers_scf_ties_by_id() {
    let o = select_servers_scf(&six_servers(), 2).unwrap();
    assert_eq!(o.selected_servers, [s(1), s(2)]);
    assert_eq!(o.preemptions(), 1);
}

#[test]
fn six_servers_random_matches_recount() {
    let v = six_servers();
    let o = select_servers_random(&v, 2, 7).unwrap();
    assert_eq!(o.selected_servers.len(), 2);
    let recount: BTreeSet<JobId> = o.selected_servers.iter().flat_map(|x| v.jobs_on(*x).iter().copied()).collect();
    assert_eq!(o.preempted_jobs, recount);
}

#[test]
fn zero_and_all() {
    let v = six_servers();
    for p in [ReclaimPolicy::Lyra, ReclaimPolicy::Random, ReclaimPolicy::Scf] {
        assert!(p.select(&v, 0, 1).unwrap().selected_servers.is_empty());
        assert_eq!(p.select(&v, 6, 1).unwrap().preemptions(), 4);
        assert!(matches!(p.select(&v, 7, 1), Err(Error::Infeasible { available: 6, .. })));
    }
}

#[test]
fn idle_servers_cost_nothing_and_three_way_span_is_a_third() {
    let known: BTreeSet<ServerId> = (0..4).map(s).collect();
    let p = BTreeMap::from([(JobId(0), BTreeMap::from([(s(0), 1), (s(1), 1), (s(2), 1)]))]);
    let v = ReclaimView::from_parts([s(0), s(1), s(2), s(3)], &known, p).unwrap();
    let c = preemption_costs(&v);
    assert_eq!(c[&s(3)], 0.0);
    for i in 0..3 {
        assert!((c[&s(i)] - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn unknown_server_is_rejected() {
    let known = BTreeSet::from([s(0)]);
    let p = BTreeMap::from([(JobId(0), BTreeMap::from([(s(9), 1)]))]);
    assert!(matches!(
        ReclaimView::from_parts([s(0)], &known, p),
        Err(Error::UnknownServer(_))
    ));
}

/// Random layout: `n_loan` on-loan servers (ids 0..n_loan) and three training
/// servers after them; each job picks 1..=3 distinct servers.
fn layout(max_loan: usize, max_jobs: usize) -> impl Strategy<Value = (ReclaimView, usize)> {
    (1..=max_loan, 0..=max_jobs).prop_flat_map(move |(n_loan, n_jobs)| {
        let total = n_loan + 3;
        let job = proptest::sample::subsequence((0..total).collect::<Vec<_>>(), 1..=3)
            .prop_flat_map(|servers| {
                let k = servers.len();
                (Just(servers), proptest::collection::vec(1u32..=4, k))
            });
        (Just(n_loan), proptest::collection::vec(job, n_jobs), 0..=n_loan)
            .prop_map(move |(n_loan, jobs, n_r)| {
                let known: BTreeSet<ServerId> = (0..total).map(s).collect();
                let placements = jobs
                    .into_iter()
                    .enumerate()
                    .map(|(j, (servers, gpus))| {
                        (JobId(j), servers.into_iter().map(s).zip(gpus).collect::<BTreeMap<_, _>>())
                    })
                    .collect();
                let v = ReclaimView::from_parts((0..n_loan).map(s), &known, placements).unwrap();
                (v, n_r)
            })
    })
}

proptest! {
    #[test]
    fn cost_identity((v, _) in layout(12, 15)) {
        let on_loan: BTreeSet<ServerId> = v.on_loan().iter().copied().collect();
        let lhs: f64 = preemption_costs(&v).values().sum();
        let rhs: f64 = v.jobs().map(|j| {
            let span = v.span(j) as f64;
            let hosted = (0..40).map(s).filter(|x| on_loan.contains(x) && v.jobs_on(*x).contains(&j)).count();
            hosted as f64 / span
        }).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn preemption_accounting((v, n_r) in layout(12, 15), seed in any::<u64>()) {
        for p in [ReclaimPolicy::Lyra, ReclaimPolicy::Random, ReclaimPolicy::Scf] {
            let o = p.select(&v, n_r, seed).unwrap();
            prop_assert_eq!(o.selected_servers.len(), n_r);
            let distinct: BTreeSet<_> = o.selected_servers.iter().collect();
            prop_assert_eq!(distinct.len(), n_r);
            let recount: BTreeSet<JobId> = o.selected_servers.iter().flat_map(|x| v.jobs_on(*x).iter().copied()).collect();
            prop_assert_eq!(&o.preempted_jobs, &recount);
        }
    }

    #[test]
    fn lyra_never_beats_exhaustive((v, n_r) in layout(12, 15)) {
        let lyra = select_servers_lyra(&v, n_r).unwrap().preemptions();
        let best = exhaustive_reclaim(&v, n_r).unwrap();
        prop_assert!(lyra >= best.preemptions);
        let recount: BTreeSet<JobId> = best.servers.iter().flat_map(|x| v.jobs_on(*x).iter().copied()).collect();
        prop_assert_eq!(recount.len(), best.preemptions);
    }

    #[test]
    fn single_server_jobs_are_solved_exactly(
        counts in proptest::collection::vec(0usize..4, 1..=10),
        n_r_frac in 0.0f64..=1.0,
    ) {
        let n = counts.len();
        let known: BTreeSet<ServerId> = (0..n).map(s).collect();
        let mut placements = BTreeMap::new();
        let mut next = 0;
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                placements.insert(JobId(next), BTreeMap::from([(s(i), 1)]));
                next += 1;
            }
        }
        let v = ReclaimView::from_parts((0..n).map(s), &known, placements).unwrap();
        let n_r = (n_r_frac * n as f64).floor() as usize;
        let lyra = select_servers_lyra(&v, n_r).unwrap().preemptions();
        prop_assert_eq!(lyra, exhaustive_reclaim(&v, n_r).unwrap().preemptions);
    }

    #[test]
    fn deterministic((v, n_r) in layout(8, 10), seed in any::<u64>()) {
        for p in [ReclaimPolicy::Lyra, ReclaimPolicy::Random, ReclaimPolicy::Scf] {
            prop_assert_eq!(p.select(&v, n_r, seed).unwrap(), p.select(&v, n_r, seed).unwrap());
        }
    }
}

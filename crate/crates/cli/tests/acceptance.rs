//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use lyra_core::alloc::{
    allocate_lyra, build_mckp, mckp_dp, AllocJob, AllocPolicy, AllocationPlan, Allocator, MckpGroup, MckpInstance,
    MckpItem,
};
use lyra_core::harness::{gen_traces, write_job_trace, write_util_trace, GenParams};
use lyra_core::loaning::{LoanAction, LoanInstruction};
use lyra_core::oracle::{brute_force_allocation, brute_force_mckp, exhaustive_reclaim, two_job_optimal, BruteJob,
    ReclaimLayout, TwoJobInstance, TwoJobSide};
use lyra_core::reclaim::{preemption_costs, select_servers_lyra, ReclaimPolicy, ReclaimView};
use lyra_core::sim::{ClusterShape, ImperfectScaling, ScenarioConfig, SimOutput, Simulation};
use lyra_core::{JobId, JobSpec, ServerId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol
}

/// Grants a fixed split while jobs are waiting; afterwards grows running jobs
/// into idle GPUs, lowest id first.
struct ForcedSplit(BTreeMap<JobId, u32>);

impl Allocator for ForcedSplit {
    fn name(&self) -> &'static str {
        "forced"
    }

    fn allocate(&self, queued: &[AllocJob], running: &[AllocJob], idle_gpus: u32) -> AllocationPlan {
        let mut plan = AllocationPlan::default();
        if !queued.is_empty() {
            for j in queued {
                plan.grant(j, self.0[&j.id]);
            }
            plan.deferred.clear();
            return plan;
        }
        let mut idle = idle_gpus;
        for j in running {
            let extra = ((j.max_workers - j.current_workers) * j.gpus_per_worker).min(idle) / j.gpus_per_worker;
            idle -= extra * j.gpus_per_worker;
            plan.grant(j, j.current_workers + extra);
        }
        plan
    }
}

fn job(id: &str, d: u32, min: u32, max: u32, runtime: f64) -> JobSpec {
    JobSpec {
        id: id.into(),
        submit_s: 0,
        gpus_per_worker: d,
        min_workers: min,
        max_workers: max,
        runtime_at_max_s: runtime,
        gpu_flexible: false,
        checkpointing: false,
        hetero_capable: false,
    }
}

fn forced_avg_jct(jobs: &[JobSpec], split: (u32, u32)) -> Result<f64, String> {
    let shape = ClusterShape { training_servers: 1, inference_servers: 0, gpus_per_server: 8 };
    let cfg = ScenarioConfig { loaning: false, ..ScenarioConfig::default() };
    let forced = ForcedSplit(BTreeMap::from([(JobId(0), split.0), (JobId(1), split.1)]));
    let out = Simulation::new(shape, cfg, jobs.to_vec())
        .with_allocator(Box::new(forced))
        .run()
        .map_err(|e| e.to_string())?;
    ensure(out.report.unfinished == 0, || "jobs left unfinished".into())?;
    Ok(out.report.jct.mean)
}

fn forced_splits() -> Result<String, String> {
    let jobs = [job("a", 1, 2, 6, 50.0), job("b", 1, 2, 6, 20.0)];
    let mut got = Vec::new();
    for (split, want) in [((6, 2), 51.67), ((2, 6), 41.67), ((4, 4), 45.00)] {
        let avg = forced_avg_jct(&jobs, split)?;
        ensure(close(avg, want, 0.01), || format!("split {split:?}: avg JCT {avg:.4}, want {want}"))?;
        got.push(format!("{split:?}={avg:.2}"));
    }
    Ok(got.join(" "))
}

fn capped_pair() -> (AllocJob, AllocJob) {
    let a = AllocJob { id: JobId(0), submit_s: 0, gpus_per_worker: 2, min_workers: 2, max_workers: 3, remaining: 300.0, current_workers: 0 };
    let b = AllocJob { id: JobId(1), submit_s: 0, gpus_per_worker: 1, min_workers: 2, max_workers: 6, remaining: 120.0, current_workers: 0 };
    (a, b)
}

fn capped_long_job() -> Result<String, String> {
    let jobs = [job("a", 1, 2, 3, 100.0), job("b", 1, 2, 6, 20.0)];
    let fa = forced_avg_jct(&jobs, (3, 5))?;
    let fb = forced_avg_jct(&jobs, (2, 6))?;
    ensure(close(fa, 62.00, 0.01), || format!("favoring A: {fa:.4}"))?;
    ensure(close(fb, 63.33, 0.01), || format!("favoring B: {fb:.4}"))?;

    let (a, b) = capped_pair();
    let inst = build_mckp([&a, &b]);
    let sol = mckp_dp(&inst, 2);
    let picked: Vec<(JobId, u32)> = sol.flex_grants(&inst).collect();
    ensure(picked == [(JobId(0), 1)] && close(sol.value, 50.0, 1e-9), || format!("mckp at 2 GPUs picked {picked:?}"))?;
    let plan = allocate_lyra(&[a.clone(), b.clone()], &[], 8);
    ensure(plan.scheduled.get(&a.id) == Some(&3) && plan.scheduled.get(&b.id) == Some(&2), || {
        format!("allocate_lyra gave {:?}", plan.scheduled)
    })?;
    Ok(format!("favor A {fa:.2}, favor B {fb:.2}, flexible pick A (+2 GPUs, 50)"))
}

fn item_table() -> Result<String, String> {
    let (a, b) = capped_pair();
    let inst = build_mckp([&a, &b]);
    let rows = |g: &MckpGroup| g.items.iter().map(|i| (i.weight, i.value)).collect::<Vec<_>>();
    let want_a = [(2, 50.0)];
    let want_b = [(1, 20.0), (2, 30.0), (3, 36.0), (4, 40.0)];
    let same = |got: Vec<(u32, f64)>, want: &[(u32, f64)]| {
        got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g.0 == w.0 && close(g.1, w.1, 1e-9))
    };
    ensure(inst.groups.len() == 2, || format!("{} groups", inst.groups.len()))?;
    ensure(same(rows(&inst.groups[0]), &want_a), || format!("A items {:?}", rows(&inst.groups[0])))?;
    ensure(same(rows(&inst.groups[1]), &want_b), || format!("B items {:?}", rows(&inst.groups[1])))?;
    Ok("A:(2,50) B:(1,20),(2,30),(3,36),(4,40)".into())
}

fn reclaim_layout() -> Result<String, String> {
    let layout: ReclaimLayout =
        serde_json::from_str(include_str!("fixtures/reclaim_layout.json")).map_err(|e| e.to_string())?;
    let (view, _) = layout.view().map_err(|e| e.to_string())?;
    let costs: Vec<f64> = (1..=6).map(|i| preemption_costs(&view)[&ServerId(i)]).collect();
    let want = [0.5, 0.5, 1.0, 0.5, 1.0, 0.5];
    ensure(costs.iter().zip(want).all(|(c, w)| close(*c, w, 1e-12)), || format!("costs {costs:?}"))?;
    let lyra = select_servers_lyra(&view, 2).map_err(|e| e.to_string())?;
    let best = exhaustive_reclaim(&view, 2).map_err(|e| e.to_string())?;
    ensure(lyra.preemptions() == 1 && best.preemptions == 1, || {
        format!("lyra {} exhaustive {}", lyra.preemptions(), best.preemptions)
    })?;
    Ok(format!("costs {costs:?}, lyra 1 = exhaustive 1"))
}

fn random_mckp(rng: &mut ChaCha8Rng) -> (MckpInstance, u32) {
    let groups = (0..rng.random_range(1..=6))
        .map(|g| MckpGroup {
            job: JobId(g),
            items: (0..rng.random_range(1..=8))
                .map(|k| MckpItem { flex_workers: k + 1, weight: rng.random_range(1..=12), value: rng.random_range(0.0..100.0) })
                .collect(),
        })
        .collect();
    (MckpInstance { groups }, rng.random_range(0..=40))
}

fn mckp_exactness() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 0..1000 {
        let (inst, cap) = random_mckp(&mut rng);
        let dp = mckp_dp(&inst, cap);
        let brute = brute_force_mckp(&inst, cap).map_err(|e| e.to_string())?;
        ensure(dp.value == brute.value && dp.weight <= cap, || {
            format!("instance {n}: dp {} brute {}", dp.value, brute.value)
        })?;
    }
    Ok("1000/1000 instances equal".into())
}

fn two_job_instances() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut n = 0;
    let mut worst: f64 = 0.0;
    while n < 600 {
        let side = |rng: &mut ChaCha8Rng| {
            let g_min = rng.random_range(1..=6);
            TwoJobSide { workload: f64::from(rng.random_range(10..=2000)), g_min, g_max: g_min + rng.random_range(0..=10) }
        };
        let (x, y) = (side(&mut rng), side(&mut rng));
        let (p, q) = if x.g_max <= y.g_max { (x, y) } else { (y, x) };
        let inst = TwoJobInstance { p, q, capacity: rng.random_range(2..=32) };
        if inst.check_regime().is_err() {
            continue;
        }
        n += 1;
        let closed = two_job_optimal(&inst).map_err(|e| e.to_string())?.avg_jct;
        let jobs = [p, q].map(|s| BruteJob { workload: s.workload, min_workers: s.g_min, max_workers: s.g_max, gpus_per_worker: 1 });
        let brute = brute_force_allocation(&jobs, inst.capacity).map_err(|e| e.to_string())?.avg_jct;
        let rel = (closed - brute).abs() / brute;
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("{inst:?}: closed form {closed} brute force {brute}"))?;
    }
    Ok(format!("{n} instances, worst relative gap {worst:.1e}"))
}

fn random_layout(rng: &mut ChaCha8Rng) -> (ReclaimView, usize) {
    let n_loan = rng.random_range(1..=12);
    let total = n_loan + 4;
    let known: BTreeSet<ServerId> = (0..total).map(ServerId).collect();
    let placements = (0..rng.random_range(1..=15))
        .map(|j| {
            let span = rng.random_range(1..=3);
            let mut per = BTreeMap::new();
            while per.len() < span {
                per.insert(ServerId(rng.random_range(0..total)), rng.random_range(1..=4));
            }
            (JobId(j), per)
        })
        .collect();
    let view = ReclaimView::from_parts((0..n_loan).map(ServerId), &known, placements).unwrap();
    (view, rng.random_range(1..=n_loan))
}

fn reclaim_bound() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut equal = 0;
    for n in 0..300 {
        let (view, n_r) = random_layout(&mut rng);
        let lyra = select_servers_lyra(&view, n_r).map_err(|e| e.to_string())?.preemptions();
        let best = exhaustive_reclaim(&view, n_r).map_err(|e| e.to_string())?.preemptions;
        ensure(lyra >= best, || format!("layout {n}: lyra {lyra} below optimum {best}"))?;
        equal += usize::from(lyra == best);
    }
    let rate = equal as f64 / 300.0;
    ensure(rate >= 0.70, || format!("optimal on {equal}/300 ({:.1}%)", 100.0 * rate))?;
    Ok(format!("never below optimum, optimal on {equal}/300 ({:.1}%)", 100.0 * rate))
}

fn pinned_run(jobs: &[JobSpec], util: &[(u64, f64)], alloc: AllocPolicy, reclaim: ReclaimPolicy, baseline: bool) -> SimOutput {
    let cfg = ScenarioConfig { loaning: !baseline, elastic_scaling: !baseline, ..ScenarioConfig::default() };
    Simulation::new(ClusterShape::default(), cfg, jobs.to_vec())
        .with_alloc_policy(alloc)
        .with_reclaim(reclaim)
        .with_seed(42)
        .with_util(util.to_vec())
        .run()
        .expect("pinned run")
}

fn pinned_scenario() -> Result<String, String> {
    let p = GenParams::default();
    ensure(p.seed == 42 && p.n_jobs == 2000 && p.training_servers == 64 && p.util_ratio == 2.2, || {
        "generator defaults drifted from the pinned scenario".into()
    })?;
    let (jobs, util) = gen_traces(&p).map_err(|e| e.to_string())?;
    let util = util.pairs();
    let runs: Vec<SimOutput> = std::thread::scope(|s| {
        let cells = [
            (AllocPolicy::Fifo, ReclaimPolicy::Lyra, true),
            (AllocPolicy::Lyra, ReclaimPolicy::Lyra, false),
            (AllocPolicy::Lyra, ReclaimPolicy::Random, false),
            (AllocPolicy::Lyra, ReclaimPolicy::Scf, false),
        ];
        let handles: Vec<_> = cells.map(|(a, r, b)| {
            let (jobs, util) = (&jobs, &util);
            s.spawn(move || pinned_run(jobs, util, a, r, b))
        }).into_iter().collect();
        handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
    });
    let [fifo, lyra, random, scf] = [&runs[0].report, &runs[1].report, &runs[2].report, &runs[3].report];
    for r in [fifo, lyra, random, scf] {
        ensure(r.unfinished == 0, || format!("{} left {} jobs unfinished", r.policy, r.unfinished))?;
    }
    let detail = format!(
        "queuing {:.0} < {:.0}, JCT {:.0} < {:.0}, preemptions lyra {} random {} scf {}",
        lyra.queuing.mean, fifo.queuing.mean, lyra.jct.mean, fifo.jct.mean, lyra.preemptions, random.preemptions, scf.preemptions
    );
    ensure(lyra.queuing.mean < fifo.queuing.mean && lyra.jct.mean < fifo.jct.mean, || detail.clone())?;
    ensure(lyra.preemptions < random.preemptions && lyra.preemptions < scf.preemptions, || detail.clone())?;
    Ok(detail)
}

fn loan_run(checkpointing: bool, plan: &[(u64, LoanAction)]) -> Result<f64, String> {
    let spec = JobSpec { gpu_flexible: true, checkpointing, ..job("j", 8, 2, 2, 1000.0) };
    let shape = ClusterShape { training_servers: 0, inference_servers: 2, gpus_per_server: 8 };
    let cfg = ScenarioConfig { inference_speed_factor: 1.0, ..ScenarioConfig::default() };
    let plan = plan.iter().map(|&(at_s, action)| LoanInstruction { at_s, action }).collect();
    let out = Simulation::new(shape, cfg, vec![spec]).with_loan_plan(plan).run().map_err(|e| e.to_string())?;
    let m = out.report.jobs.first().ok_or("job did not finish")?;
    ensure(m.preemptions == 1, || format!("{} preemptions", m.preemptions))?;
    Ok(m.submit_s as f64 + m.jct_s)
}

fn overhead_semantics() -> Result<String, String> {
    use LoanAction::{Loan, Reclaim};
    let (t, overhead, runtime) = (600.0, 63.0, 1000.0);
    let reset = loan_run(false, &[(0, Loan { n: 2 }), (600, Reclaim { n: 1 }), (600, Loan { n: 1 })])?;
    ensure(reset == t + overhead + runtime, || format!("non-checkpointing finish {reset}"))?;
    let requeue = 600.0;
    let kept = loan_run(true, &[(0, Loan { n: 2 }), (600, Reclaim { n: 1 }), (1200, Loan { n: 1 })])?;
    ensure(kept == runtime + overhead + requeue, || format!("checkpointing finish {kept}"))?;
    Ok(format!("reset finish {reset}, checkpointed finish {kept}"))
}

fn small_params() -> GenParams {
    GenParams { n_jobs: 400, days: 0.5, training_servers: 12, ..GenParams::default() }
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (jobs, util) = gen_traces(&small_params()).map_err(|e| e.to_string())?;
    write_job_trace(dir.path().join("jobs.jsonl"), &jobs).map_err(|e| e.to_string())?;
    write_util_trace(dir.path().join("util.csv"), &util).map_err(|e| e.to_string())?;
    let run = |out: &str| -> Result<(), String> {
        let st = Command::new(env!("CARGO_BIN_EXE_lyra"))
            .current_dir(dir.path())
            .args(["simulate", "--jobs", "jobs.jsonl", "--util", "util.csv", "--training-servers", "12"])
            .args(["--inference-servers", "12", "--reclaim", "random", "--seed", "11", "--out", out])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(st.status.success(), || String::from_utf8_lossy(&st.stderr).into_owned())
    };
    run("first")?;
    run("second")?;
    let read = |p: &Path| fs::read(dir.path().join(p)).map_err(|e| e.to_string());
    for f in ["events.jsonl", "metrics.json"] {
        let a = read(&Path::new("first").join(f))?;
        let b = read(&Path::new("second").join(f))?;
        ensure(!a.is_empty() && a == b, || format!("{f} differs"))?;
    }
    Ok("events.jsonl and metrics.json byte-identical".into())
}

fn imperfect_scaling() -> Result<String, String> {
    let (jobs, util) = gen_traces(&small_params()).map_err(|e| e.to_string())?;
    let shape = ClusterShape { training_servers: 12, inference_servers: 12, gpus_per_server: 8 };
    let linear = ScenarioConfig::default();
    let lossy = ScenarioConfig { imperfect_scaling: Some(ImperfectScaling { loss_per_step: 0.1 }), ..linear.clone() };
    let out = Simulation::new(shape, linear.clone(), jobs.clone()).with_util(util.pairs()).run().map_err(|e| e.to_string())?;
    let replayed = common::replay(&out.events, &jobs, linear.preempt_overhead_s);
    let (mut slower, mut unchanged, mut checked) = (0, 0, 0);
    for s in jobs.iter().filter(|s| s.is_elastic()) {
        let Some(r) = replayed.get(&s.id) else { continue };
        let Some(done) = r.completion_s else { continue };
        checked += 1;
        let start = r.segments[0].0;
        let a = common::replay_finish(s, &r.segments, &linear, linear.preempt_overhead_s);
        let b = common::replay_finish(s, &r.segments, &lossy, linear.preempt_overhead_s);
        ensure(close(a, done, 1e-6 * done.max(1.0)), || format!("{}: linear replay {a} vs logged {done}", s.id))?;
        ensure(b - start >= a - start, || format!("{}: lossy {} < linear {}", s.id, b - start, a - start))?;
        let mid = (s.min_workers + s.max_workers).div_ceil(2);
        if r.segments.iter().all(|seg| seg.1 <= mid) {
            ensure(a == b, || format!("{}: at most midpoint but {a} != {b}", s.id))?;
            unchanged += 1;
        } else if b > a {
            slower += 1;
        }
    }
    ensure(checked > 0, || "no elastic job finished".into())?;
    Ok(format!("{checked} elastic jobs: {slower} slower, {unchanged} at or below midpoint unchanged"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 11] = [
        ("forced-split JCTs 51.67/41.67/45.00", forced_splits),
        ("capped long job 62.00/63.33, flexible item to A", capped_long_job),
        ("knapsack item table", item_table),
        ("six-server reclaim layout", reclaim_layout),
        ("MCKP dp equals brute force", mckp_exactness),
        ("two-job closed form equals brute force", two_job_instances),
        ("reclaim heuristic bound", reclaim_bound),
        ("pinned end-to-end direction", pinned_scenario),
        ("preemption overhead and reset", overhead_semantics),
        ("simulate determinism", determinism),
        ("imperfect-scaling monotonicity", imperfect_scaling),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {d}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}

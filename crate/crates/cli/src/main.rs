use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lyra_core::alloc::{allocate_lyra, mckp_dp, AllocJob, AllocPolicy, MckpInstance};
use lyra_core::harness::{self, GenParams, SummaryRow};
use lyra_core::oracle::{self, BruteJob, ReclaimLayout, TwoJobInstance};
use lyra_core::reclaim::{preemption_costs, ReclaimPolicy};
use lyra_core::sim::{ClusterShape, ImperfectScaling, PredictError, Scenario, ScenarioConfig, SimOutput, Simulation};
use lyra_core::{JobId, JobSpec};

#[derive(Parser)]
#[command(name = "lyra", version, about = "Discrete-event simulator for a GPU training cluster that borrows inference servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.json, events.jsonl and summary.csv.
    Simulate(SimulateArgs),
    /// Run a matrix of policies on the same traces, one summary row per cell.
    Compare(CompareArgs),
    /// Write a synthetic job trace and utilization trace.
    GenTrace(GenArgs),
    /// Exhaustive and closed-form reference solvers.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Job trace, JSON Lines.
    #[arg(long)]
    jobs: PathBuf,
    /// Inference utilization trace, CSV with header t_s,utilization.
    #[arg(long)]
    util: Option<PathBuf>,
    /// Recorded loan/reclaim instructions, JSON Lines; replaces the utilization rule.
    #[arg(long)]
    loan_plan: Option<PathBuf>,
    #[arg(long, default_value = "basic")]
    scenario: Scenario,
    #[arg(long, env = "LYRA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    training_servers: usize,
    #[arg(long, default_value_t = 64)]
    inference_servers: usize,
    #[arg(long, default_value_t = 8)]
    gpus_per_server: u32,
    #[arg(long, default_value_t = 60)]
    sched_interval: u64,
    #[arg(long, default_value_t = 63.0)]
    preempt_overhead: f64,
    #[arg(long, default_value_t = 0.7)]
    hetero_efficiency: f64,
    #[arg(long, default_value_t = 0.10)]
    headroom: f64,
    /// Per-worker loss past the midpoint of the scaling range, e.g. 0.1.
    #[arg(long)]
    imperfect_loss: Option<f64>,
    /// Fraction of jobs whose runtime estimate is perturbed.
    #[arg(long)]
    predict_error: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    predict_error_max: f64,
    /// Stop the clock at this time, seconds.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "lyra")]
    alloc: AllocPolicy,
    #[arg(long, default_value = "lyra")]
    reclaim: ReclaimPolicy,
    #[arg(long)]
    no_loaning: bool,
    #[arg(long)]
    no_elastic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Cells as ALLOC[+RECLAIM]; a cell without a reclaim policy runs without loaning,
    /// fifo cells run every job at its maximum size.
    #[arg(long, value_delimiter = ',', default_value = "fifo,lyra+lyra,lyra+random,lyra+scf,afs+lyra,gandiva+lyra")]
    cells: Vec<String>,
    /// Directory for summary.csv and per-cell reports; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n_jobs: usize,
    #[arg(long, default_value_t = 2.0)]
    days: f64,
    #[arg(long, default_value_t = 64)]
    training_servers: usize,
    #[arg(long, default_value_t = 8)]
    gpus_per_server: u32,
    #[arg(long, env = "LYRA_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.65)]
    util_mean: f64,
    #[arg(long, default_value_t = 2.2)]
    util_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    load: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Costs, heuristic choices and the exhaustive optimum for a reclaim layout.
    Reclaim {
        input: PathBuf,
        #[arg(long)]
        n_r: Option<usize>,
        #[arg(long, env = "LYRA_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form optimum for two elastic jobs.
    Twojob { input: PathBuf },
    /// Best start allocation of up to four jobs by enumeration.
    Alloc { input: PathBuf },
    /// Knapsack optimum by dynamic programming and by enumeration.
    Mckp { input: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::GenTrace(a) => gen_trace(a),
        Command::Oracle(o) => run_oracle(o),
    }
}

struct Inputs {
    jobs: Vec<JobSpec>,
    util: Vec<(u64, f64)>,
    plan: Option<Vec<lyra_core::loaning::LoanInstruction>>,
}

fn load_inputs(a: &RunArgs) -> Result<Inputs> {
    let jobs = harness::parse_job_trace(&a.jobs).with_context(|| format!("reading {}", a.jobs.display()))?;
    let util = match &a.util {
        Some(p) => harness::parse_util_trace(p).with_context(|| format!("reading {}", p.display()))?.pairs(),
        None => Vec::new(),
    };
    let plan = match &a.loan_plan {
        Some(p) => Some(harness::parse_loan_plan(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    Ok(Inputs { jobs, util, plan })
}

fn config(a: &RunArgs, loaning: bool, elastic: bool) -> ScenarioConfig {
    ScenarioConfig {
        scenario: a.scenario,
        sched_interval_s: a.sched_interval,
        preempt_overhead_s: a.preempt_overhead,
        hetero_efficiency: a.hetero_efficiency,
        imperfect_scaling: a.imperfect_loss.map(|loss_per_step| ImperfectScaling { loss_per_step }),
        predict_error: a.predict_error.map(|fraction| PredictError {
            fraction,
            max_rel: a.predict_error_max,
            seed: a.seed,
        }),
        loaning,
        elastic_scaling: elastic,
        loan_headroom: a.headroom,
        horizon_s: a.horizon,
        ..ScenarioConfig::default()
    }
}

fn run_cell(
    a: &RunArgs,
    inputs: &Inputs,
    alloc: AllocPolicy,
    reclaim: ReclaimPolicy,
    loaning: bool,
    elastic: bool,
    label: String,
) -> Result<SimOutput> {
    let shape = ClusterShape {
        training_servers: a.training_servers,
        inference_servers: a.inference_servers,
        gpus_per_server: a.gpus_per_server,
    };
    let mut sim = Simulation::new(shape, config(a, loaning, elastic), inputs.jobs.clone())
        .with_allocator(alloc.build(a.imperfect_loss))
        .with_reclaim(reclaim)
        .with_seed(a.seed)
        .with_util(inputs.util.clone())
        .with_label(label);
    if let Some(plan) = &inputs.plan {
        sim = sim.with_loan_plan(plan.clone());
    }
    Ok(sim.run()?)
}

fn write_output(out: &SimOutput, dir: &Path) -> Result<()> {
    harness::write_report(&out.report, dir).with_context(|| format!("writing report to {}", dir.display()))?;
    harness::write_events(dir.join("events.jsonl"), &out.events)?;
    Ok(())
}

fn print_rows(rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let inputs = load_inputs(&a.run)?;
    let loaning = !a.no_loaning && (a.run.util.is_some() || inputs.plan.is_some());
    let label = format!("{}+{}", a.alloc.name(), a.reclaim.name());
    let out = run_cell(&a.run, &inputs, a.alloc, a.reclaim, loaning, !a.no_elastic, label)?;
    write_output(&out, &a.out)?;
    print_rows(&[harness::summary_row(&out.report)])
}

fn parse_cell(s: &str) -> Result<(AllocPolicy, Option<ReclaimPolicy>)> {
    let (alloc, reclaim) = match s.split_once('+') {
        Some((a, r)) => (a, Some(r)),
        None => (s, None),
    };
    let alloc = alloc.parse().map_err(anyhow::Error::msg)?;
    let reclaim = reclaim.map(str::parse).transpose().map_err(anyhow::Error::msg)?;
    Ok((alloc, reclaim))
}

fn compare(a: CompareArgs) -> Result<()> {
    let inputs = load_inputs(&a.run)?;
    let cells = a
        .cells
        .iter()
        .map(|c| parse_cell(c).with_context(|| format!("cell {c:?}")))
        .collect::<Result<Vec<_>>>()?;
    let outputs = cells
        .par_iter()
        .zip(&a.cells)
        .map(|(&(alloc, reclaim), name)| {
            let loaning = reclaim.is_some();
            let elastic = alloc != AllocPolicy::Fifo;
            run_cell(
                &a.run,
                &inputs,
                alloc,
                reclaim.unwrap_or(ReclaimPolicy::Lyra),
                loaning,
                elastic,
                name.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SummaryRow> = outputs.iter().map(|o| harness::summary_row(&o.report)).collect();
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        for (o, name) in outputs.iter().zip(&a.cells) {
            write_output(o, &dir.join(name.replace('+', "_")))?;
        }
        harness::write_summary(dir.join("summary.csv"), &rows)?;
    }
    print_rows(&rows)
}

fn gen_trace(a: GenArgs) -> Result<()> {
    let p = GenParams {
        n_jobs: a.n_jobs,
        days: a.days,
        training_servers: a.training_servers,
        gpus_per_server: a.gpus_per_server,
        seed: a.seed,
        util_mean: a.util_mean,
        util_ratio: a.util_ratio,
        target_load: a.load,
        ..GenParams::default()
    };
    let (jobs, util) = harness::gen_traces(&p)?;
    fs::create_dir_all(&a.out)?;
    harness::write_job_trace(a.out.join("jobs.jsonl"), &jobs)?;
    harness::write_util_trace(a.out.join("util.csv"), &util)?;
    println!("{} jobs, {} utilization samples -> {}", jobs.len(), util.samples.len(), a.out.display());
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Deserialize)]
struct AllocInput {
    capacity: u32,
    jobs: Vec<BruteJob>,
}

#[derive(Deserialize)]
struct MckpInput {
    capacity: u32,
    #[serde(flatten)]
    instance: MckpInstance,
}

fn run_oracle(cmd: OracleCommand) -> Result<()> {
    match cmd {
        OracleCommand::Reclaim { input, n_r, seed } => {
            let layout: ReclaimLayout = read_json(&input)?;
            let n_r = n_r.unwrap_or(layout.n_r);
            let (view, names) = layout.view()?;
            let name = |j: &JobId| names[j.0].clone();
            let mut policies = BTreeMap::new();
            for p in [ReclaimPolicy::Lyra, ReclaimPolicy::Random, ReclaimPolicy::Scf] {
                let o = p.select(&view, n_r, seed)?;
                policies.insert(
                    p.name(),
                    serde_json::json!({
                        "servers": o.selected_servers,
                        "preempted": o.preempted_jobs.iter().map(name).collect::<Vec<_>>(),
                        "preemptions": o.preemptions(),
                    }),
                );
            }
            let best = oracle::exhaustive_reclaim(&view, n_r)?;
            emit(&serde_json::json!({
                "n_r": n_r,
                "costs": preemption_costs(&view),
                "policies": policies,
                "exhaustive": best,
            }))
        }
        OracleCommand::Twojob { input } => {
            let inst: TwoJobInstance = read_json(&input)?;
            emit(&serde_json::json!({
                "optimal": oracle::two_job_optimal(&inst)?,
                "workload_rule": oracle::two_job_workload_rule(&inst)?,
            }))
        }
        OracleCommand::Alloc { input } => {
            let inp: AllocInput = read_json(&input)?;
            let brute = oracle::brute_force_allocation(&inp.jobs, inp.capacity)?;
            let queued: Vec<AllocJob> = inp
                .jobs
                .iter()
                .enumerate()
                .map(|(i, j)| AllocJob {
                    id: JobId(i),
                    submit_s: 0,
                    gpus_per_worker: j.gpus_per_worker,
                    min_workers: j.min_workers,
                    max_workers: j.max_workers,
                    remaining: j.workload,
                    current_workers: 0,
                })
                .collect();
            let plan = allocate_lyra(&queued, &[], inp.capacity);
            let workers: Vec<u32> = queued.iter().map(|j| plan.scheduled.get(&j.id).copied().unwrap_or(0)).collect();
            let lyra_jct = workers
                .iter()
                .all(|&w| w > 0)
                .then(|| oracle::simulate_scale_up(&inp.jobs, &workers, inp.capacity));
            emit(&serde_json::json!({
                "brute_force": brute,
                "lyra": { "workers": workers, "avg_jct": lyra_jct },
            }))
        }
        OracleCommand::Mckp { input } => {
            let inp: MckpInput = read_json(&input)?;
            let dp = mckp_dp(&inp.instance, inp.capacity);
            let brute = oracle::brute_force_mckp(&inp.instance, inp.capacity)?;
            if dp.value != brute.value {
                bail!("dynamic program {} disagrees with enumeration {}", dp.value, brute.value);
            }
            emit(&serde_json::json!({ "dp": dp, "brute_force": brute }))
        }
    }
}

//! `stealpool` command-line driver.
//!
//! `stealpool bench` runs the benchmark workloads and emits CSV;
//! `stealpool verify` runs long randomized correctness campaigns.
//!
//! Exit codes: 0 on success, 1 on a checksum mismatch or verification
//! failure, 2 on a usage error.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stealpool::bench::{self, BenchConfig, BenchError, Workload};
use stealpool::verify::{self, OwnerOps};
use stealpool::ThreadPool;

#[derive(Debug, Parser)]
#[command(
    name = "stealpool",
    version,
    about = "Work-stealing thread pool benchmarks and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time a workload and write one CSV row per iteration.
    Bench(BenchArgs),
    /// Run randomized DAG and deque stress campaigns.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// fib, expr or fanout.
    #[arg(long, value_parser = parse_workload)]
    workload: Workload,
    /// Primary parameter values: Fibonacci n, expression graph runs per
    /// iteration, or fanout task count.
    #[arg(long, value_delimiter = ',')]
    param: Vec<u64>,
    /// Fanout work units per task.
    #[arg(long)]
    param2: Option<u64>,
    /// Expression inputs a,b,c,d.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "1,2,3,4")]
    inputs: Vec<i64>,
    /// Worker counts to benchmark; 0 means hardware concurrency.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow Fibonacci n above the desk-scale guard.
    #[arg(long)]
    allow_large: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Random DAGs to execute.
    #[arg(long, default_value_t = 1000)]
    dags: u64,
    /// Upper bound on nodes per DAG.
    #[arg(long, default_value_t = 64)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.15)]
    edge_prob: f64,
    /// Pool size for DAG execution.
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deque stress runs.
    #[arg(long, default_value_t = 5)]
    deque_runs: u64,
    /// Items per deque stress run.
    #[arg(long, default_value_t = 1_000_000)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    thieves: usize,
    /// Probability that the owner pops after each push; 0 means push-only.
    #[arg(long, default_value_t = 0.5)]
    pop_prob: f64,
}

fn parse_workload(s: &str) -> Result<Workload, String> {
    s.parse().map_err(|e: BenchError| e.to_string())
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn run_bench(args: BenchArgs) -> ExitCode {
    let inputs: [i64; 4] = match args.inputs.try_into() {
        Ok(v) => v,
        Err(v) => return usage(format!("--inputs needs exactly 4 values, got {}", v.len())),
    };
    let params = if args.param.is_empty() {
        vec![bench::default_param(args.workload)]
    } else {
        args.param
    };
    let config = BenchConfig {
        workload: args.workload,
        params,
        param2: args.param2,
        expr_inputs: inputs,
        threads: args.threads,
        iterations: args.iterations,
        warmup: args.warmup,
        out: args.out,
        allow_large: args.allow_large,
    };
    let to_stdout = config.out.is_none();
    match bench::run_benchmark(&config) {
        Ok(records) => {
            if to_stdout {
                if let Err(e) = bench::write_csv(&records, io::stdout().lock()) {
                    return usage(e);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.is_usage() => usage(e),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_verify(args: VerifyArgs) -> anyhow::Result<bool> {
    if args.max_nodes == 0 || args.thieves == 0 {
        anyhow::bail!("--max-nodes and --thieves must be positive");
    }
    if !(0.0..=1.0).contains(&args.edge_prob) || !(0.0..=1.0).contains(&args.pop_prob) {
        anyhow::bail!("probabilities must lie within [0, 1]");
    }
    let mut ok = true;

    let started = Instant::now();
    let pool = ThreadPool::new(args.threads).context("starting pool")?;
    let mut violations = 0u64;
    for k in 0..args.dags {
        let seed = args.seed.wrapping_add(k);
        let nodes = 1 + (seed as usize).wrapping_mul(2654435761) % args.max_nodes;
        let spec = verify::random_dag(nodes, args.edge_prob, seed);
        let run = verify::execute_on_pool(&pool, &spec).context("executing DAG")?;
        if let Err(e) = verify::check_topological(&run.log, &spec) {
            eprintln!("dag seed {seed}: {e}");
            violations += 1;
        } else if run.state != verify::sequential_state(&spec) {
            eprintln!("dag seed {seed}: final state differs from sequential oracle");
            violations += 1;
        }
    }
    ok &= violations == 0;
    println!(
        "dags: {} executed on {} threads, {} violations ({:.2?})",
        args.dags,
        pool.thread_count(),
        violations,
        started.elapsed()
    );
    drop(pool);

    let ops = if args.pop_prob == 0.0 {
        OwnerOps::PushOnly
    } else {
        OwnerOps::Mixed {
            pop_probability: args.pop_prob,
        }
    };
    for run in 0..args.deque_runs {
        let started = Instant::now();
        let report =
            verify::deque_stress(ops, args.thieves, args.items, args.seed.wrapping_add(run));
        println!(
            "deque run {run}: {} items, owner {} stolen {}, lost {} duplicated {} fifo {} lifo {} ({:.2?})",
            report.item_count,
            report.owner.len(),
            report.stolen(),
            report.lost.len(),
            report.duplicated.len(),
            report.fifo_violations,
            report.lifo_violations,
            started.elapsed()
        );
        ok &= report.is_clean();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Verify(args) => match run_verify(args) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => {
                eprintln!("verification failed");
                ExitCode::FAILURE
            }
            Err(e) => usage(format!("{e:#}")),
        },
    }
}

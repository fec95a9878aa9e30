//! Benchmark workloads and the CSV-emitting harness.
//!
//! Three workloads are provided:
//!
//! - `fib`: recursive Fibonacci without memoization. Every internal node
//!   spawns two subtasks, and its combining step is a continuation guarded by
//!   a two-count join counter: whichever child finishes last runs it inline.
//! - `expr`: the seven-task `(a + b) * (c + d)` graph.
//! - `fanout`: independent compute-bound tasks, used for speedup checks.
//!
//! Each timed iteration records wall-clock time and process CPU time.

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::executor::{PoolError, PoolHandle, ThreadPool};
use crate::task_graph::TaskGraph;

/// Largest Fibonacci argument accepted without an explicit override.
pub const FIB_GUARD: u64 = 35;
/// Largest Fibonacci argument whose value fits the checksum column.
pub const FIB_MAX: u64 = 92;
/// Default per-task work for the fanout workload.
pub const DEFAULT_FANOUT_WORK: u64 = 200_000;
/// Inputs of the expression workload when none are given.
pub const DEFAULT_EXPR_INPUTS: [i64; 4] = [1, 2, 3, 4];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(
        "checksum mismatch for {workload} param={param} threads={threads} iteration={iteration}: \
         expected {expected}, got {actual}"
    )]
    ChecksumMismatch {
        workload: Workload,
        param: u64,
        threads: usize,
        iteration: usize,
        expected: i64,
        actual: i64,
    },
    #[error("cannot write output: {0}")]
    Io(#[from] io::Error),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

impl BenchError {
    /// Whether the failure is caused by invalid input or an unusable output
    /// path rather than by the code under test.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            BenchError::Usage(_) | BenchError::Io(_) | BenchError::Csv(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Fib,
    Expr,
    Fanout,
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workload::Fib => "fib",
            Workload::Expr => "expr",
            Workload::Fanout => "fanout",
        })
    }
}

impl FromStr for Workload {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fib" => Ok(Workload::Fib),
            "expr" => Ok(Workload::Expr),
            "fanout" => Ok(Workload::Fanout),
            other => Err(BenchError::Usage(format!("unknown workload `{other}`"))),
        }
    }
}

/// Total CPU time consumed by every thread of this process so far.
pub fn process_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: valid clock id and a valid out-pointer.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "CLOCK_PROCESS_CPUTIME_ID unavailable");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Iterative Fibonacci with `fib(0) = 0`, `fib(1) = 1`.
pub fn fib_oracle(n: u64) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..n {
        (a, b) = (b, a.wrapping_add(b));
    }
    a
}

struct Join {
    remaining: AtomicUsize,
    sum: AtomicU64,
    parent: Option<Arc<Join>>,
}

impl Join {
    fn new(count: usize, parent: Option<Arc<Join>>) -> Arc<Join> {
        Arc::new(Join {
            remaining: AtomicUsize::new(count),
            sum: AtomicU64::new(0),
            parent,
        })
    }
}

/// Delivers `value` to `join`; the last arriving child runs the combining
/// step inline and propagates upwards.
fn deliver(mut join: Arc<Join>, mut value: u64) {
    loop {
        join.sum.fetch_add(value, Ordering::AcqRel);
        if join.remaining.fetch_sub(1, Ordering::AcqRel) != 1 {
            return;
        }
        match &join.parent {
            Some(parent) => {
                value = join.sum.load(Ordering::Acquire);
                join = Arc::clone(parent);
            }
            None => return,
        }
    }
}

fn spawn_fib(handle: PoolHandle, n: u64, join: Arc<Join>) -> Result<(), PoolError> {
    let h = handle.clone();
    handle.submit(move || {
        if n < 2 {
            deliver(join, n);
        } else {
            let node = Join::new(2, Some(join));
            // Submission from a running task only fails after shutdown, which
            // cannot start while this task is pending.
            spawn_fib(h.clone(), n - 1, Arc::clone(&node)).expect("pool shut down mid-run");
            spawn_fib(h, n - 2, node).expect("pool shut down mid-run");
        }
    })
}

/// Computes `fib(n)` on `pool` by spawning two subtasks per internal node.
///
/// Rejects `n` above [`FIB_GUARD`]; see [`fib_workload_unguarded`].
pub fn fib_workload(pool: &ThreadPool, n: u64) -> Result<u64, BenchError> {
    if n > FIB_GUARD {
        return Err(BenchError::Usage(format!(
            "fib n={n} exceeds the guard of {FIB_GUARD}; pass an override to run it"
        )));
    }
    fib_workload_unguarded(pool, n)
}

/// [`fib_workload`] without the desk-scale guard (still capped at
/// [`FIB_MAX`]).
pub fn fib_workload_unguarded(pool: &ThreadPool, n: u64) -> Result<u64, BenchError> {
    if n > FIB_MAX {
        return Err(BenchError::Usage(format!(
            "fib n={n} overflows the checksum; maximum is {FIB_MAX}"
        )));
    }
    let root = Join::new(1, None);
    spawn_fib(pool.handle(), n, Arc::clone(&root))?;
    pool.wait()?;
    Ok(root.sum.load(Ordering::Acquire))
}

/// The `(a + b) * (c + d)` graph: four loads, two sums, one product.
pub struct ExprGraph {
    graph: TaskGraph,
    slots: Arc<[AtomicI64; 7]>,
}

impl ExprGraph {
    pub fn new(a: i64, b: i64, c: i64, d: i64) -> Self {
        let slots: Arc<[AtomicI64; 7]> = Arc::new(Default::default());
        let mut graph = TaskGraph::new();
        let load = |slot: usize, value: i64| {
            let slots = Arc::clone(&slots);
            move || slots[slot].store(value, Ordering::Relaxed)
        };
        let combine = |lhs: usize, rhs: usize, out: usize, op: fn(i64, i64) -> i64| {
            let slots = Arc::clone(&slots);
            move || {
                let v = op(
                    slots[lhs].load(Ordering::Relaxed),
                    slots[rhs].load(Ordering::Relaxed),
                );
                slots[out].store(v, Ordering::Relaxed)
            }
        };
        let get_a = graph.add_task(load(0, a));
        let get_b = graph.add_task(load(1, b));
        let get_c = graph.add_task(load(2, c));
        let get_d = graph.add_task(load(3, d));
        let sum_ab = graph.add_task(combine(0, 1, 4, i64::wrapping_add));
        let sum_cd = graph.add_task(combine(2, 3, 5, i64::wrapping_add));
        let product = graph.add_task(combine(4, 5, 6, i64::wrapping_mul));
        graph
            .succeed(sum_ab, [get_a, get_b])
            .expect("static wiring");
        graph
            .succeed(sum_cd, [get_c, get_d])
            .expect("static wiring");
        graph
            .succeed(product, [sum_ab, sum_cd])
            .expect("static wiring");
        ExprGraph { graph, slots }
    }

    pub fn graph(&self) -> &TaskGraph {
        &self.graph
    }

    /// Runs the graph once on `pool` and returns the product.
    pub fn run(&mut self, pool: &ThreadPool) -> Result<i64, BenchError> {
        self.graph.reset().map_err(PoolError::from)?;
        pool.submit_graph(&self.graph)?;
        pool.wait()?;
        Ok(self.slots[6].load(Ordering::Relaxed))
    }
}

/// Direct evaluation of `(a + b) * (c + d)` with wrapping arithmetic.
pub fn expr_oracle(a: i64, b: i64, c: i64, d: i64) -> i64 {
    a.wrapping_add(b).wrapping_mul(c.wrapping_add(d))
}

/// Builds and runs the expression graph once.
pub fn expr_workload(pool: &ThreadPool, a: i64, b: i64, c: i64, d: i64) -> Result<i64, BenchError> {
    ExprGraph::new(a, b, c, d).run(pool)
}

/// A compute-bound kernel that does not touch the heap.
pub fn spin_work(seed: u64, units: u64) -> u64 {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    for _ in 0..units {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    std::hint::black_box(x)
}

pub fn fanout_oracle(tasks: u64, units: u64) -> u64 {
    (0..tasks).fold(0u64, |acc, i| acc.wrapping_add(spin_work(i, units)))
}

/// Runs `tasks` independent [`spin_work`] tasks and returns the wrapping sum
/// of their results.
pub fn fanout_workload(pool: &ThreadPool, tasks: u64, units: u64) -> Result<u64, BenchError> {
    let total = Arc::new(AtomicU64::new(0));
    for i in 0..tasks {
        let total = Arc::clone(&total);
        pool.submit(move || {
            total.fetch_add(spin_work(i, units), Ordering::Relaxed);
        })?;
    }
    pool.wait()?;
    Ok(total.load(Ordering::Relaxed))
}

/// One timed iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRecord {
    pub workload: Workload,
    pub param: u64,
    pub threads: usize,
    pub iteration: usize,
    pub wall_ns: u64,
    pub cpu_ns: u64,
    pub checksum: i64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub workload: Workload,
    /// Primary parameter values: Fibonacci `n`, expression graph runs per
    /// iteration, or fanout task count.
    pub params: Vec<u64>,
    /// Fanout work units per task; ignored by the other workloads.
    pub param2: Option<u64>,
    pub expr_inputs: [i64; 4],
    pub threads: Vec<usize>,
    pub iterations: usize,
    pub warmup: usize,
    pub out: Option<PathBuf>,
    /// Lift the [`FIB_GUARD`] limit.
    pub allow_large: bool,
}

impl BenchConfig {
    pub fn new(workload: Workload) -> Self {
        BenchConfig {
            workload,
            params: vec![default_param(workload)],
            param2: None,
            expr_inputs: DEFAULT_EXPR_INPUTS,
            threads: vec![1],
            iterations: 5,
            warmup: 1,
            out: None,
            allow_large: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.threads.is_empty() {
            return Err(BenchError::Usage("thread list is empty".into()));
        }
        if self.params.is_empty() {
            return Err(BenchError::Usage("parameter list is empty".into()));
        }
        if self.iterations == 0 {
            return Err(BenchError::Usage("iterations must be positive".into()));
        }
        if self.workload == Workload::Fib {
            let limit = if self.allow_large { FIB_MAX } else { FIB_GUARD };
            if let Some(&n) = self.params.iter().find(|&&n| n > limit) {
                return Err(BenchError::Usage(format!(
                    "fib n={n} exceeds the limit of {limit}"
                )));
            }
        }
        Ok(())
    }
}

pub fn default_param(workload: Workload) -> u64 {
    match workload {
        Workload::Fib => 25,
        Workload::Expr => 1,
        Workload::Fanout => 64,
    }
}

/// Expected checksum for one iteration of `workload` at `param`.
pub fn expected_checksum(config: &BenchConfig, param: u64) -> i64 {
    match config.workload {
        Workload::Fib => fib_oracle(param) as i64,
        Workload::Expr => {
            let [a, b, c, d] = config.expr_inputs;
            expr_oracle(a, b, c, d)
        }
        Workload::Fanout => {
            fanout_oracle(param, config.param2.unwrap_or(DEFAULT_FANOUT_WORK)) as i64
        }
    }
}

fn run_once(config: &BenchConfig, pool: &ThreadPool, param: u64) -> Result<i64, BenchError> {
    Ok(match config.workload {
        Workload::Fib => fib_workload_unguarded(pool, param)? as i64,
        Workload::Expr => {
            let [a, b, c, d] = config.expr_inputs;
            let mut expr = ExprGraph::new(a, b, c, d);
            let mut product = 0;
            for _ in 0..param.max(1) {
                product = expr.run(pool)?;
            }
            product
        }
        Workload::Fanout => {
            fanout_workload(pool, param, config.param2.unwrap_or(DEFAULT_FANOUT_WORK))? as i64
        }
    })
}

/// Runs every `(threads, param)` combination: `warmup` untimed runs, then
/// `iterations` timed runs, checking each checksum against its oracle.
///
/// When `config.out` is set the records are also written there as CSV; the
/// file is created before any work starts.
pub fn run_benchmark(config: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    config.validate()?;
    let out = config.out.as_ref().map(File::create).transpose()?;

    let mut records =
        Vec::with_capacity(config.threads.len() * config.params.len() * config.iterations);
    for &threads in &config.threads {
        let pool = ThreadPool::new(threads)?;
        for &param in &config.params {
            let expected = expected_checksum(config, param);
            let check = |iteration: usize, actual: i64| {
                if actual == expected {
                    Ok(())
                } else {
                    Err(BenchError::ChecksumMismatch {
                        workload: config.workload,
                        param,
                        threads: pool.thread_count(),
                        iteration,
                        expected,
                        actual,
                    })
                }
            };
            for _ in 0..config.warmup {
                check(0, run_once(config, &pool, param)?)?;
            }
            for iteration in 0..config.iterations {
                let cpu_start = process_cpu_time();
                let wall_start = Instant::now();
                let checksum = run_once(config, &pool, param)?;
                let wall = wall_start.elapsed();
                let cpu = process_cpu_time().saturating_sub(cpu_start);
                check(iteration, checksum)?;
                records.push(BenchRecord {
                    workload: config.workload,
                    param,
                    threads: pool.thread_count(),
                    iteration,
                    wall_ns: (wall.as_nanos() as u64).max(1),
                    cpu_ns: cpu.as_nanos() as u64,
                    checksum,
                });
            }
        }
    }

    if let Some(file) = out {
        write_csv(&records, io::BufWriter::new(file))?;
    }
    Ok(records)
}

/// Writes records with the header
/// `workload,param,threads,iteration,wall_ns,cpu_ns,checksum`.
pub fn write_csv<W: Write>(records: &[BenchRecord], sink: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(sink);
    if records.is_empty() {
        w.write_record([
            "workload",
            "param",
            "threads",
            "iteration",
            "wall_ns",
            "cpu_ns",
            "checksum",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Median wall time of the records run with `threads` workers.
pub fn median_wall_ns(records: &[BenchRecord], threads: usize) -> Option<u64> {
    let mut walls: Vec<u64> = records
        .iter()
        .filter(|r| r.threads == threads)
        .map(|r| r.wall_ns)
        .collect();
    if walls.is_empty() {
        return None;
    }
    walls.sort_unstable();
    let mid = walls.len() / 2;
    Some(if walls.len() % 2 == 1 {
        walls[mid]
    } else {
        (walls[mid - 1] + walls[mid]) / 2
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fib_oracle_values() {
        let expected = [0u64, 1, 1, 2, 3, 5, 8, 13, 21, 34, 55];
        for (n, &v) in expected.iter().enumerate() {
            assert_eq!(fib_oracle(n as u64), v);
        }
        assert_eq!(fib_oracle(20), 6765);
        assert_eq!(fib_oracle(25), 75025);
        assert_eq!(fib_oracle(30), 832040);
        assert_eq!(fib_oracle(92), 7540113804746346429);
    }

    #[test]
    fn fib_base_cases() {
        let pool = ThreadPool::new(2).unwrap();
        assert_eq!(fib_workload(&pool, 0).unwrap(), 0);
        assert_eq!(fib_workload(&pool, 1).unwrap(), 1);
    }

    #[test]
    fn fib_25() {
        let pool = ThreadPool::new(2).unwrap();
        assert_eq!(fib_workload(&pool, 25).unwrap(), 75025);
    }

    #[test]
    fn fib_guard() {
        let pool = ThreadPool::new(1).unwrap();
        assert!(matches!(fib_workload(&pool, 36), Err(BenchError::Usage(_))));
        assert!(matches!(
            fib_workload_unguarded(&pool, 93),
            Err(BenchError::Usage(_))
        ));
    }

    #[test]
    fn expr_values() {
        let pool = ThreadPool::new(2).unwrap();
        assert_eq!(expr_workload(&pool, 1, 2, 3, 4).unwrap(), 21);
        assert_eq!(expr_workload(&pool, 0, 0, 0, 0).unwrap(), 0);
        assert_eq!(expr_workload(&pool, -5, 2, 7, -1).unwrap(), -18);
    }

    #[test]
    fn expr_graph_reruns() {
        let pool = ThreadPool::new(2).unwrap();
        let mut g = ExprGraph::new(1, 2, 3, 4);
        assert_eq!(g.run(&pool).unwrap(), 21);
        assert_eq!(g.run(&pool).unwrap(), 21);
        assert_eq!(g.graph().len(), 7);
    }

    #[test]
    fn fanout_matches_oracle() {
        let pool = ThreadPool::new(3).unwrap();
        assert_eq!(
            fanout_workload(&pool, 37, 1000).unwrap(),
            fanout_oracle(37, 1000)
        );
    }

    #[test]
    fn workload_names_round_trip() {
        for w in [Workload::Fib, Workload::Expr, Workload::Fanout] {
            assert_eq!(w.to_string().parse::<Workload>().unwrap(), w);
        }
        assert!("fibonacci".parse::<Workload>().is_err());
    }

    #[test]
    fn empty_thread_list_is_usage_error() {
        let mut config = BenchConfig::new(Workload::Fib);
        config.threads.clear();
        let err = run_benchmark(&config).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn fib_over_guard_is_usage_error_unless_allowed() {
        let mut config = BenchConfig::new(Workload::Fib);
        config.params = vec![40];
        assert!(config.validate().unwrap_err().is_usage());
        config.allow_large = true;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn median_of_even_and_odd() {
        let rec = |threads, wall_ns| BenchRecord {
            workload: Workload::Fanout,
            param: 1,
            threads,
            iteration: 0,
            wall_ns,
            cpu_ns: 0,
            checksum: 0,
        };
        let rs = vec![rec(1, 5), rec(1, 1), rec(1, 3), rec(2, 10), rec(2, 20)];
        assert_eq!(median_wall_ns(&rs, 1), Some(3));
        assert_eq!(median_wall_ns(&rs, 2), Some(15));
        assert_eq!(median_wall_ns(&rs, 4), None);
    }

    #[test]
    fn cpu_clock_advances_under_load() {
        let before = process_cpu_time();
        std::hint::black_box(spin_work(1, 5_000_000));
        assert!(process_cpu_time() > before);
    }
}

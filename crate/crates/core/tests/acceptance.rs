//! Acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! `cargo test -p stealpool --test acceptance` (release mode recommended for
//! the timing criteria: add `--release`). Exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stealpool::bench::{
    self, expr_workload, fib_oracle, fib_workload, process_cpu_time, BenchConfig, Workload,
};
use stealpool::verify::{
    check_topological, deque_stress, execute_on_pool, random_dag, sequential_state, OwnerOps,
};
use stealpool::{PoolHandle, ThreadPool};

/// Set in the environment of the nested sanitizer run so it does not recurse.
const NESTED_ENV: &str = "STEALPOOL_ACCEPTANCE_NESTED";

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn within(limit: Duration, elapsed: Duration, detail: String) -> Verdict {
    if elapsed < limit {
        Verdict::Pass(format!("{detail} in {elapsed:.2?} (limit {limit:?})"))
    } else {
        Verdict::Fail(format!("{detail} but took {elapsed:.2?} (limit {limit:?})"))
    }
}

fn expression_graph() -> Verdict {
    let started = Instant::now();
    for threads in [1, 2, 4] {
        let pool = ThreadPool::new(threads).unwrap();
        for rep in 0..100 {
            match expr_workload(&pool, 1, 2, 3, 4) {
                Ok(21) => {}
                other => return Verdict::Fail(format!("threads={threads} rep={rep}: {other:?}")),
            }
        }
    }
    within(
        Duration::from_secs(5),
        started.elapsed(),
        "300/300 runs returned 21".into(),
    )
}

fn fibonacci() -> Verdict {
    let started = Instant::now();
    for threads in [1, 4] {
        let pool = ThreadPool::new(threads).unwrap();
        for n in 0..=25 {
            let got = fib_workload(&pool, n);
            if got.as_ref().ok() != Some(&fib_oracle(n)) {
                return Verdict::Fail(format!(
                    "threads={threads} n={n}: {got:?}, want {}",
                    fib_oracle(n)
                ));
            }
        }
    }
    within(
        Duration::from_secs(60),
        started.elapsed(),
        "n in 0..=25 exact at 1 and 4 threads".into(),
    )
}

fn topological_safety() -> Verdict {
    let started = Instant::now();
    let pool = ThreadPool::new(4).unwrap();
    for seed in 0..1000u64 {
        let n = 1 + (seed as usize * 37) % 64;
        let spec = random_dag(n, 0.15, seed);
        let run = match execute_on_pool(&pool, &spec) {
            Ok(run) => run,
            Err(e) => return Verdict::Fail(format!("seed {seed}: {e}")),
        };
        if let Err(e) = check_topological(&run.log, &spec) {
            return Verdict::Fail(format!("seed {seed}: {e}"));
        }
        if run.state != sequential_state(&spec) {
            return Verdict::Fail(format!(
                "seed {seed}: state differs from sequential execution"
            ));
        }
    }
    within(
        Duration::from_secs(60),
        started.elapsed(),
        "1000 DAGs, 0 violations".into(),
    )
}

fn deque_conservation() -> Verdict {
    let mut slowest = Duration::ZERO;
    for seed in 0..5u64 {
        let started = Instant::now();
        let report = deque_stress(
            OwnerOps::Mixed {
                pop_probability: 0.5,
            },
            4,
            1_000_000,
            seed,
        );
        let elapsed = started.elapsed();
        slowest = slowest.max(elapsed);
        if !report.is_conserved() {
            return Verdict::Fail(format!(
                "seed {seed}: lost {} duplicated {}",
                report.lost.len(),
                report.duplicated.len()
            ));
        }
        if elapsed >= Duration::from_secs(30) {
            return Verdict::Fail(format!(
                "seed {seed} conserved but took {elapsed:.2?} (limit 30s)"
            ));
        }
    }
    Verdict::Pass(format!(
        "5 runs x 1,000,000 items conserved, slowest run {slowest:.2?} (limit 30s)"
    ))
}

const NESTED_BUDGET: usize = 10_000;

struct Nested {
    handle: PoolHandle,
    budget: AtomicUsize,
    submitted: AtomicUsize,
    executed: AtomicUsize,
}

/// Claims one unit of the budget and submits a task that fans out into
/// 1..=3 further claims. Trees only die once the budget is exhausted.
fn spawn_nested(ctx: &Arc<Nested>, seed: u64) -> bool {
    let claimed = ctx
        .budget
        .fetch_update(Ordering::AcqRel, Ordering::Acquire, |b| b.checked_sub(1))
        .is_ok();
    if !claimed {
        return false;
    }
    ctx.submitted.fetch_add(1, Ordering::Relaxed);
    let c = Arc::clone(ctx);
    ctx.handle
        .submit(move || {
            c.executed.fetch_add(1, Ordering::Relaxed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..rng.gen_range(1..=3) {
                spawn_nested(&c, rng.gen());
            }
        })
        .unwrap();
    true
}

fn exactly_once() -> Verdict {
    for rep in 0..50u64 {
        let pool = ThreadPool::new(4).unwrap();
        let ctx = Arc::new(Nested {
            handle: pool.handle(),
            budget: AtomicUsize::new(NESTED_BUDGET),
            submitted: AtomicUsize::new(0),
            executed: AtomicUsize::new(0),
        });
        for root in 0..100 {
            spawn_nested(&ctx, rep << 32 | root);
        }
        if let Err(e) = pool.wait() {
            return Verdict::Fail(format!("rep {rep}: {e}"));
        }
        let submitted = ctx.submitted.load(Ordering::Relaxed);
        let executed = ctx.executed.load(Ordering::Relaxed);
        let stats = pool.stats();
        if submitted != NESTED_BUDGET
            || executed != submitted
            || stats.executed() != submitted as u64
            || pool.pending() != 0
            || pool.queued_jobs() != 0
        {
            return Verdict::Fail(format!(
                "rep {rep}: submitted {submitted} executed {executed} pool-executed {} pending {} queued {}",
                stats.executed(),
                pool.pending(),
                pool.queued_jobs()
            ));
        }
    }
    Verdict::Pass("50 reps x 10,000 nested submissions, executed == submitted, queues empty".into())
}

fn race_detector() -> Verdict {
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let target = std::env::var("STEALPOOL_TSAN_TARGET")
        .unwrap_or_else(|_| "x86_64-unknown-linux-gnu".into());
    let started = Instant::now();
    let output = Command::new("cargo")
        .current_dir(&workspace)
        .args([
            "+nightly",
            "test",
            "-Zbuild-std",
            "--target",
            &target,
            "--target-dir",
        ])
        .arg(workspace.join("target/tsan"))
        .args(["--workspace", "--lib", "--bins", "--tests"])
        .env("RUSTFLAGS", "-Zsanitizer=thread")
        .env("TSAN_OPTIONS", "halt_on_error=1")
        .env(NESTED_ENV, "1")
        .env_remove("RUSTC")
        .env_remove("RUSTDOC")
        .env_remove("RUSTUP_TOOLCHAIN")
        .env_remove("CARGO_TARGET_DIR")
        .output();
    let output = match output {
        Ok(o) => o,
        Err(e) => return Verdict::Fail(format!("could not launch cargo: {e}")),
    };
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let races = text.matches("WARNING: ThreadSanitizer").count();
    let suites = text.matches("test result: ok.").count();
    if output.status.success() && races == 0 {
        Verdict::Pass(format!(
            "{suites} suites clean under ThreadSanitizer in {:.2?}",
            started.elapsed()
        ))
    } else {
        let tail: Vec<&str> = text.lines().rev().take(15).collect();
        let tail: Vec<&str> = tail.into_iter().rev().collect();
        Verdict::Fail(format!(
            "{races} race reports, status {}\n{}",
            output.status,
            tail.join("\n")
        ))
    }
}

fn speedup() -> Verdict {
    let hw = thread::available_parallelism().map_or(1, |n| n.get());
    if hw < 4 {
        return Verdict::Skip(format!(
            "needs >= 4 hardware threads, this machine has {hw}"
        ));
    }
    let mut config = BenchConfig::new(Workload::Fanout);
    config.threads = vec![1, 4];
    config.iterations = 5;
    let records = match bench::run_benchmark(&config) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let one = bench::median_wall_ns(&records, 1).unwrap();
    let four = bench::median_wall_ns(&records, 4).unwrap();
    let ratio = four as f64 / one as f64;
    let detail =
        format!("median 1 thread {one} ns, 4 threads {four} ns, ratio {ratio:.3} (limit 0.5)");
    if ratio <= 0.5 {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn idle_cpu() -> Verdict {
    let pool = ThreadPool::new(4).unwrap();
    pool.submit(|| {}).unwrap();
    pool.wait().unwrap();
    // let every worker run out its spin budget and park
    thread::sleep(Duration::from_millis(100));
    let before = process_cpu_time();
    thread::sleep(Duration::from_secs(1));
    let used = process_cpu_time().saturating_sub(before);
    let parks = pool.stats().parks;
    drop(pool);
    let detail = format!("{used:.2?} CPU over 1 s idle, {parks} parks (limit 50ms)");
    if used < Duration::from_millis(50) {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    if std::env::var_os(NESTED_ENV).is_some() {
        println!("acceptance: skipped inside nested sanitizer run");
        return;
    }
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 8] = [
        ("expression graph correctness", expression_graph),
        ("fibonacci correctness", fibonacci),
        ("topological safety", topological_safety),
        ("deque conservation", deque_conservation),
        ("exactly-once and quiescence", exactly_once),
        ("race-detector cleanliness", race_detector),
        ("parallel speedup", speedup),
        ("idle cpu bound", idle_cpu),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Verdict::Pass(d) => println!("PASS {name}: {d}"),
            Verdict::Skip(d) => println!("SKIP {name}: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

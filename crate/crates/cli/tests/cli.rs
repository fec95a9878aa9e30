use std::process::{Command, Output};

fn stealpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stealpool"))
        .args(args)
        .output()
        .expect("failed to launch stealpool")
}

#[test]
fn bench_fib_writes_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fib.csv");
    let o = stealpool(&[
        "bench",
        "--workload",
        "fib",
        "--param",
        "20",
        "--threads",
        "1,4",
        "--iterations",
        "3",
        "--warmup",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "workload,param,threads,iteration,wall_ns,cpu_ns,checksum"
    );
    assert_eq!(lines.len(), 7);
    assert!(lines[1..].iter().all(|l| l.ends_with(",6765")));
}

#[test]
fn bench_expr_defaults_to_stdout() {
    let o = stealpool(&["bench", "--workload", "expr", "--iterations", "2"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout
        .lines()
        .skip(1)
        .all(|l| l.starts_with("expr,1,1,") && l.ends_with(",21")));
}

#[test]
fn bench_custom_expr_inputs() {
    let o = stealpool(&[
        "bench",
        "--workload",
        "expr",
        "--inputs",
        "2,3,4,5",
        "--iterations",
        "1",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .trim_end()
        .ends_with(",45"));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["bench", "--workload", "fib", "--threads", ""][..],
        &["bench", "--workload", "fib", "--param", "40"][..],
        &["bench", "--workload", "nope"][..],
        &["bench", "--workload", "expr", "--inputs", "1,2,3"][..],
        &[
            "bench",
            "--workload",
            "expr",
            "--out",
            "/nonexistent-dir/x/out.csv",
        ][..],
    ] {
        let o = stealpool(args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn verify_small_campaign_passes() {
    let o = stealpool(&[
        "verify",
        "--dags",
        "50",
        "--threads",
        "3",
        "--deque-runs",
        "2",
        "--items",
        "20000",
        "--thieves",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("dags: 50 executed on 3 threads, 0 violations"));
    assert_eq!(
        stdout.matches("lost 0 duplicated 0 fifo 0 lifo 0").count(),
        2
    );
}

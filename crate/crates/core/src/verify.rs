//! Correctness harness: random DAGs, a sequential execution oracle,
//! completion-order checking and a deque stress driver.
//!
//! Random DAGs only contain forward edges `(p, s)` with `p < s`, so they are
//! acyclic by construction. Completion ticks come from one shared counter,
//! which gives a total order over completions.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::deque::{Steal, WorkStealingDeque};
use crate::executor::{PoolError, ThreadPool};
use crate::task_graph::TaskGraph;

const UNRECORDED: u64 = u64::MAX;

/// A DAG over nodes `0..node_count` with forward edges only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagSpec {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub seed: u64,
}

impl DagSpec {
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.node_count];
        for &(p, s) in &self.edges {
            preds[s].push(p);
        }
        preds
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succs = vec![Vec::new(); self.node_count];
        for &(p, s) in &self.edges {
            succs[p].push(s);
        }
        succs
    }

    pub fn roots(&self) -> Vec<usize> {
        let preds = self.predecessors();
        (0..self.node_count)
            .filter(|&i| preds[i].is_empty())
            .collect()
    }
}

/// Generates a DAG where each forward pair `(i, j)`, `i < j`, is an edge with
/// probability `edge_probability`. Deterministic in `seed`.
///
/// # Panics
///
/// If `node_count` is zero or `edge_probability` is outside `[0, 1]`.
pub fn random_dag(node_count: usize, edge_probability: f64, seed: u64) -> DagSpec {
    assert!(node_count >= 1, "node_count must be positive");
    assert!(
        (0.0..=1.0).contains(&edge_probability),
        "edge_probability must be within [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..node_count {
        for j in i + 1..node_count {
            if rng.gen_bool(edge_probability) {
                edges.push((i, j));
            }
        }
    }
    DagSpec {
        node_count,
        edges,
        seed,
    }
}

/// Completion ticks per task, appendable from many threads at once.
#[derive(Debug)]
pub struct OrderLog {
    ticks: Vec<AtomicU64>,
    clock: AtomicU64,
    duplicates: AtomicUsize,
}

impl OrderLog {
    pub fn new(task_count: usize) -> Self {
        OrderLog {
            ticks: (0..task_count)
                .map(|_| AtomicU64::new(UNRECORDED))
                .collect(),
            clock: AtomicU64::new(0),
            duplicates: AtomicUsize::new(0),
        }
    }

    /// Builds a log from an explicit completion order.
    pub fn from_order(task_count: usize, order: &[usize]) -> Self {
        let log = Self::new(task_count);
        for &t in order {
            log.record(t);
        }
        log
    }

    /// Records that `task` completed now.
    pub fn record(&self, task: usize) {
        let tick = self.clock.fetch_add(1, Ordering::SeqCst);
        if self.ticks[task]
            .compare_exchange(UNRECORDED, tick, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            self.duplicates.fetch_add(1, Ordering::SeqCst);
        }
    }

    pub fn task_count(&self) -> usize {
        self.ticks.len()
    }

    pub fn tick(&self, task: usize) -> Option<u64> {
        match self.ticks[task].load(Ordering::SeqCst) {
            UNRECORDED => None,
            t => Some(t),
        }
    }

    /// Recorded `(task, tick)` pairs in completion order.
    pub fn entries(&self) -> Vec<(usize, u64)> {
        let mut e: Vec<(usize, u64)> = (0..self.ticks.len())
            .filter_map(|i| self.tick(i).map(|t| (i, t)))
            .collect();
        e.sort_by_key(|&(_, t)| t);
        e
    }

    /// Tasks in completion order.
    pub fn order(&self) -> Vec<usize> {
        self.entries().into_iter().map(|(i, _)| i).collect()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopoError {
    #[error("log covers {log} tasks but the DAG has {dag}")]
    SizeMismatch { log: usize, dag: usize },
    #[error("log is incomplete; missing tasks {missing:?}")]
    Incomplete { missing: Vec<usize> },
    #[error("{count} tasks were recorded more than once")]
    Duplicate { count: usize },
    #[error("task {} completed before its predecessor {}", .edge.1, .edge.0)]
    Violation { edge: (usize, usize) },
}

/// Checks that every edge's predecessor completed before its successor.
pub fn check_topological(log: &OrderLog, spec: &DagSpec) -> Result<(), TopoError> {
    if log.task_count() != spec.node_count {
        return Err(TopoError::SizeMismatch {
            log: log.task_count(),
            dag: spec.node_count,
        });
    }
    let missing: Vec<usize> = (0..spec.node_count)
        .filter(|&i| log.tick(i).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(TopoError::Incomplete { missing });
    }
    if log.duplicates() > 0 {
        return Err(TopoError::Duplicate {
            count: log.duplicates(),
        });
    }
    for &(p, s) in &spec.edges {
        if log.tick(p) >= log.tick(s) {
            return Err(TopoError::Violation { edge: (p, s) });
        }
    }
    Ok(())
}

/// Runs the DAG single-threaded in Kahn order.
pub fn sequential_execute(spec: &DagSpec) -> OrderLog {
    let log = OrderLog::new(spec.node_count);
    for t in kahn_order(spec) {
        log.record(t);
    }
    log
}

fn kahn_order(spec: &DagSpec) -> Vec<usize> {
    let succs = spec.successors();
    let mut indegree = vec![0usize; spec.node_count];
    for &(_, s) in &spec.edges {
        indegree[s] += 1;
    }
    let mut ready: std::collections::VecDeque<usize> =
        (0..spec.node_count).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(spec.node_count);
    while let Some(t) = ready.pop_front() {
        order.push(t);
        for &s in &succs[t] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push_back(s);
            }
        }
    }
    order
}

/// Value a node of the accumulator workload computes from its index and the
/// wrapping sum of its predecessors' values.
pub fn node_value(index: usize, predecessor_sum: u64) -> u64 {
    let mut x = predecessor_sum ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Final state of the accumulator workload computed sequentially.
pub fn sequential_state(spec: &DagSpec) -> Vec<u64> {
    let preds = spec.predecessors();
    let mut values = vec![0u64; spec.node_count];
    for t in kahn_order(spec) {
        let sum = preds[t]
            .iter()
            .fold(0u64, |acc, &p| acc.wrapping_add(values[p]));
        values[t] = node_value(t, sum);
    }
    values
}

/// Result of running a [`DagSpec`] on a pool.
#[derive(Debug)]
pub struct DagRun {
    pub log: Arc<OrderLog>,
    pub state: Vec<u64>,
}

/// Builds a [`TaskGraph`] mirroring `spec`, whose tasks compute the
/// accumulator workload into `values` and record completion into `log`.
pub fn build_graph(spec: &DagSpec, log: &Arc<OrderLog>, values: &Arc<Vec<AtomicU64>>) -> TaskGraph {
    let preds = Arc::new(spec.predecessors());
    let mut graph = TaskGraph::new();
    let ids: Vec<_> = (0..spec.node_count)
        .map(|i| {
            let preds = Arc::clone(&preds);
            let log = Arc::clone(log);
            let values = Arc::clone(values);
            graph.add_task(move || {
                let sum = preds[i].iter().fold(0u64, |acc, &p| {
                    acc.wrapping_add(values[p].load(Ordering::Relaxed))
                });
                values[i].store(node_value(i, sum), Ordering::Relaxed);
                log.record(i);
            })
        })
        .collect();
    for (s, ps) in preds.iter().enumerate() {
        graph
            .succeed(ids[s], ps.iter().map(|&p| ids[p]))
            .expect("forward edges are always valid");
    }
    graph
}

/// Executes `spec` on `pool` and waits for it.
pub fn execute_on_pool(pool: &ThreadPool, spec: &DagSpec) -> Result<DagRun, PoolError> {
    let log = Arc::new(OrderLog::new(spec.node_count));
    let values: Arc<Vec<AtomicU64>> =
        Arc::new((0..spec.node_count).map(|_| AtomicU64::new(0)).collect());
    let graph = build_graph(spec, &log, &values);
    pool.submit_graph(&graph)?;
    pool.wait()?;
    let state = values.iter().map(|v| v.load(Ordering::Relaxed)).collect();
    Ok(DagRun { log, state })
}

/// How the owner thread behaves during a deque stress run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OwnerOps {
    /// The owner only pushes; thieves consume everything.
    PushOnly,
    /// After each push the owner pops with the given probability, and drains
    /// the deque once all items are pushed.
    Mixed { pop_probability: f64 },
}

/// Per-consumer logs and conservation findings of a stress run.
#[derive(Debug, Clone, Default)]
pub struct StressReport {
    pub item_count: usize,
    pub owner: Vec<u64>,
    pub thieves: Vec<Vec<u64>>,
    /// Items pushed but never consumed.
    pub lost: Vec<u64>,
    /// Items consumed more than once.
    pub duplicated: Vec<u64>,
    /// Thief logs that are not strictly increasing (oldest-first broken).
    pub fifo_violations: usize,
    /// Owner pops that did not return the newest remaining item.
    pub lifo_violations: usize,
}

impl StressReport {
    pub fn is_conserved(&self) -> bool {
        self.lost.is_empty() && self.duplicated.is_empty()
    }

    pub fn is_clean(&self) -> bool {
        self.is_conserved() && self.fifo_violations == 0 && self.lifo_violations == 0
    }

    pub fn consumed(&self) -> usize {
        self.owner.len() + self.thieves.iter().map(Vec::len).sum::<usize>()
    }

    pub fn stolen(&self) -> usize {
        self.thieves.iter().map(Vec::len).sum()
    }
}

/// Runs one owner against `thief_count` concurrent thieves over
/// `item_count` distinct items and checks conservation and ordering.
///
/// # Panics
///
/// If `thief_count` is zero.
pub fn deque_stress(
    owner_ops: OwnerOps,
    thief_count: usize,
    item_count: usize,
    seed: u64,
) -> StressReport {
    assert!(thief_count >= 1, "at least one thief is required");
    let deque = WorkStealingDeque::<u64>::with_capacity(2);
    let consumed = Arc::new(AtomicUsize::new(0));
    let start = Arc::new(Barrier::new(thief_count + 1));

    let thieves: Vec<_> = (0..thief_count)
        .map(|_| {
            let stealer = deque.stealer();
            let consumed = Arc::clone(&consumed);
            let start = Arc::clone(&start);
            thread::spawn(move || {
                let mut log = Vec::new();
                let mut idle = 0u32;
                start.wait();
                while consumed.load(Ordering::Acquire) < item_count {
                    match stealer.steal() {
                        Steal::Success(v) => {
                            log.push(*v);
                            consumed.fetch_add(1, Ordering::AcqRel);
                            idle = 0;
                        }
                        Steal::Retry => std::hint::spin_loop(),
                        Steal::Empty => {
                            idle += 1;
                            if idle > 16 {
                                thread::yield_now();
                            } else {
                                std::hint::spin_loop();
                            }
                        }
                    }
                }
                log
            })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut owner = Vec::new();
    // Items pushed by the owner and not yet popped by it; thieves remove
    // from the front, so a successful pop must return the last entry.
    let mut shadow: Vec<u64> = Vec::new();
    let mut lifo_violations = 0;
    let mut owner_pop = |owner: &mut Vec<u64>, shadow: &mut Vec<u64>| -> bool {
        match deque.pop() {
            Some(v) => {
                if shadow.last() == Some(&*v) {
                    shadow.pop();
                } else {
                    lifo_violations += 1;
                    shadow.retain(|&s| s != *v);
                }
                owner.push(*v);
                consumed.fetch_add(1, Ordering::AcqRel);
                true
            }
            None => {
                shadow.clear();
                false
            }
        }
    };

    start.wait();
    for item in 0..item_count as u64 {
        deque.push(Box::new(item));
        if let OwnerOps::Mixed { pop_probability } = owner_ops {
            shadow.push(item);
            if rng.gen_bool(pop_probability) {
                owner_pop(&mut owner, &mut shadow);
            }
        }
    }
    if matches!(owner_ops, OwnerOps::Mixed { .. }) {
        while owner_pop(&mut owner, &mut shadow) {}
    }

    let thief_logs: Vec<Vec<u64>> = thieves.into_iter().map(|h| h.join().unwrap()).collect();
    drop(deque);

    let mut seen = vec![0u32; item_count];
    for &v in owner.iter().chain(thief_logs.iter().flatten()) {
        seen[v as usize] += 1;
    }
    let lost = (0..item_count as u64)
        .filter(|&v| seen[v as usize] == 0)
        .collect();
    let duplicated = (0..item_count as u64)
        .filter(|&v| seen[v as usize] > 1)
        .collect();
    let fifo_violations = thief_logs
        .iter()
        .map(|log| log.windows(2).filter(|w| w[0] >= w[1]).count())
        .sum();

    StressReport {
        item_count,
        owner,
        thieves: thief_logs,
        lost,
        duplicated,
        fifo_violations,
        lifo_violations,
    }
}

//! The work-stealing thread pool.
//!
//! Every worker owns a [`WorkStealingDeque`]. A thread-local slot tells a
//! submitting thread whether it is one of this pool's workers; if it is, the
//! job goes onto its own deque, otherwise onto the shared injector queue.
//! Idle workers pop their own deque, then drain the injector, then steal from
//! the other workers in a rotating scan, spin for a short while, and finally
//! park on a condition variable.
//!
//! Graph tasks follow the dependency-counter scheme: after a task's callable
//! returns, each successor's pending count is decremented. The first successor
//! that becomes ready runs inline on the same worker; any others are pushed to
//! that worker's deque.

use std::any::Any;
use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use crossbeam_utils::CachePadded;
use thiserror::Error;

use crate::deque::{Steal, Stealer, WorkStealingDeque};
use crate::task_graph::{GraphCore, GraphError, TaskGraph};

/// Scan rounds an idle worker makes before parking.
const SPIN_ROUNDS: u32 = 64;
/// Rounds after which spinning yields the CPU instead of busy-waiting.
const YIELD_AFTER: u32 = 8;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("thread pool is shut down")]
    ShutDown,
    #[error("failed to spawn worker thread")]
    Spawn(#[source] io::Error),
    #[error("a task panicked: {0}")]
    TaskPanicked(String),
    #[error("cannot block on the pool from one of its own workers")]
    WaitFromWorker,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

enum Job {
    Closure(Box<dyn FnOnce() + Send + 'static>),
    Node { graph: Arc<GraphCore>, index: usize },
}

#[derive(Default)]
struct WorkerCounters {
    executed: AtomicU64,
    local_pushes: AtomicU64,
    steals: AtomicU64,
    steal_retries: AtomicU64,
    inline_continuations: AtomicU64,
    submitted_continuations: AtomicU64,
    parks: AtomicU64,
}

/// Snapshot of the pool's instrumentation counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolStats {
    /// Closures and graph tasks accepted by the pool.
    pub submitted: u64,
    /// Tasks completed, indexed by worker.
    pub executed_per_worker: Vec<u64>,
    /// Jobs a worker pushed onto its own deque.
    pub local_pushes: u64,
    /// Jobs placed on the shared injector.
    pub injector_pushes: u64,
    pub steals: u64,
    pub steal_retries: u64,
    /// Ready successors executed on the worker that released them.
    pub inline_continuations: u64,
    /// Ready successors handed back to the pool.
    pub submitted_continuations: u64,
    pub parks: u64,
}

impl PoolStats {
    pub fn executed(&self) -> u64 {
        self.executed_per_worker.iter().sum()
    }

    /// Number of workers that completed at least one task.
    pub fn active_workers(&self) -> usize {
        self.executed_per_worker.iter().filter(|&&n| n > 0).count()
    }
}

struct Shared {
    stealers: Vec<Stealer<Job>>,
    injector: Mutex<VecDeque<Box<Job>>>,
    injector_len: AtomicUsize,
    pending: CachePadded<AtomicUsize>,
    shutdown: AtomicBool,

    sleep_lock: Mutex<()>,
    wake: Condvar,
    sleepers: AtomicUsize,
    epoch: CachePadded<AtomicUsize>,

    idle_lock: Mutex<()>,
    idle: Condvar,

    first_panic: Mutex<Option<String>>,

    counters: Vec<CachePadded<WorkerCounters>>,
    submitted: AtomicU64,
    injector_pushes: AtomicU64,
}

struct WorkerLocal {
    pool: *const Shared,
    index: usize,
    deque: WorkStealingDeque<Job>,
}

thread_local! {
    static WORKER: RefCell<Option<WorkerLocal>> = const { RefCell::new(None) };
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // User code never runs under these locks, so poisoning cannot leave
    // them inconsistent.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_owned()
    }
}

struct XorShift(u64);

impl XorShift {
    fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }
}

impl Shared {
    /// Index of the current thread if it is one of this pool's workers.
    fn current_worker(&self) -> Option<usize> {
        WORKER
            .try_with(|w| match &*w.borrow() {
                Some(local) if std::ptr::eq(local.pool, self) => Some(local.index),
                _ => None,
            })
            .ok()
            .flatten()
    }

    fn push_job(&self, job: Box<Job>) {
        let mut job = Some(job);
        let _ = WORKER.try_with(|w| {
            if let Some(local) = &*w.borrow() {
                if std::ptr::eq(local.pool, self) {
                    local.deque.push(job.take().unwrap());
                    self.counters[local.index]
                        .local_pushes
                        .fetch_add(1, Ordering::Relaxed);
                }
            }
        });
        if let Some(job) = job {
            let mut q = lock(&self.injector);
            q.push_back(job);
            self.injector_len.store(q.len(), Ordering::Release);
            drop(q);
            self.injector_pushes.fetch_add(1, Ordering::Relaxed);
        }
        self.notify_one();
    }

    fn notify_one(&self) {
        self.epoch.fetch_add(1, Ordering::SeqCst);
        if self.sleepers.load(Ordering::SeqCst) > 0 {
            let _g = lock(&self.sleep_lock);
            self.wake.notify_one();
        }
    }

    fn notify_all(&self) {
        self.epoch.fetch_add(1, Ordering::SeqCst);
        let _g = lock(&self.sleep_lock);
        self.wake.notify_all();
    }

    /// Reserves `count` pending slots, failing once shutdown has begun.
    fn reserve(&self, count: usize) -> Result<(), PoolError> {
        self.pending.fetch_add(count, Ordering::SeqCst);
        if self.shutdown.load(Ordering::SeqCst) {
            self.complete(count);
            return Err(PoolError::ShutDown);
        }
        Ok(())
    }

    fn complete(&self, count: usize) {
        if self.pending.fetch_sub(count, Ordering::SeqCst) == count {
            {
                let _g = lock(&self.idle_lock);
                self.idle.notify_all();
            }
            if self.shutdown.load(Ordering::SeqCst) {
                self.notify_all();
            }
        }
    }

    fn submit<F>(&self, work: F) -> Result<(), PoolError>
    where
        F: FnOnce() + Send + 'static,
    {
        self.reserve(1)?;
        self.submitted.fetch_add(1, Ordering::Relaxed);
        self.push_job(Box::new(Job::Closure(Box::new(work))));
        Ok(())
    }

    fn submit_graph(&self, graph: &TaskGraph) -> Result<(), PoolError> {
        graph.validate()?;
        if graph.is_empty() {
            return Ok(());
        }
        let core = graph.core();
        let count = core.len();
        self.reserve(count)?;
        if let Err(e) = core.begin_run() {
            self.complete(count);
            return Err(e.into());
        }
        self.submitted.fetch_add(count as u64, Ordering::Relaxed);
        for root in core.roots() {
            self.push_job(Box::new(Job::Node {
                graph: Arc::clone(core),
                index: root,
            }));
        }
        Ok(())
    }

    fn wait_idle(&self) {
        let mut g = lock(&self.idle_lock);
        while self.pending.load(Ordering::SeqCst) != 0 {
            g = self.idle.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn wait(&self) -> Result<(), PoolError> {
        if self.current_worker().is_some() {
            return Err(PoolError::WaitFromWorker);
        }
        self.wait_idle();
        match lock(&self.first_panic).take() {
            Some(msg) => Err(PoolError::TaskPanicked(msg)),
            None => Ok(()),
        }
    }

    fn record_panic(&self, payload: Box<dyn Any + Send>) {
        let mut slot = lock(&self.first_panic);
        if slot.is_none() {
            *slot = Some(panic_message(&*payload));
        }
    }

    fn begin_shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.notify_all();
    }

    fn should_exit(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst) && self.pending.load(Ordering::SeqCst) == 0
    }

    fn stats(&self) -> PoolStats {
        let mut stats = PoolStats {
            submitted: self.submitted.load(Ordering::Relaxed),
            injector_pushes: self.injector_pushes.load(Ordering::Relaxed),
            ..PoolStats::default()
        };
        for c in &self.counters {
            stats
                .executed_per_worker
                .push(c.executed.load(Ordering::Relaxed));
            stats.local_pushes += c.local_pushes.load(Ordering::Relaxed);
            stats.steals += c.steals.load(Ordering::Relaxed);
            stats.steal_retries += c.steal_retries.load(Ordering::Relaxed);
            stats.inline_continuations += c.inline_continuations.load(Ordering::Relaxed);
            stats.submitted_continuations += c.submitted_continuations.load(Ordering::Relaxed);
            stats.parks += c.parks.load(Ordering::Relaxed);
        }
        stats
    }

    fn queued_jobs(&self) -> usize {
        self.injector_len.load(Ordering::Acquire)
            + self.stealers.iter().map(Stealer::len).sum::<usize>()
    }
}

struct Worker<'a> {
    shared: &'a Shared,
    index: usize,
    rng: XorShift,
}

impl Worker<'_> {
    fn counters(&self) -> &WorkerCounters {
        &self.shared.counters[self.index]
    }

    fn pop_local(&self) -> Option<Box<Job>> {
        WORKER.with(|w| w.borrow().as_ref().and_then(|local| local.deque.pop()))
    }

    fn pop_injector(&self) -> Option<Box<Job>> {
        if self.shared.injector_len.load(Ordering::Acquire) == 0 {
            return None;
        }
        let mut q = lock(&self.shared.injector);
        let job = q.pop_front();
        self.shared.injector_len.store(q.len(), Ordering::Release);
        job
    }

    fn steal(&mut self) -> Option<Box<Job>> {
        let n = self.shared.stealers.len();
        let start = (self.rng.next() % n as u64) as usize;
        for k in 0..n {
            let victim = (start + k) % n;
            if victim == self.index {
                continue;
            }
            loop {
                match self.shared.stealers[victim].steal() {
                    Steal::Success(job) => {
                        self.counters().steals.fetch_add(1, Ordering::Relaxed);
                        return Some(job);
                    }
                    Steal::Empty => break,
                    Steal::Retry => {
                        self.counters()
                            .steal_retries
                            .fetch_add(1, Ordering::Relaxed);
                        std::hint::spin_loop();
                    }
                }
            }
        }
        None
    }

    fn find_job(&mut self) -> Option<Box<Job>> {
        self.pop_local()
            .or_else(|| self.pop_injector())
            .or_else(|| self.steal())
    }

    fn run(mut self) {
        'outer: loop {
            if let Some(job) = self.find_job() {
                self.execute(job);
                continue;
            }
            for round in 0..SPIN_ROUNDS {
                if self.shared.should_exit() {
                    break 'outer;
                }
                if round < YIELD_AFTER {
                    for _ in 0..(1u32 << round) {
                        std::hint::spin_loop();
                    }
                } else {
                    thread::yield_now();
                }
                if let Some(job) = self.find_job() {
                    self.execute(job);
                    continue 'outer;
                }
            }
            if !self.park() {
                break;
            }
        }
    }

    /// Sleeps until woken. Returns false when the worker should exit.
    fn park(&mut self) -> bool {
        let shared = self.shared;
        let epoch = shared.epoch.load(Ordering::SeqCst);
        if let Some(job) = self.find_job() {
            self.execute(job);
            return true;
        }
        let guard = lock(&shared.sleep_lock);
        if shared.should_exit() {
            return false;
        }
        shared.sleepers.fetch_add(1, Ordering::SeqCst);
        if shared.epoch.load(Ordering::SeqCst) != epoch {
            shared.sleepers.fetch_sub(1, Ordering::SeqCst);
            return true;
        }
        self.counters().parks.fetch_add(1, Ordering::Relaxed);
        let guard = shared.wake.wait(guard).unwrap_or_else(|e| e.into_inner());
        shared.sleepers.fetch_sub(1, Ordering::SeqCst);
        drop(guard);
        true
    }

    // jobs arrive boxed from the deques and the injector
    #[allow(clippy::boxed_local)]
    fn execute(&self, job: Box<Job>) {
        match *job {
            Job::Closure(work) => {
                if let Err(payload) = panic::catch_unwind(AssertUnwindSafe(work)) {
                    self.shared.record_panic(payload);
                }
                self.counters().executed.fetch_add(1, Ordering::Relaxed);
                self.shared.complete(1);
            }
            Job::Node { graph, index } => self.run_graph_task(graph, index),
        }
    }

    fn run_graph_task(&self, graph: Arc<GraphCore>, mut index: usize) {
        let counters = self.counters();
        loop {
            // SAFETY: this worker took the task out of a queue or released its
            // last predecessor, so it is the task's only executor this run.
            let result = panic::catch_unwind(AssertUnwindSafe(|| unsafe { graph.run_work(index) }));
            if let Err(payload) = result {
                self.shared.record_panic(payload);
            }
            counters.executed.fetch_add(1, Ordering::Relaxed);

            let mut inline = None;
            for &succ in graph.successors(index) {
                if !graph.release(succ) {
                    continue;
                }
                if inline.is_none() {
                    inline = Some(succ);
                    counters
                        .inline_continuations
                        .fetch_add(1, Ordering::Relaxed);
                } else {
                    counters
                        .submitted_continuations
                        .fetch_add(1, Ordering::Relaxed);
                    self.shared.push_job(Box::new(Job::Node {
                        graph: Arc::clone(&graph),
                        index: succ,
                    }));
                }
            }
            graph.finish_one();

            match inline {
                Some(next) => {
                    // `next` is still pending, so this cannot reach zero.
                    self.shared.pending.fetch_sub(1, Ordering::SeqCst);
                    index = next;
                }
                None => {
                    // The graph must be released before the pool can go idle.
                    drop(graph);
                    self.shared.complete(1);
                    return;
                }
            }
        }
    }
}

fn worker_main(shared: Arc<Shared>, index: usize, deque: WorkStealingDeque<Job>) {
    WORKER.with(|w| {
        *w.borrow_mut() = Some(WorkerLocal {
            pool: Arc::as_ptr(&shared),
            index,
            deque,
        })
    });
    Worker {
        shared: &shared,
        index,
        rng: XorShift(0x9E37_79B9_7F4A_7C15 ^ ((index as u64 + 1) * 0x2545_F491_4F6C_DD1D)),
    }
    .run();
    WORKER.with(|w| w.borrow_mut().take());
}

/// Worker count used when a pool is created with zero threads.
pub fn default_thread_count() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// A fixed-size work-stealing thread pool.
///
/// Dropping the pool drains all pending work, then stops and joins the
/// workers.
pub struct ThreadPool {
    shared: Arc<Shared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl ThreadPool {
    /// Starts a pool with `threads` workers; `0` means
    /// [`default_thread_count`].
    pub fn new(threads: usize) -> Result<ThreadPool, PoolError> {
        let threads = if threads == 0 {
            default_thread_count()
        } else {
            threads
        };
        let deques: Vec<WorkStealingDeque<Job>> =
            (0..threads).map(|_| WorkStealingDeque::new()).collect();
        let shared = Arc::new(Shared {
            stealers: deques.iter().map(WorkStealingDeque::stealer).collect(),
            injector: Mutex::new(VecDeque::new()),
            injector_len: AtomicUsize::new(0),
            pending: CachePadded::new(AtomicUsize::new(0)),
            shutdown: AtomicBool::new(false),
            sleep_lock: Mutex::new(()),
            wake: Condvar::new(),
            sleepers: AtomicUsize::new(0),
            epoch: CachePadded::new(AtomicUsize::new(0)),
            idle_lock: Mutex::new(()),
            idle: Condvar::new(),
            first_panic: Mutex::new(None),
            counters: (0..threads).map(|_| CachePadded::default()).collect(),
            submitted: AtomicU64::new(0),
            injector_pushes: AtomicU64::new(0),
        });

        let mut handles = Vec::with_capacity(threads);
        for (index, deque) in deques.into_iter().enumerate() {
            let worker_shared = Arc::clone(&shared);
            let spawned = thread::Builder::new()
                .name(format!("stealpool-{index}"))
                .spawn(move || worker_main(worker_shared, index, deque));
            match spawned {
                Ok(h) => handles.push(h),
                Err(e) => {
                    shared.begin_shutdown();
                    for h in handles {
                        let _ = h.join();
                    }
                    return Err(PoolError::Spawn(e));
                }
            }
        }
        Ok(ThreadPool {
            shared,
            threads: Mutex::new(handles),
        })
    }

    /// Starts a pool sized to the detected hardware concurrency.
    pub fn with_default_threads() -> Result<ThreadPool, PoolError> {
        Self::new(0)
    }

    pub fn thread_count(&self) -> usize {
        self.shared.stealers.len()
    }

    /// Queues `work` for execution on some worker.
    ///
    /// Called from one of this pool's workers, the job goes to that worker's
    /// own deque; otherwise it goes to the shared injector.
    pub fn submit<F>(&self, work: F) -> Result<(), PoolError>
    where
        F: FnOnce() + Send + 'static,
    {
        self.shared.submit(work)
    }

    /// Starts executing `graph`.
    ///
    /// The graph is validated first; a cyclic graph is rejected before any of
    /// its tasks run. A graph that already ran must be
    /// [`reset`](TaskGraph::reset) before it is submitted again.
    pub fn submit_graph(&self, graph: &TaskGraph) -> Result<(), PoolError> {
        self.shared.submit_graph(graph)
    }

    /// Blocks until every submitted task, including tasks submitted while
    /// waiting, has finished.
    ///
    /// If any task panicked since the last `wait`, the first panic message is
    /// returned as [`PoolError::TaskPanicked`] and cleared.
    pub fn wait(&self) -> Result<(), PoolError> {
        self.shared.wait()
    }

    /// Drains pending work, then stops and joins all workers. Idempotent.
    ///
    /// Called from one of the pool's own workers, this only flags the pool
    /// as shut down; the workers exit once their pending work is done.
    pub fn shutdown(&self) {
        if self.shared.current_worker().is_some() {
            self.shared.begin_shutdown();
            return;
        }
        let mut threads = lock(&self.threads);
        if threads.is_empty() {
            return;
        }
        self.shared.wait_idle();
        self.shared.begin_shutdown();
        for h in threads.drain(..) {
            let _ = h.join();
        }
    }

    pub fn is_shut_down(&self) -> bool {
        self.shared.shutdown.load(Ordering::SeqCst)
    }

    /// A cloneable handle for submitting from inside tasks.
    pub fn handle(&self) -> PoolHandle {
        PoolHandle {
            shared: Arc::clone(&self.shared),
        }
    }

    pub fn stats(&self) -> PoolStats {
        self.shared.stats()
    }

    /// Submitted tasks that have not finished yet.
    pub fn pending(&self) -> usize {
        self.shared.pending.load(Ordering::SeqCst)
    }

    /// Jobs sitting in the injector and the worker deques.
    pub fn queued_jobs(&self) -> usize {
        self.shared.queued_jobs()
    }

    /// Index of the current thread among this pool's workers, if any.
    pub fn current_worker_index(&self) -> Option<usize> {
        self.shared.current_worker()
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl fmt::Debug for ThreadPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadPool")
            .field("threads", &self.thread_count())
            .field("pending", &self.pending())
            .finish()
    }
}

/// Submission handle that can be moved into tasks.
#[derive(Clone)]
pub struct PoolHandle {
    shared: Arc<Shared>,
}

impl PoolHandle {
    pub fn submit<F>(&self, work: F) -> Result<(), PoolError>
    where
        F: FnOnce() + Send + 'static,
    {
        self.shared.submit(work)
    }

    pub fn submit_graph(&self, graph: &TaskGraph) -> Result<(), PoolError> {
        self.shared.submit_graph(graph)
    }

    pub fn current_worker_index(&self) -> Option<usize> {
        self.shared.current_worker()
    }
}

impl fmt::Debug for PoolHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad("PoolHandle { .. }")
    }
}

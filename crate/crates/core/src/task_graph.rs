//! Task wrappers and dependency wiring.
//!
//! Each task stores its callable, the indices of its successors and an atomic
//! count of predecessors that have not completed yet. A [`TaskGraph`] owns its
//! tasks; [`TaskId`] handles stay valid as more tasks are added.
//!
//! Graph construction is single-threaded. While a graph is executing on a
//! [`ThreadPool`](crate::ThreadPool), the pool holds a shared reference to its
//! storage, and every mutating method reports [`GraphError::Busy`] (or panics,
//! for [`TaskGraph::add_task`]) until the run has drained.

use std::cell::UnsafeCell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Stable handle to a task within one [`TaskGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    graph: u64,
    index: usize,
}

impl TaskId {
    /// Position of the task in insertion order.
    pub fn index(self) -> usize {
        self.index
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task#{}", self.index)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("{0} cannot depend on itself")]
    SelfDependency(TaskId),
    #[error("{0} belongs to a different graph")]
    ForeignTask(TaskId),
    #[error("graph contains a cycle through {}", display_ids(.tasks))]
    Cycle { tasks: Vec<TaskId> },
    #[error("graph is executing")]
    Busy,
    #[error("graph has already run; reset it before submitting again")]
    NotReset,
}

fn display_ids(ids: &[TaskId]) -> String {
    ids.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

pub(crate) type Work = Box<dyn FnMut() + Send + 'static>;

pub(crate) struct TaskNode {
    work: UnsafeCell<Work>,
    successors: Vec<usize>,
    pending: AtomicUsize,
    initial: usize,
}

pub(crate) struct GraphCore {
    id: u64,
    tasks: Vec<TaskNode>,
    running: AtomicBool,
    spent: AtomicBool,
    outstanding: AtomicUsize,
}

// `work` is only reached through `run_work`, whose contract gives the caller
// exclusive access; everything else shared is atomic or frozen.
unsafe impl Sync for GraphCore {}

impl GraphCore {
    pub(crate) fn len(&self) -> usize {
        self.tasks.len()
    }

    pub(crate) fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.initial == 0)
            .map(|(i, _)| i)
    }

    pub(crate) fn successors(&self, index: usize) -> &[usize] {
        &self.tasks[index].successors
    }

    /// Claims the graph for one execution.
    pub(crate) fn begin_run(&self) -> Result<(), GraphError> {
        if self
            .running
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(GraphError::Busy);
        }
        if self.spent.load(Ordering::Acquire) {
            self.running.store(false, Ordering::Release);
            return Err(GraphError::NotReset);
        }
        self.spent.store(true, Ordering::Release);
        self.outstanding.store(self.tasks.len(), Ordering::Release);
        Ok(())
    }

    /// Runs the task's callable.
    ///
    /// # Safety
    ///
    /// The caller must be the unique executor of `index` for the current run,
    /// which holds once the task's pending count has been observed at zero.
    pub(crate) unsafe fn run_work(&self, index: usize) {
        let work = &mut *self.tasks[index].work.get();
        work()
    }

    /// Marks one predecessor of `index` complete; true when it became ready.
    pub(crate) fn release(&self, index: usize) -> bool {
        let prev = self.tasks[index].pending.fetch_sub(1, Ordering::AcqRel);
        debug_assert!(prev > 0, "pending predecessor count underflow");
        prev == 1
    }

    /// Records one finished task; true for the last task of the run.
    pub(crate) fn finish_one(&self) -> bool {
        if self.outstanding.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.running.store(false, Ordering::Release);
            true
        } else {
            false
        }
    }
}

/// An owning collection of tasks plus their dependency edges.
pub struct TaskGraph {
    core: Arc<GraphCore>,
}

impl Default for TaskGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskGraph {
    pub fn new() -> Self {
        TaskGraph {
            core: Arc::new(GraphCore {
                id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
                tasks: Vec::new(),
                running: AtomicBool::new(false),
                spent: AtomicBool::new(false),
                outstanding: AtomicUsize::new(0),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.core.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core.tasks.is_empty()
    }

    /// Whether a submitted run of this graph is still in flight.
    pub fn is_running(&self) -> bool {
        self.core.running.load(Ordering::Acquire)
    }

    /// Adds a task with no predecessors and no successors.
    ///
    /// # Panics
    ///
    /// If the graph is currently executing.
    pub fn add_task<F>(&mut self, work: F) -> TaskId
    where
        F: FnMut() + Send + 'static,
    {
        let core = self
            .core_mut()
            .expect("cannot add tasks while the graph is executing");
        let index = core.tasks.len();
        core.tasks.push(TaskNode {
            work: UnsafeCell::new(Box::new(work)),
            successors: Vec::new(),
            pending: AtomicUsize::new(0),
            initial: 0,
        });
        TaskId {
            graph: core.id,
            index,
        }
    }

    /// Makes `task` run only after every task in `predecessors` completed.
    ///
    /// Duplicate edges are kept and counted. On error nothing is modified.
    pub fn succeed<I>(&mut self, task: TaskId, predecessors: I) -> Result<(), GraphError>
    where
        I: IntoIterator<Item = TaskId>,
    {
        let predecessors: Vec<TaskId> = predecessors.into_iter().collect();
        self.check_member(task)?;
        for &p in &predecessors {
            self.check_member(p)?;
            if p == task {
                return Err(GraphError::SelfDependency(task));
            }
        }
        let core = self.core_mut().ok_or(GraphError::Busy)?;
        for p in &predecessors {
            core.tasks[p.index].successors.push(task.index);
        }
        let node = &mut core.tasks[task.index];
        node.initial += predecessors.len();
        *node.pending.get_mut() += predecessors.len();
        Ok(())
    }

    /// Checks that the edges form a DAG by peeling zero in-degree tasks.
    ///
    /// On failure the error lists the tasks of one cycle, in edge order.
    pub fn validate(&self) -> Result<(), GraphError> {
        let tasks = &self.core.tasks;
        let mut indegree: Vec<usize> = tasks.iter().map(|t| t.initial).collect();
        let mut ready: Vec<usize> = (0..tasks.len()).filter(|&i| indegree[i] == 0).collect();
        let mut peeled = 0;
        while let Some(i) = ready.pop() {
            peeled += 1;
            for &s in &tasks[i].successors {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        if peeled == tasks.len() {
            return Ok(());
        }

        // Every task left over has an unpeeled predecessor, so walking
        // predecessors backwards inside the leftover set must revisit a task.
        let mut preds: Vec<Option<usize>> = vec![None; tasks.len()];
        for (i, t) in tasks.iter().enumerate() {
            if indegree[i] == 0 {
                continue;
            }
            for &s in &t.successors {
                if indegree[s] > 0 {
                    preds[s].get_or_insert(i);
                }
            }
        }
        let start = (0..tasks.len()).find(|&i| indegree[i] > 0).unwrap();
        let mut seen_at = vec![usize::MAX; tasks.len()];
        let mut walk = Vec::new();
        let mut cur = start;
        while seen_at[cur] == usize::MAX {
            seen_at[cur] = walk.len();
            walk.push(cur);
            cur = preds[cur].expect("leftover task without leftover predecessor");
        }
        let mut cycle: Vec<usize> = walk[seen_at[cur]..].to_vec();
        cycle.reverse();
        Err(GraphError::Cycle {
            tasks: cycle.into_iter().map(|i| self.id_of(i)).collect(),
        })
    }

    /// Restores every pending count to its wired in-degree so the graph can be
    /// submitted again. A never-run graph is left unchanged.
    pub fn reset(&mut self) -> Result<(), GraphError> {
        let core = self.core_mut().ok_or(GraphError::Busy)?;
        for t in &mut core.tasks {
            *t.pending.get_mut() = t.initial;
        }
        *core.spent.get_mut() = false;
        Ok(())
    }

    /// Number of predecessor edges wired into `task`.
    pub fn in_degree(&self, task: TaskId) -> Result<usize, GraphError> {
        self.check_member(task)?;
        Ok(self.core.tasks[task.index].initial)
    }

    /// Predecessors of `task` that have not completed in the current run.
    pub fn pending_predecessors(&self, task: TaskId) -> Result<usize, GraphError> {
        self.check_member(task)?;
        Ok(self.core.tasks[task.index].pending.load(Ordering::Acquire))
    }

    pub fn successors(&self, task: TaskId) -> Result<Vec<TaskId>, GraphError> {
        self.check_member(task)?;
        Ok(self.core.tasks[task.index]
            .successors
            .iter()
            .map(|&s| self.id_of(s))
            .collect())
    }

    pub fn edge_count(&self) -> usize {
        self.core.tasks.iter().map(|t| t.successors.len()).sum()
    }

    /// Handles for every task, in insertion order.
    pub fn task_ids(&self) -> impl Iterator<Item = TaskId> + '_ {
        (0..self.len()).map(|i| self.id_of(i))
    }

    pub(crate) fn core(&self) -> &Arc<GraphCore> {
        &self.core
    }

    fn core_mut(&mut self) -> Option<&mut GraphCore> {
        Arc::get_mut(&mut self.core)
    }

    fn id_of(&self, index: usize) -> TaskId {
        TaskId {
            graph: self.core.id,
            index,
        }
    }

    fn check_member(&self, task: TaskId) -> Result<(), GraphError> {
        if task.graph != self.core.id || task.index >= self.core.tasks.len() {
            return Err(GraphError::ForeignTask(task));
        }
        Ok(())
    }
}

impl fmt::Debug for TaskGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskGraph")
            .field("tasks", &self.len())
            .field("edges", &self.edge_count())
            .field("running", &self.is_running())
            .finish()
    }
}

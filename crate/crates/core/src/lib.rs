//! A small work-stealing thread pool that runs independent tasks and
//! dependency task graphs.
//!
//! ```
//! use std::sync::atomic::{AtomicUsize, Ordering};
//! use std::sync::Arc;
//! use stealpool::ThreadPool;
//!
//! let pool = ThreadPool::new(4)?;
//! let hits = Arc::new(AtomicUsize::new(0));
//! for _ in 0..100 {
//!     let hits = Arc::clone(&hits);
//!     pool.submit(move || {
//!         hits.fetch_add(1, Ordering::Relaxed);
//!     })?;
//! }
//! pool.wait()?;
//! assert_eq!(hits.load(Ordering::Relaxed), 100);
//! # Ok::<(), stealpool::PoolError>(())
//! ```
//!
//! The guide in `book/` walks through the deque, task graphs, the executor,
//! benchmarking and the verification harness; its code listings are compiled
//! and run as doctests of this crate.

pub mod bench;
pub mod deque;
pub mod executor;
pub mod task_graph;
pub mod verify;

pub use deque::{Steal, Stealer, WorkStealingDeque};
pub use executor::{default_thread_count, PoolError, PoolHandle, PoolStats, ThreadPool};
pub use task_graph::{GraphError, TaskGraph, TaskId};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/deque.md")]
    mod deque {}
    #[doc = include_str!("../../../book/src/task-graphs.md")]
    mod task_graphs {}
    #[doc = include_str!("../../../book/src/executor.md")]
    mod executor {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}

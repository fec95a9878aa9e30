//! Chase-Lev work-stealing deque.
//!
//! A [`WorkStealingDeque`] is owned by exactly one thread, which pushes and
//! pops at the bottom. Any number of [`Stealer`] handles take elements from
//! the top. The backing store is a power-of-two circular buffer of atomic
//! pointers that doubles when full.
//!
//! Every shared transition is an atomic operation carrying its own ordering.
//! There are no standalone fences, so the deque is fully visible to data-race
//! detectors:
//!
//! - `push` publishes the slot write with a `Release` store of `bottom`.
//! - `pop` reserves with a `SeqCst` `fetch_sub` on `bottom`, then reads `top`
//!   with `SeqCst`; the single-total-order on those two locations is what
//!   rules out the owner and a thief both taking the last element.
//! - `steal` reads `top` then `bottom` with `SeqCst` and claims with a `SeqCst`
//!   CAS on `top`.
//! - Every store to `bottom` is at least `Release`, so any value a thief
//!   observes carries the slot and buffer writes that preceded it.
//!
//! Slots hold owned pointers (`Box<T>`), so growth copies pointers only.
//! Retired buffers stay allocated until the deque itself is dropped, because a
//! slow thief may still be reading from one.

use std::cell::{Cell, UnsafeCell};
use std::fmt;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicIsize, AtomicPtr, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

/// Capacity of a freshly created deque.
pub const INITIAL_CAPACITY: usize = 64;

/// Outcome of a [`Stealer::steal`] attempt.
#[derive(Debug, PartialEq, Eq)]
pub enum Steal<T> {
    /// The oldest element was removed and handed to the caller.
    Success(T),
    /// The deque was observed empty.
    Empty,
    /// Lost a race with the owner or another thief; trying again may succeed.
    Retry,
}

impl<T> Steal<T> {
    pub fn success(self) -> Option<T> {
        match self {
            Steal::Success(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_retry(&self) -> bool {
        matches!(self, Steal::Retry)
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Steal::Empty)
    }
}

struct Buffer<T> {
    slots: Box<[AtomicPtr<T>]>,
    mask: usize,
}

impl<T> Buffer<T> {
    fn alloc(capacity: usize) -> *mut Buffer<T> {
        debug_assert!(capacity.is_power_of_two() && capacity >= 2);
        let slots = (0..capacity)
            .map(|_| AtomicPtr::new(ptr::null_mut()))
            .collect::<Vec<_>>()
            .into_boxed_slice();
        Box::into_raw(Box::new(Buffer {
            slots,
            mask: capacity - 1,
        }))
    }

    fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, index: isize) -> &AtomicPtr<T> {
        // Sequence indices are never negative when a slot is addressed.
        &self.slots[index as usize & self.mask]
    }

    fn read(&self, index: isize) -> *mut T {
        self.slot(index).load(Ordering::Relaxed)
    }

    fn write(&self, index: isize, item: *mut T) {
        self.slot(index).store(item, Ordering::Relaxed)
    }
}

struct Inner<T> {
    top: CachePadded<AtomicIsize>,
    bottom: CachePadded<AtomicIsize>,
    buffer: CachePadded<AtomicPtr<Buffer<T>>>,
    // Owner-only.
    retired: UnsafeCell<Vec<*mut Buffer<T>>>,
}

// Elements are moved between threads by pointer; `retired` is touched only by
// the owner (push/grow) and by `Drop`, which has exclusive access.
unsafe impl<T: Send> Send for Inner<T> {}
unsafe impl<T: Send> Sync for Inner<T> {}

impl<T> Drop for Inner<T> {
    fn drop(&mut self) {
        let top = *self.top.get_mut();
        let bottom = *self.bottom.get_mut();
        let buffer = *self.buffer.get_mut();
        unsafe {
            for index in top..bottom {
                drop(Box::from_raw((*buffer).read(index)));
            }
            drop(Box::from_raw(buffer));
            for old in self.retired.get_mut().drain(..) {
                drop(Box::from_raw(old));
            }
        }
    }
}

/// Owner handle: push and pop at the bottom.
///
/// The handle is `Send` but not `Sync`, so push and pop can never run
/// concurrently with each other. It may be created on one thread and moved to
/// its owning thread before first use.
pub struct WorkStealingDeque<T> {
    inner: Arc<Inner<T>>,
    _not_sync: PhantomData<Cell<()>>,
}

/// Thief handle: steal from the top. Cheap to clone, usable from any thread.
pub struct Stealer<T> {
    inner: Arc<Inner<T>>,
}

impl<T: Send> Default for WorkStealingDeque<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Send> WorkStealingDeque<T> {
    pub fn new() -> Self {
        Self::with_capacity(INITIAL_CAPACITY)
    }

    /// Creates a deque whose buffer initially holds `capacity` elements,
    /// rounded up to a power of two and at least 2.
    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(2).next_power_of_two();
        WorkStealingDeque {
            inner: Arc::new(Inner {
                top: CachePadded::new(AtomicIsize::new(0)),
                bottom: CachePadded::new(AtomicIsize::new(0)),
                buffer: CachePadded::new(AtomicPtr::new(Buffer::alloc(capacity))),
                retired: UnsafeCell::new(Vec::new()),
            }),
            _not_sync: PhantomData,
        }
    }

    pub fn stealer(&self) -> Stealer<T> {
        Stealer {
            inner: Arc::clone(&self.inner),
        }
    }

    /// Pushes `item` as the newest element, growing the buffer if it is full.
    pub fn push(&self, item: Box<T>) {
        let inner = &*self.inner;
        let bottom = inner.bottom.load(Ordering::Relaxed);
        let top = inner.top.load(Ordering::Acquire);
        let mut buffer = inner.buffer.load(Ordering::Relaxed);

        // SAFETY: only the owner replaces `buffer`, and we are the owner.
        if bottom - top >= unsafe { (*buffer).capacity() } as isize {
            buffer = self.grow(top, bottom, buffer);
        }
        unsafe { (*buffer).write(bottom, Box::into_raw(item)) };
        inner.bottom.store(bottom + 1, Ordering::Release);
    }

    /// Removes and returns the newest element.
    pub fn pop(&self) -> Option<Box<T>> {
        let inner = &*self.inner;
        let bottom = inner.bottom.fetch_sub(1, Ordering::SeqCst) - 1;
        let top = inner.top.load(Ordering::SeqCst);

        if top < bottom {
            // More than one element left: no thief can reach this slot.
            let buffer = inner.buffer.load(Ordering::Relaxed);
            return Some(unsafe { Box::from_raw((*buffer).read(bottom)) });
        }

        let mut item = None;
        if top == bottom {
            // Last element: race the thieves for it through `top`.
            let buffer = inner.buffer.load(Ordering::Relaxed);
            let raw = unsafe { (*buffer).read(bottom) };
            if inner
                .top
                .compare_exchange(top, top + 1, Ordering::SeqCst, Ordering::Relaxed)
                .is_ok()
            {
                item = Some(unsafe { Box::from_raw(raw) });
            }
            inner.bottom.store(top + 1, Ordering::Release);
        } else {
            // Was already empty; undo the reservation.
            inner.bottom.store(top, Ordering::Release);
        }
        item
    }

    /// Number of elements as seen by the owner.
    pub fn len(&self) -> usize {
        let bottom = self.inner.bottom.load(Ordering::Relaxed);
        let top = self.inner.top.load(Ordering::Acquire);
        (bottom - top).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        unsafe { (*self.inner.buffer.load(Ordering::Relaxed)).capacity() }
    }

    fn grow(&self, top: isize, bottom: isize, old: *mut Buffer<T>) -> *mut Buffer<T> {
        let inner = &*self.inner;
        let old_ref = unsafe { &*old };
        let new = Buffer::alloc(old_ref.capacity() * 2);
        let new_ref = unsafe { &*new };
        for index in top..bottom {
            new_ref.write(index, old_ref.read(index));
        }
        inner.buffer.store(new, Ordering::Release);
        // SAFETY: owner-only access.
        unsafe { (*inner.retired.get()).push(old) };
        new
    }
}

impl<T: Send> Stealer<T> {
    /// Attempts to take the oldest element. Does not loop on contention.
    pub fn steal(&self) -> Steal<Box<T>> {
        let inner = &*self.inner;
        let top = inner.top.load(Ordering::SeqCst);
        let bottom = inner.bottom.load(Ordering::SeqCst);
        if top >= bottom {
            return Steal::Empty;
        }

        let buffer = inner.buffer.load(Ordering::Acquire);
        let raw = unsafe { (*buffer).read(top) };
        if inner
            .top
            .compare_exchange(top, top + 1, Ordering::SeqCst, Ordering::Relaxed)
            .is_err()
        {
            return Steal::Retry;
        }
        Steal::Success(unsafe { Box::from_raw(raw) })
    }

    /// Approximate number of elements; exact only when the deque is quiescent.
    pub fn len(&self) -> usize {
        let top = self.inner.top.load(Ordering::SeqCst);
        let bottom = self.inner.bottom.load(Ordering::SeqCst);
        (bottom - top).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T> Clone for Stealer<T> {
    fn clone(&self) -> Self {
        Stealer {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> fmt::Debug for WorkStealingDeque<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkStealingDeque")
            .field("top", &self.inner.top.load(Ordering::Relaxed))
            .field("bottom", &self.inner.bottom.load(Ordering::Relaxed))
            .finish()
    }
}

impl<T> fmt::Debug for Stealer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad("Stealer { .. }")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain_owner(deque: &WorkStealingDeque<u32>) -> Vec<u32> {
        std::iter::from_fn(|| deque.pop().map(|b| *b)).collect()
    }

    #[test]
    fn push_one_has_size_one() {
        let deque = WorkStealingDeque::new();
        deque.push(Box::new(7u32));
        assert_eq!(deque.len(), 1);
    }

    #[test]
    fn owner_pops_lifo() {
        let deque = WorkStealingDeque::new();
        for v in [1u32, 2, 3] {
            deque.push(Box::new(v));
        }
        assert_eq!(drain_owner(&deque), vec![3, 2, 1]);
    }

    #[test]
    fn pop_empty_is_none_and_size_stays_zero() {
        let deque = WorkStealingDeque::<u32>::new();
        assert!(deque.pop().is_none());
        assert!(deque.pop().is_none());
        assert_eq!(deque.len(), 0);
        deque.push(Box::new(9));
        assert_eq!(deque.pop().map(|b| *b), Some(9));
        assert!(deque.pop().is_none());
    }

    #[test]
    fn steal_empty_is_empty() {
        let deque = WorkStealingDeque::<u32>::new();
        assert!(deque.stealer().steal().is_empty());
    }

    #[test]
    fn thieves_take_oldest_first() {
        let deque = WorkStealingDeque::new();
        let stealer = deque.stealer();
        for v in [1u32, 2, 3] {
            deque.push(Box::new(v));
        }
        let got: Vec<u32> = (0..3)
            .map(|_| *stealer.steal().success().unwrap())
            .collect();
        assert_eq!(got, vec![1, 2, 3]);
        assert!(stealer.steal().is_empty());
    }

    #[test]
    fn steal_then_pop_split_two_elements() {
        let deque = WorkStealingDeque::new();
        deque.push(Box::new(1u32));
        deque.push(Box::new(2u32));
        assert_eq!(deque.stealer().steal().success().map(|b| *b), Some(1));
        assert_eq!(deque.pop().map(|b| *b), Some(2));
        assert!(deque.pop().is_none());
    }

    #[test]
    fn forced_growth_from_two() {
        let deque = WorkStealingDeque::with_capacity(2);
        deque.push(Box::new(1u32));
        deque.push(Box::new(2u32));
        assert_eq!(deque.capacity(), 2);
        deque.push(Box::new(3u32));
        assert_eq!(deque.capacity(), 4);
        assert_eq!(drain_owner(&deque), vec![3, 2, 1]);
    }

    #[test]
    fn capacity_rounds_to_power_of_two() {
        assert_eq!(WorkStealingDeque::<u8>::with_capacity(0).capacity(), 2);
        assert_eq!(WorkStealingDeque::<u8>::with_capacity(3).capacity(), 4);
        assert_eq!(WorkStealingDeque::<u8>::new().capacity(), INITIAL_CAPACITY);
    }

    #[test]
    fn growth_after_steals_keeps_sequence_indices() {
        // top has advanced, so the live window wraps around the old buffer.
        let deque = WorkStealingDeque::with_capacity(4);
        let stealer = deque.stealer();
        for v in 0..4u32 {
            deque.push(Box::new(v));
        }
        assert_eq!(*stealer.steal().success().unwrap(), 0);
        assert_eq!(*stealer.steal().success().unwrap(), 1);
        for v in 4..10u32 {
            deque.push(Box::new(v));
        }
        assert_eq!(deque.capacity(), 8);
        assert_eq!(*stealer.steal().success().unwrap(), 2);
        assert_eq!(drain_owner(&deque), vec![9, 8, 7, 6, 5, 4, 3]);
    }

    #[test]
    fn drop_frees_remaining_elements() {
        let marker = Arc::new(());
        let deque = WorkStealingDeque::with_capacity(2);
        for _ in 0..10 {
            deque.push(Box::new(Arc::clone(&marker)));
        }
        let stealer = deque.stealer();
        drop(stealer.steal());
        drop(deque);
        assert_eq!(Arc::strong_count(&marker), 1 + 9);
        drop(stealer);
        assert_eq!(Arc::strong_count(&marker), 1);
    }
}

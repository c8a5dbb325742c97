//! Fan-out over independent work items.

use alloc::boxed::Box;
use alloc::vec::Vec;

/// Runs `f` for every index in `0..n` and returns the results in index order.
///
/// Implementations may run items concurrently but must preserve order so
/// that reductions over the output are deterministic.
pub trait Executor: Sync {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

/// Runs every item on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

impl<E: Executor + ?Sized> Executor for Box<E> {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (**self).map_indexed(n, f)
    }
}

//! Data-parallel map with a serial fallback. Output order always follows the
//! input order, so downstream reductions are deterministic regardless of the
//! worker count.

use crate::types::Execution;

pub(crate) fn map_range<T, F>(n: usize, execution: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub(crate) fn map_slice<S, T, F>(items: &[S], execution: Execution, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_range(items.len(), execution, |i| f(&items[i]))
}

/// True when this build can actually run work in parallel.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

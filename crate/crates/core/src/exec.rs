//! Data-parallel helpers.
//!
//! Every parallel map here collects results in input order, and every
//! reduction downstream folds them in that order, so the parallel and
//! sequential paths produce bit-identical numbers. Without the `parallel`
//! feature, [`Execution::Parallel`] silently runs sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// `Parallel` when more than one worker is requested.
    pub fn for_workers(workers: usize) -> Self {
        if workers > 1 {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `items`, returning results in input order.
pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map_ordered`] but consumes the items.
pub fn map_ordered_owned<T, R, F>(items: Vec<T>, exec: Execution, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.into_par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = exec;
    items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Number of threads a parallel map would use under `exec`.
pub fn workers(exec: Execution) -> usize {
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return rayon::current_num_threads();
    }
    let _ = exec;
    1
}

/// Runs `f` on a dedicated pool with `workers` threads. With one worker (or
/// without the `parallel` feature) `f` runs on the calling thread.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results_match_between_modes() {
        let items: Vec<u64> = (0..257).collect();
        let seq = map_ordered(&items, Execution::Sequential, |i, v| (i as u64) * v + 1);
        let par = map_ordered(&items, Execution::Parallel, |i, v| (i as u64) * v + 1);
        assert_eq!(seq, par);
    }

    #[test]
    fn workers_pool_runs_closure() {
        assert_eq!(with_workers(2, || 41 + 1), 42);
        assert_eq!(with_workers(1, || 7), 7);
    }
}

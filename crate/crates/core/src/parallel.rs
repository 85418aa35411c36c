//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs on the calling thread. Results always come
//! back in input order, so reductions over them are bitwise reproducible
//! regardless of the execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    /// Uses the rayon pool when built with the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build actually runs `Parallel` work concurrently.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Order-preserving map over `0..n`.
pub fn map_indices<R, F>(n: usize, exec: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Order-preserving map over a slice.
pub fn map_slice<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serial_and_parallel_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(
            map_indices(1000, Execution::Serial, f),
            map_indices(1000, Execution::Parallel, f)
        );
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(
            map_slice(&items, Execution::Serial, |v| v * 3),
            map_slice(&items, Execution::Parallel, |v| v * 3)
        );
    }
}

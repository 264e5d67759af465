//! Optional data parallelism.
//!
//! Every parallel map in the crate goes through [`par_map`], which preserves
//! input order so that reductions over its output are bit-identical no matter
//! how many worker threads ran. Without the `parallel` feature every mode
//! degrades to a plain sequential iterator.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL_OVERRIDE: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    /// Mode picked up by library code that does not take an explicit mode.
    pub fn current() -> Self {
        if cfg!(feature = "parallel") && !SEQUENTIAL_OVERRIDE.load(Ordering::Relaxed) {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Force sequential execution process-wide (used by benches and `--threads 1`).
pub fn force_sequential(on: bool) {
    SEQUENTIAL_OVERRIDE.store(on, Ordering::Relaxed);
}

pub fn par_map<I, R, F>(mode: ExecMode, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Order-preserving parallel map over `0..n`.
pub fn par_map_range<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = par_map(ExecMode::Sequential, &xs, |i, x| x * 3 + i as u64);
        let b = par_map(ExecMode::Parallel, &xs, |i, x| x * 3 + i as u64);
        assert_eq!(a, b);
        assert_eq!(par_map_range(ExecMode::Parallel, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}

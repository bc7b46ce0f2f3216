//! Index-ordered fan-out over independent jobs.
//!
//! Results are always returned in index order, so reductions over them are
//! deterministic regardless of scheduling. With the `parallel` feature off,
//! [`Execution::Parallel`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run jobs concurrently.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`Execution::map`], failing with the lowest-index error.
    pub fn try_map<T, F>(self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

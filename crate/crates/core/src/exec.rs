//! Run-level parallelism.
//!
//! A single forward/backward pass is always single-threaded. What runs in
//! parallel are independent units of work: LOSO folds, seed sweeps, token
//! ablation runs, and per-sample file I/O. Results always come back in input
//! order so downstream aggregation is independent of scheduling.

/// How independent jobs are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work stealing on the current pool. Falls back to sequential
    /// when the crate is built without the `parallel` feature.
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<I, O, F>(mode: ExecMode, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}

/// Like [`map`] for fallible jobs; returns the first error in input order.
pub fn try_map<I, O, E, F>(mode: ExecMode, items: Vec<I>, f: F) -> Result<Vec<O>, E>
where
    I: Send,
    O: Send,
    E: Send,
    F: Fn(I) -> Result<O, E> + Sync + Send,
{
    map(mode, items, f).into_iter().collect()
}

//! Batch execution of independent simulation runs.
//!
//! Runs never share mutable state, so they parallelize trivially. With the
//! `parallel` feature (default) `map_runs` fans out over a rayon pool;
//! without it the same call degrades to the sequential loop. Results come
//! back in input order either way, so downstream aggregation is oblivious to
//! the execution mode.

use crate::error::Result;

/// Map `job` over `inputs` sequentially. Always available; the reference
/// behavior `map_runs` must reproduce.
pub fn map_runs_sequential<I, O, F>(inputs: Vec<I>, job: F) -> Result<Vec<O>>
where
    F: Fn(I) -> Result<O>,
{
    inputs.into_iter().map(job).collect()
}

/// Map `job` over `inputs`, in parallel when the `parallel` feature is
/// enabled. Output order matches input order; the first error wins.
#[cfg(feature = "parallel")]
pub fn map_runs<I, O, F>(inputs: Vec<I>, job: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    use rayon::prelude::*;
    inputs.into_par_iter().map(job).collect()
}

/// Sequential stand-in with the identical signature, used when the `parallel`
/// feature is off.
#[cfg(not(feature = "parallel"))]
pub fn map_runs<I, O, F>(inputs: Vec<I>, job: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    map_runs_sequential(inputs, job)
}

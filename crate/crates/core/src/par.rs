//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it, or with [`Parallelism::Sequential`], everything runs on the
//! calling thread. Results are returned in input order and never depend on
//! the schedule, so parallel and sequential runs are bit-identical.

use crate::error::Result;
use crate::nn::loss::argmax_rows;
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// A pool of this many workers; 0 means one per available core.
    Threads(usize),
    #[default]
    Auto,
}

impl Parallelism {
    pub fn from_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(1) => Parallelism::Sequential,
            Some(n) => Parallelism::Threads(n),
            None => Parallelism::Auto,
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(par: Parallelism, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match par {
            Parallelism::Sequential => {}
            Parallelism::Auto => return items.into_par_iter().map(f).collect(),
            Parallelism::Threads(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => return pool.install(|| items.into_par_iter().map(f).collect()),
                Err(e) => log::warn!("thread pool unavailable ({e}); running sequentially"),
            },
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = par;
    items.into_iter().map(f).collect()
}

/// Samples per evaluation chunk, independent of the worker count.
pub const EVAL_CHUNK: usize = 500;

/// Misclassified samples of `data` under eval-mode `net`.
pub fn count_errors(par: Parallelism, net: &Network<f32>, data: &crate::data::Dataset) -> Result<usize> {
    let starts: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let per_chunk = map(par, starts, |start| -> Result<usize> {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, labels) = data.gather(&idx);
        let logits = net.predict(&x)?;
        Ok(argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count())
    });
    per_chunk.into_iter().sum()
}

/// Fraction of `data` misclassified.
pub fn error_rate(par: Parallelism, net: &Network<f32>, data: &crate::data::Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(count_errors(par, net, data)? as f64 / data.len() as f64)
}

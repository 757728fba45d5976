//! Minimal CPU training engine: convolution kernels, Adam, and the
//! per-sample gradient reduction that the trainers run over each batch.

mod adam;
pub(crate) mod ops;

pub use adam::Adam;

use crate::error::Result;

/// Samples per reduction chunk. Fixed so that the summation order, and with
/// it every bit of the result, does not depend on the thread count.
pub const REDUCTION_CHUNK: usize = 4;

/// How per-sample work inside a batch is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon work-stealing over reduction chunks. Falls back to sequential
    /// when the crate is built without the `parallel` feature.
    Parallel,
}

impl Execution {
    /// Parallel when the feature is compiled in, else sequential.
    pub fn preferred() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

/// Sums per-sample gradients over a batch.
///
/// `per_sample(i, grad)` must add the gradient of sample `i` into `grad`
/// (length `param_len`) and return that sample's loss value. Samples are
/// grouped into chunks of [`REDUCTION_CHUNK`]; chunk buffers are summed in
/// index order. Returns the summed gradient and the per-sample outputs.
pub fn batch_gradients<T, F>(
    n_samples: usize,
    param_len: usize,
    exec: Execution,
    per_sample: F,
) -> Result<(Vec<f32>, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &mut [f32]) -> Result<T> + Sync + Send,
{
    let n_chunks = n_samples.div_ceil(REDUCTION_CHUNK);
    let chunks = map_indexed(n_chunks, exec, |chunk| -> Result<(Vec<f32>, Vec<T>)> {
        let mut grad = vec![0.0f32; param_len];
        let start = chunk * REDUCTION_CHUNK;
        let end = (start + REDUCTION_CHUNK).min(n_samples);
        let mut outs = Vec::with_capacity(end - start);
        for i in start..end {
            outs.push(per_sample(i, &mut grad)?);
        }
        Ok((grad, outs))
    });
    let mut total = vec![0.0f32; param_len];
    let mut outputs = Vec::with_capacity(n_samples);
    for chunk in chunks {
        let (grad, outs) = chunk?;
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
        outputs.extend(outs);
    }
    Ok((total, outputs))
}

use rayon::prelude::*;

use crate::error::Result;

/// Work items per reduction chunk. Fixed so the summation order, and hence
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

/// Sums `f(item, grad)` contributions over `items`: each chunk accumulates into
/// its own buffer in parallel, then the buffers are added in chunk order.
pub(crate) fn accumulate_ordered<T, F>(items: &[T], dim: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Vec<f64>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; dim];
            let mut loss = 0.0;
            for it in chunk {
                loss += f(it, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for p in partials {
        let (l, g) = p?;
        total += l;
        crate::numkit::axpy(1.0, &g, &mut grad);
    }
    Ok((total, grad))
}

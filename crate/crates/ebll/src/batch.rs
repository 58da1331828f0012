//! Batched gradient computation: a batch is split into fixed-size chunks,
//! each chunk runs one forward/backward pass into its own gradient buffer,
//! and the buffers are merged in chunk order. The fixed chunk size keeps the
//! floating-point summation order independent of thread count, so parallel
//! and sequential builds produce bit-identical gradients.

use crate::error::Result;
use crate::graph::{Graph, GradBuffer, NodeId, ParamStore};
use crate::parallel;

/// Samples per backward chunk. Fixed so results do not depend on available
/// parallelism.
const CHUNK: usize = 8;

/// Builds per-sample losses via `build`, accumulates the mean-batch gradient
/// (factor `1/n_total`) into one buffer, and returns the per-sample metric
/// payloads in batch order.
pub(crate) fn batch_grads<T, B>(
    store: &ParamStore,
    batch: &[usize],
    n_total: usize,
    build: B,
) -> Result<(GradBuffer, Vec<T>)>
where
    T: Send,
    B: Fn(&mut Graph, usize) -> Result<(NodeId, T)> + Sync + Send,
{
    let inv_n = 1.0 / n_total as f64;
    let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
    let results: Vec<Result<(GradBuffer, Vec<T>)>> = parallel::map_collect(&chunks, |chunk| {
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(chunk.len());
        let mut terms = Vec::with_capacity(chunk.len());
        for &i in *chunk {
            let (node, t) = build(&mut g, i)?;
            losses.push(node);
            terms.push(t);
        }
        let total = g.sum_scalars(losses)?;
        let mut buf = GradBuffer::for_store(store);
        g.backward_buffered(total, inv_n, store, &mut buf)?;
        Ok((buf, terms))
    });

    let mut merged: Option<GradBuffer> = None;
    let mut all_terms = Vec::with_capacity(batch.len());
    for r in results {
        let (buf, terms) = r?;
        match &mut merged {
            None => merged = Some(buf),
            Some(m) => m.merge(&buf),
        }
        all_terms.extend(terms);
    }
    let merged = merged.unwrap_or_else(|| GradBuffer::for_store(store));
    Ok((merged, all_terms))
}

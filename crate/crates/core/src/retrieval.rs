//! Exact top-K cosine retrieval over a bank snapshot, pooling all classes.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::memory::BankSnapshot;
use crate::vector;

/// Neighbor count used when nothing else is configured.
pub const DEFAULT_K: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Bank indices, most similar first.
    pub neighbor_indices: Vec<usize>,
    /// Cosine similarities, non-increasing.
    pub similarities: Vec<f32>,
    pub snapshot_version: u64,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_indices.is_empty()
    }
}

/// Descending score, then ascending index.
#[inline]
fn rank(a: &(f32, usize), b: &(f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `min(k, bank.len())` items with the largest cosine similarity to
/// `query`. Ties go to the lower bank index.
pub fn top_k(query: &[f32], bank: &BankSnapshot, k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if query.len() != bank.dim() {
        return Err(Error::ShapeMismatch { expected: bank.dim(), found: query.len() });
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let qnorm = vector::norm(query);
    if !(qnorm.is_finite() && qnorm > 0.0) {
        return Err(Error::invalid("query must be finite and non-zero"));
    }
    let mut scored: Vec<(f32, usize)> = bank
        .data()
        .chunks_exact(bank.dim())
        .enumerate()
        .map(|(i, v)| (vector::dot(query, v), i))
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank);
    Ok(RetrievalResult {
        neighbor_indices: scored.iter().map(|&(_, i)| i).collect(),
        similarities: scored.iter().map(|&(s, _)| (s / qnorm).clamp(-1.0, 1.0)).collect(),
        snapshot_version: bank.version(),
    })
}

/// [`top_k`] over many queries; output order follows input order.
pub fn top_k_batch<Q>(queries: &[Q], bank: &BankSnapshot, k: usize) -> Result<Vec<RetrievalResult>>
where
    Q: AsRef<[f32]> + Sync,
{
    queries.par_iter().map(|q| top_k(q.as_ref(), bank, k)).collect()
}

/// 1 when any of the first `k` neighbors carries `true_class`, else 0.
pub fn recall_at_k(result: &RetrievalResult, bank: &BankSnapshot, true_class: u32, k: usize) -> Result<u8> {
    if k == 0 || k > result.len() {
        return Err(Error::invalid(format!("recall@{k} needs 1 ≤ k ≤ {}", result.len())));
    }
    Ok(result.neighbor_indices[..k].iter().any(|&i| bank.label(i) == true_class) as u8)
}

//! Reference decoding attention under GQA: exact attention over explicit
//! K/V rows, and sparse attention over the device-resident token set
//! (sink, selected pages, recent window).
//!
//! The accumulation order is fixed: logits in token-ascending order with a
//! channel-ascending dot product, stable softmax with per-element
//! normalization, then token-ascending output accumulation. Every gather
//! path feeds rows in ascending token position, so identical token sets
//! produce identical bits regardless of where the rows live.

use thiserror::Error;

use crate::par;
use crate::selection::SelectionResult;
use crate::store::{DeviceCache, StoreError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    #[error("attention over an empty context")]
    EmptyContext,
    #[error("page {page_id} not resident for kv head {kv_head} (barrier bug)")]
    PageNotResident { kv_head: usize, page_id: u32 },
}

/// `softmax(q K^T / sqrt(d)) V` over the given `(key, value)` rows.
pub fn exact_attention(
    query: &[f32],
    rows: &[(&[f32], &[f32])],
) -> Result<Vec<f32>, AttentionError> {
    if rows.is_empty() {
        return Err(AttentionError::EmptyContext);
    }
    let d = query.len();
    let sqrt_d = (d as f32).sqrt();
    let mut logits = Vec::with_capacity(rows.len());
    for (k, _) in rows {
        let mut dot = 0.0f32;
        for c in 0..d {
            dot += query[c] * k[c];
        }
        logits.push(dot / sqrt_d);
    }
    let mut max = logits[0];
    for &l in &logits[1..] {
        max = max.max(l);
    }
    let mut weights: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut sum = 0.0f32;
    for &w in &weights {
        sum += w;
    }
    for w in &mut weights {
        *w /= sum;
    }
    let mut out = vec![0.0f32; d];
    for (w, (_, v)) in weights.iter().zip(rows) {
        for c in 0..d {
            out[c] += w * v[c];
        }
    }
    Ok(out)
}

/// The normalized softmax weights `exact_attention` would use.
pub fn attention_weights(query: &[f32], keys: &[&[f32]]) -> Vec<f32> {
    let d = query.len();
    let sqrt_d = (d as f32).sqrt();
    let logits: Vec<f32> = keys
        .iter()
        .map(|k| {
            let mut dot = 0.0f32;
            for c in 0..d {
                dot += query[c] * k[c];
            }
            dot / sqrt_d
        })
        .collect();
    crate::selection::softmax(&logits)
}

/// Attention for every attention head over the device-resident token set:
/// sink tokens, the head's selected pages, and the retained recent window,
/// deduplicated by position. Head `h` reads KV head `h / group_size`.
pub fn sparse_attention(
    queries: &[Vec<f32>],
    cache: &DeviceCache,
    selection: &SelectionResult,
    group_size: usize,
) -> Result<Vec<Vec<f32>>, AttentionError> {
    run_heads(queries, cache, selection, group_size, false)
}

/// Sequential twin of [`sparse_attention`]; bit-identical output.
pub fn sparse_attention_seq(
    queries: &[Vec<f32>],
    cache: &DeviceCache,
    selection: &SelectionResult,
    group_size: usize,
) -> Result<Vec<Vec<f32>>, AttentionError> {
    run_heads(queries, cache, selection, group_size, true)
}

fn run_heads(
    queries: &[Vec<f32>],
    cache: &DeviceCache,
    selection: &SelectionResult,
    group_size: usize,
    sequential: bool,
) -> Result<Vec<Vec<f32>>, AttentionError> {
    let n_kv = selection.per_kv_head.len();
    debug_assert_eq!(queries.len(), n_kv * group_size);
    let attend = |m: usize| -> Result<Vec<Vec<f32>>, AttentionError> {
        let rows = cache
            .gather_context(m, &selection.per_kv_head[m])
            .map_err(|e| match e {
                StoreError::PageNotResident { kv_head, page_id } => {
                    AttentionError::PageNotResident { kv_head, page_id }
                }
                other => panic!("unexpected gather failure: {other}"),
            })?;
        let row_refs: Vec<(&[f32], &[f32])> = rows.iter().map(|r| (r.key, r.value)).collect();
        (0..group_size)
            .map(|j| exact_attention(&queries[m * group_size + j], &row_refs))
            .collect()
    };
    let per_kv: Vec<Result<Vec<Vec<f32>>, AttentionError>> = if sequential {
        par::map_indexed_seq(n_kv, attend)
    } else {
        par::map_indexed(n_kv, attend)
    };
    let mut out = Vec::with_capacity(queries.len());
    for group in per_kv {
        out.extend(group?);
    }
    Ok(out)
}

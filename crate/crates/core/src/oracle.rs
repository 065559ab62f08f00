//! Independent brute-force references the property tests and acceptance
//! suite compare against: full-sort top-k, masked exact attention over
//! plain arrays, a synchronous non-speculative retrieval engine, and the
//! page-score bound audit.
//!
//! Repo rule: nothing in this module may call into the modules it checks.
//! The synchronous engine keeps the whole cache as flat token rows (no
//! pools, slots, rings, or transposes) and re-derives summaries, scores,
//! pooling, selection, and attention from scratch. Accumulation orders
//! match the documented canonical orders (token/head/channel ascending,
//! per-element normalization), which is what makes bit-level equivalence
//! checks meaningful.

use thiserror::Error;

use crate::config::{EngineConfig, PoolingMethod};
use crate::selection::SelectionResult;
use crate::trace::Trace;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("masked attention over an empty index set")]
    EmptySet,
}

/// Top-`k` page ids by full stable sort (score descending, id ascending),
/// returned sorted ascending.
pub fn brute_topk(pooled: &[f32], page_ids: &[u32], k: usize) -> Vec<u32> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| {
        pooled[b]
            .total_cmp(&pooled[a])
            .then_with(|| page_ids[a].cmp(&page_ids[b]))
    });
    let mut ids: Vec<u32> = order
        .into_iter()
        .take(k)
        .map(|i| page_ids[i])
        .collect();
    ids.sort_unstable();
    ids
}

/// Exact attention restricted to `indices` (ascending, deduplicated) over
/// per-token key/value rows.
pub fn masked_exact_attention(
    query: &[f32],
    keys: &[&[f32]],
    values: &[&[f32]],
    indices: &[usize],
) -> Result<Vec<f32>, OracleError> {
    if indices.is_empty() {
        return Err(OracleError::EmptySet);
    }
    let d = query.len();
    let sqrt_d = (d as f32).sqrt();
    let mut logits = Vec::with_capacity(indices.len());
    for &t in indices {
        let row = keys[t];
        let mut dot = 0.0f32;
        for c in 0..d {
            dot += query[c] * row[c];
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
    for (w, &t) in weights.iter().zip(indices) {
        let row = values[t];
        for c in 0..d {
            out[c] += w * row[c];
        }
    }
    Ok(out)
}

/// True iff the min-max page score upper-bounds every in-page token score
/// `(q . k) / sqrt(d)`. Calls the scoring function under audit; the
/// per-token side is computed here.
pub fn page_bound_audit(
    query: &[f32],
    page_keys: &[&[f32]],
    min_key: &[f32],
    max_key: &[f32],
) -> bool {
    let bound = crate::selection::page_score(query, min_key, max_key);
    let d = query.len();
    let sqrt_d = (d as f32).sqrt();
    page_keys.iter().all(|row| {
        let mut dot = 0.0f32;
        for c in 0..d {
            dot += query[c] * row[c];
        }
        dot / sqrt_d <= bound + 1e-5
    })
}

/// One layer's reference output at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStepRecord {
    pub step: usize,
    pub layer: usize,
    /// Attention output per attention head.
    pub outputs: Vec<Vec<f32>>,
    /// The selection computed from this step's query (empty lists for
    /// exempt layers).
    pub selection: SelectionResult,
}

struct OracleSummary {
    /// Per KV head, channelwise min and max over the page's keys.
    min: Vec<Vec<f32>>,
    max: Vec<Vec<f32>>,
}

struct OracleLayer {
    /// One `n_kv * d` row per token.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    summaries: Vec<OracleSummary>,
    /// Pages counted as offloaded (summarized, selectable past the sink).
    host_pages: usize,
    /// Ring release boundary: host page count at the end of the previous
    /// step. Tokens at or past `released * p` are still device-retained.
    released: usize,
}

/// Synchronous non-speculative reference: at every step selection uses the
/// current query and recall is assumed complete before attention. Ground
/// truth for the always-correct equivalence and the lag-one transcript.
pub struct SyncEngine {
    cfg: EngineConfig,
    layers: Vec<OracleLayer>,
}

impl SyncEngine {
    pub fn new(cfg: EngineConfig, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| OracleLayer {
                keys: Vec::new(),
                values: Vec::new(),
                summaries: Vec::new(),
                host_pages: 0,
                released: 0,
            })
            .collect();
        Self { cfg, layers }
    }

    /// Run the whole trace, producing one record per (step, layer).
    pub fn run(trace: &Trace, cfg: &EngineConfig) -> Vec<OracleStepRecord> {
        let mut engine = Self::new(cfg.clone(), trace.header.n_layers as usize);
        for (layer, prefill) in trace.prefill.iter().enumerate() {
            for (k, v) in prefill.k.iter().zip(&prefill.v) {
                engine.layers[layer].keys.push(k.clone());
                engine.layers[layer].values.push(v.clone());
            }
        }
        for layer in 0..engine.layers.len() {
            engine.refresh_offload_boundary(layer);
        }
        let mut records = Vec::new();
        for (step, data) in trace.steps.iter().enumerate() {
            for (layer, ls) in data.layers.iter().enumerate() {
                records.push(engine.step_layer(step, layer, &ls.q, &ls.k, &ls.v));
            }
            for layer in 0..engine.layers.len() {
                let state = &mut engine.layers[layer];
                state.released = state.host_pages;
            }
        }
        records
    }

    fn layer_exempt(&self, layer: usize) -> bool {
        self.cfg.spec.first_layer_exempt && layer == 0
    }

    fn refresh_offload_boundary(&mut self, layer: usize) {
        let p = self.cfg.dims.page_size;
        let w = self.cfg.budget.window_tokens;
        let state = &mut self.layers[layer];
        let due = state.keys.len().saturating_sub(w) / p;
        while state.host_pages < due {
            let pid = state.host_pages;
            state.summaries.push(summarize(
                &state.keys[pid * p..(pid + 1) * p],
                self.cfg.dims.n_kv,
                self.cfg.dims.d,
            ));
            state.host_pages += 1;
        }
    }

    fn step_layer(
        &mut self,
        step: usize,
        layer: usize,
        queries: &[Vec<f32>],
        k_row: &[f32],
        v_row: &[f32],
    ) -> OracleStepRecord {
        let dims = self.cfg.dims;
        {
            let state = &mut self.layers[layer];
            state.keys.push(k_row.to_vec());
            state.values.push(v_row.to_vec());
        }
        self.refresh_offload_boundary(layer);
        let state = &self.layers[layer];
        let n = state.keys.len();
        let key_refs: Vec<&[f32]> = state.keys.iter().map(|r| r.as_slice()).collect();
        let value_refs: Vec<&[f32]> = state.values.iter().map(|r| r.as_slice()).collect();

        if self.layer_exempt(layer) {
            let indices: Vec<usize> = (0..n).collect();
            let outputs = attend_all_heads(queries, &key_refs, &value_refs, &indices, dims.d, dims.group_size());
            return OracleStepRecord {
                step,
                layer,
                outputs,
                selection: SelectionResult::empty(dims.n_kv),
            };
        }

        let selection = self.select_current(layer, queries);
        let p = dims.page_size;
        let sink_tokens = (self.cfg.sink_pages * p).min(n);
        let mut outputs = Vec::with_capacity(queries.len());
        for m in 0..dims.n_kv {
            let mut index_set: Vec<usize> = (0..sink_tokens).collect();
            for &pid in &selection.per_kv_head[m] {
                let base = pid as usize * p;
                for t in 0..p {
                    index_set.push(base + t);
                }
            }
            for pos in state.released * p..n {
                index_set.push(pos);
            }
            index_set.sort_unstable();
            index_set.dedup();
            let per_head: Vec<&[f32]> = state
                .keys
                .iter()
                .map(|row| &row[m * dims.d..(m + 1) * dims.d])
                .collect();
            let per_head_v: Vec<&[f32]> = state
                .values
                .iter()
                .map(|row| &row[m * dims.d..(m + 1) * dims.d])
                .collect();
            for j in 0..dims.group_size() {
                let q = &queries[m * dims.group_size() + j];
                outputs.push(
                    masked_exact_attention(q, &per_head, &per_head_v, &index_set)
                        .expect("token set always contains the current token"),
                );
            }
        }
        OracleStepRecord {
            step,
            layer,
            outputs,
            selection,
        }
    }

    /// Group-consistent selection from the current queries, re-derived
    /// from first principles.
    fn select_current(&self, layer: usize, queries: &[Vec<f32>]) -> SelectionResult {
        let dims = self.cfg.dims;
        let state = &self.layers[layer];
        let first = self.cfg.sink_pages.min(state.host_pages);
        let ids: Vec<u32> = (first..state.host_pages).map(|p| p as u32).collect();
        let g = dims.group_size();
        let per_kv_head = (0..dims.n_kv)
            .map(|m| {
                let group = &queries[m * g..(m + 1) * g];
                let pooled = self.pooled_scores(state, m, group, first);
                brute_topk(&pooled, &ids, self.cfg.selectable_pages)
            })
            .collect();
        SelectionResult { per_kv_head }
    }

    fn pooled_scores(
        &self,
        state: &OracleLayer,
        kv_head: usize,
        group: &[Vec<f32>],
        first: usize,
    ) -> Vec<f32> {
        let n_pages = state.host_pages - first;
        let g = group.len();
        let method = self.cfg.spec.pooling;
        let score_query = |q: &[f32]| -> Vec<f32> {
            (first..state.host_pages)
                .map(|pid| {
                    score_min_max(
                        q,
                        &state.summaries[pid].min[kv_head],
                        &state.summaries[pid].max[kv_head],
                    )
                })
                .collect()
        };
        match method {
            PoolingMethod::MeanQ | PoolingMethod::MaxQ => {
                let d = self.cfg.dims.d;
                let mut pooled_q = vec![
                    if method == PoolingMethod::MeanQ {
                        0.0f32
                    } else {
                        f32::NEG_INFINITY
                    };
                    d
                ];
                for q in group {
                    for c in 0..d {
                        if method == PoolingMethod::MeanQ {
                            pooled_q[c] += q[c];
                        } else {
                            pooled_q[c] = pooled_q[c].max(q[c]);
                        }
                    }
                }
                if method == PoolingMethod::MeanQ {
                    for x in &mut pooled_q {
                        *x /= g as f32;
                    }
                }
                score_query(&pooled_q)
            }
            PoolingMethod::MeanS | PoolingMethod::MaxS => {
                let mean = method == PoolingMethod::MeanS;
                let mut pooled =
                    vec![if mean { 0.0f32 } else { f32::NEG_INFINITY }; n_pages];
                for q in group {
                    let scores = score_query(q);
                    let soft = softmax_ref(&scores);
                    for (acc, s) in pooled.iter_mut().zip(soft) {
                        if mean {
                            *acc += s;
                        } else {
                            *acc = acc.max(s);
                        }
                    }
                }
                if mean {
                    for acc in &mut pooled {
                        *acc /= g as f32;
                    }
                }
                pooled
            }
            PoolingMethod::MeanQk | PoolingMethod::MaxQk => {
                let mean = method == PoolingMethod::MeanQk;
                let mut pooled =
                    vec![if mean { 0.0f32 } else { f32::NEG_INFINITY }; n_pages];
                for q in group {
                    let scores = score_query(q);
                    for (acc, s) in pooled.iter_mut().zip(scores) {
                        if mean {
                            *acc += s;
                        } else {
                            *acc = acc.max(s);
                        }
                    }
                }
                if mean {
                    for acc in &mut pooled {
                        *acc /= g as f32;
                    }
                }
                pooled
            }
        }
    }
}

fn summarize(rows: &[Vec<f32>], n_kv: usize, d: usize) -> OracleSummary {
    let mut min = Vec::with_capacity(n_kv);
    let mut max = Vec::with_capacity(n_kv);
    for h in 0..n_kv {
        let mut lo = rows[0][h * d..(h + 1) * d].to_vec();
        let mut hi = lo.clone();
        for row in &rows[1..] {
            let slice = &row[h * d..(h + 1) * d];
            for c in 0..d {
                lo[c] = lo[c].min(slice[c]);
                hi[c] = hi[c].max(slice[c]);
            }
        }
        min.push(lo);
        max.push(hi);
    }
    OracleSummary { min, max }
}

fn score_min_max(q: &[f32], min: &[f32], max: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for c in 0..q.len() {
        acc += (q[c] * min[c]).max(q[c] * max[c]);
    }
    acc / (q.len() as f32).sqrt()
}

fn softmax_ref(scores: &[f32]) -> Vec<f32> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut max = scores[0];
    for &s in &scores[1..] {
        max = max.max(s);
    }
    let exp: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exp {
        sum += e;
    }
    exp.iter().map(|&e| e / sum).collect()
}

fn attend_all_heads(
    queries: &[Vec<f32>],
    keys: &[&[f32]],
    values: &[&[f32]],
    indices: &[usize],
    d: usize,
    group_size: usize,
) -> Vec<Vec<f32>> {
    let mut outputs = Vec::with_capacity(queries.len());
    for (h, q) in queries.iter().enumerate() {
        let m = h / group_size;
        let head_keys: Vec<&[f32]> = keys.iter().map(|row| &row[m * d..(m + 1) * d]).collect();
        let head_values: Vec<&[f32]> =
            values.iter().map(|row| &row[m * d..(m + 1) * d]).collect();
        outputs.push(
            masked_exact_attention(q, &head_keys, &head_values, indices)
                .expect("full index set is nonempty"),
        );
    }
    outputs
}

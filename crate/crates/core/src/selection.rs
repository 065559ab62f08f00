//! Page summaries, per-head page scoring, group-consistent pooling, and
//! deterministic top-k page selection.
//!
//! A page summary is the channelwise min/max of the page's keys per KV
//! head. A query scores a page by the channelwise upper bound
//! `sum_c max(q_c * min_c, q_c * max_c) / sqrt(d)`, which dominates the
//! scaled dot product of the query with every key in the page. Scores are
//! pooled across each head group so all heads sharing a KV head select the
//! same pages.
//!
//! Float accumulation order is fixed everywhere (channels ascending, heads
//! ascending, per-element normalization) so results are reproducible
//! across the parallel and sequential paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PoolingMethod;
use crate::layout::{NhdPage, PageKind};
use crate::par;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("group size mismatch: expected {expected} score vectors, got {got}")]
    GroupSizeMismatch { expected: usize, got: usize },
    #[error("{0} pools query vectors, not score vectors")]
    ScorePoolingUnsupported(PoolingMethod),
}

/// Channelwise key bounds for one page: `min_key[h][c] <= k[c] <= max_key[h][c]`
/// for every key `k` of KV head `h` in the page.
#[derive(Debug, Clone, PartialEq)]
pub struct PageSummary {
    pub min_key: Vec<Vec<f32>>,
    pub max_key: Vec<Vec<f32>>,
}

/// Summaries for every offloaded page, indexed by page id.
#[derive(Debug, Clone, Default)]
pub struct SummaryStore {
    summaries: Vec<PageSummary>,
}

impl SummaryStore {
    pub fn push(&mut self, summary: PageSummary) {
        self.summaries.push(summary);
    }

    pub fn get(&self, page_id: usize) -> &PageSummary {
        &self.summaries[page_id]
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }
}

/// Raw (pre-softmax) page scores, one vector per attention head over the
/// selectable pages being scored.
#[derive(Debug, Clone, PartialEq)]
pub struct PageScores {
    pub per_head: Vec<Vec<f32>>,
}

/// Group-consistent page choice: one sorted page-id list per KV head,
/// shared by all attention heads of that group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub per_kv_head: Vec<Vec<u32>>,
}

impl SelectionResult {
    pub fn empty(n_kv: usize) -> Self {
        Self {
            per_kv_head: vec![Vec::new(); n_kv],
        }
    }

    /// The page list attention head `h` consumes under group size `g`.
    pub fn for_attention_head(&self, head: usize, group_size: usize) -> &[u32] {
        &self.per_kv_head[head / group_size]
    }
}

/// Channelwise min/max over the page's keys, per KV head.
pub fn summarize_page(keys: &NhdPage) -> PageSummary {
    assert_eq!(keys.kind, PageKind::Key, "summaries are built from keys");
    let d = keys.head_dim;
    let mut min_key = Vec::with_capacity(keys.n_kv);
    let mut max_key = Vec::with_capacity(keys.n_kv);
    for h in 0..keys.n_kv {
        let mut min = keys.token_head_row(0, h).to_vec();
        let mut max = min.clone();
        for t in 1..keys.page_size {
            let row = keys.token_head_row(t, h);
            for c in 0..d {
                min[c] = min[c].min(row[c]);
                max[c] = max[c].max(row[c]);
            }
        }
        min_key.push(min);
        max_key.push(max);
    }
    PageSummary { min_key, max_key }
}

/// Upper bound on `(q . k) / sqrt(d)` over every key `k` the summary covers.
pub fn page_score(query: &[f32], min_key: &[f32], max_key: &[f32]) -> f32 {
    debug_assert_eq!(query.len(), min_key.len());
    let mut acc = 0.0f32;
    for c in 0..query.len() {
        acc += (query[c] * min_key[c]).max(query[c] * max_key[c]);
    }
    acc / (query.len() as f32).sqrt()
}

/// Numerically stable softmax; per-element normalization.
pub fn softmax(scores: &[f32]) -> Vec<f32> {
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

/// Pool one group's per-head score vectors into a single vector.
///
/// `MeanS`/`MaxS` pool the softmaxed scores, `MeanQk`/`MaxQk` the raw
/// scores. The query-pooling variants never reach this function; they pool
/// before scoring (see [`select_pages`]).
pub fn pool_group_scores(
    head_scores: &[Vec<f32>],
    group_size: usize,
    method: PoolingMethod,
) -> Result<Vec<f32>, SelectionError> {
    if head_scores.len() != group_size {
        return Err(SelectionError::GroupSizeMismatch {
            expected: group_size,
            got: head_scores.len(),
        });
    }
    let n = head_scores[0].len();
    if head_scores.iter().any(|s| s.len() != n) {
        return Err(SelectionError::GroupSizeMismatch {
            expected: group_size,
            got: head_scores.len(),
        });
    }
    let (softmax_first, mean) = match method {
        PoolingMethod::MeanS => (true, true),
        PoolingMethod::MaxS => (true, false),
        PoolingMethod::MeanQk => (false, true),
        PoolingMethod::MaxQk => (false, false),
        PoolingMethod::MeanQ | PoolingMethod::MaxQ => {
            return Err(SelectionError::ScorePoolingUnsupported(method))
        }
    };
    let mut pooled = vec![if mean { 0.0f32 } else { f32::NEG_INFINITY }; n];
    if n == 0 {
        return Ok(pooled);
    }
    for scores in head_scores {
        let transformed;
        let view: &[f32] = if softmax_first {
            transformed = softmax(scores);
            &transformed
        } else {
            scores
        };
        for (acc, &s) in pooled.iter_mut().zip(view) {
            if mean {
                *acc += s;
            } else {
                *acc = acc.max(s);
            }
        }
    }
    if mean {
        for acc in &mut pooled {
            *acc /= group_size as f32;
        }
    }
    Ok(pooled)
}

/// The `k` highest-scoring page ids, ties broken toward the lower id,
/// returned sorted ascending. Selects everything when `k >= scores.len()`.
pub fn select_topk(pooled: &[f32], page_ids: &[u32], k: usize) -> Vec<u32> {
    debug_assert_eq!(pooled.len(), page_ids.len());
    let n = pooled.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            pooled[b]
                .total_cmp(&pooled[a])
                .then_with(|| page_ids[a].cmp(&page_ids[b]))
        });
        order.truncate(k);
    }
    let mut ids: Vec<u32> = order.into_iter().map(|i| page_ids[i]).collect();
    ids.sort_unstable();
    ids
}

/// Context for one selection pass: which pages are scoreable and how.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub summaries: &'a SummaryStore,
    /// Selectable page ids, `first..last` (sink pages excluded below,
    /// not-yet-offloaded pages above).
    pub first_selectable: usize,
    pub last_selectable: usize,
    pub group_size: usize,
    pub budget_pages: usize,
    pub method: PoolingMethod,
}

impl<'a> SelectionContext<'a> {
    pub fn selectable_ids(&self) -> Vec<u32> {
        (self.first_selectable..self.last_selectable)
            .map(|p| p as u32)
            .collect()
    }
}

/// Raw page scores for every attention head over the selectable range;
/// head `h` scores against KV head `h / group_size`'s summaries.
pub fn score_pages(queries: &[Vec<f32>], ctx: &SelectionContext) -> PageScores {
    let per_head = queries
        .iter()
        .enumerate()
        .map(|(h, q)| score_query_for_head(q, h / ctx.group_size, ctx))
        .collect();
    PageScores { per_head }
}

fn score_query_for_head(query: &[f32], kv_head: usize, ctx: &SelectionContext) -> Vec<f32> {
    (ctx.first_selectable..ctx.last_selectable)
        .map(|pid| {
            let s = ctx.summaries.get(pid);
            page_score(query, &s.min_key[kv_head], &s.max_key[kv_head])
        })
        .collect()
}

/// Pool one group's scores (or queries) per `method` and return the pooled
/// score vector for KV head `kv_head`.
pub fn score_group(
    queries: &[Vec<f32>],
    kv_head: usize,
    ctx: &SelectionContext,
) -> Result<Vec<f32>, SelectionError> {
    let g = ctx.group_size;
    let group = &queries[kv_head * g..(kv_head + 1) * g];
    match ctx.method {
        PoolingMethod::MeanQ | PoolingMethod::MaxQ => {
            let d = group[0].len();
            let mut pooled_q = vec![
                if ctx.method == PoolingMethod::MeanQ {
                    0.0f32
                } else {
                    f32::NEG_INFINITY
                };
                d
            ];
            for q in group {
                for (acc, &x) in pooled_q.iter_mut().zip(q.iter()) {
                    if ctx.method == PoolingMethod::MeanQ {
                        *acc += x;
                    } else {
                        *acc = acc.max(x);
                    }
                }
            }
            if ctx.method == PoolingMethod::MeanQ {
                for acc in &mut pooled_q {
                    *acc /= g as f32;
                }
            }
            Ok(score_query_for_head(&pooled_q, kv_head, ctx))
        }
        _ => {
            let head_scores: Vec<Vec<f32>> = group
                .iter()
                .map(|q| score_query_for_head(q, kv_head, ctx))
                .collect();
            pool_group_scores(&head_scores, g, ctx.method)
        }
    }
}

/// One full group-consistent selection pass over all KV heads, parallel
/// across heads when the `parallel` feature is enabled.
pub fn select_pages(
    queries: &[Vec<f32>],
    n_kv: usize,
    ctx: &SelectionContext,
) -> Result<SelectionResult, SelectionError> {
    let ids = ctx.selectable_ids();
    let per_kv_head: Vec<Result<Vec<u32>, SelectionError>> = par::map_indexed(n_kv, |m| {
        let pooled = score_group(queries, m, ctx)?;
        Ok(select_topk(&pooled, &ids, ctx.budget_pages))
    });
    collect_heads(per_kv_head)
}

/// Sequential twin of [`select_pages`]; used as the fallback reference and
/// by the benchmarks.
pub fn select_pages_seq(
    queries: &[Vec<f32>],
    n_kv: usize,
    ctx: &SelectionContext,
) -> Result<SelectionResult, SelectionError> {
    let ids = ctx.selectable_ids();
    let per_kv_head: Vec<Result<Vec<u32>, SelectionError>> = par::map_indexed_seq(n_kv, |m| {
        let pooled = score_group(queries, m, ctx)?;
        Ok(select_topk(&pooled, &ids, ctx.budget_pages))
    });
    collect_heads(per_kv_head)
}

fn collect_heads(
    heads: Vec<Result<Vec<u32>, SelectionError>>,
) -> Result<SelectionResult, SelectionError> {
    let mut per_kv_head = Vec::with_capacity(heads.len());
    for h in heads {
        per_kv_head.push(h?);
    }
    Ok(SelectionResult { per_kv_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn key_page(p: usize, n_kv: usize, d: usize, data: Vec<f32>) -> NhdPage {
        NhdPage::from_data(PageKind::Key, p, n_kv, d, data).unwrap()
    }

    #[test]
    fn single_token_summary_is_the_key() {
        let page = key_page(1, 1, 3, vec![0.5, -1.0, 2.0]);
        let s = summarize_page(&page);
        assert_eq!(s.min_key[0], vec![0.5, -1.0, 2.0]);
        assert_eq!(s.max_key[0], vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn two_token_summary() {
        // keys [[1,-2],[3,0]] -> min [1,-2], max [3,0]
        let page = key_page(2, 1, 2, vec![1.0, -2.0, 3.0, 0.0]);
        let s = summarize_page(&page);
        assert_eq!(s.min_key[0], vec![1.0, -2.0]);
        assert_eq!(s.max_key[0], vec![3.0, 0.0]);
    }

    #[test]
    fn hand_computed_page_score() {
        // q=[1,1], min=[0,0], max=[2,3] -> (2+3)/sqrt(2)
        let got = page_score(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 3.0]);
        assert_relative_eq!(got, 5.0 / 2.0f32.sqrt(), max_relative = 1e-6);
    }

    #[test]
    fn zero_query_scores_zero() {
        assert_eq!(page_score(&[0.0, 0.0], &[-1.0, 2.0], &[3.0, 5.0]), 0.0);
    }

    #[test]
    fn score_bounds_every_token_in_page() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let (p, d) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let data: Vec<f32> = (0..p * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let page = key_page(p, 1, d, data);
            let s = summarize_page(&page);
            let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let bound = page_score(&q, &s.min_key[0], &s.max_key[0]);
            for t in 0..p {
                let row = page.token_head_row(t, 0);
                let dot: f32 = q.iter().zip(row).map(|(a, b)| a * b).sum();
                let token_score = dot / (d as f32).sqrt();
                assert!(
                    bound >= token_score - 1e-5,
                    "bound {bound} < token score {token_score}"
                );
            }
        }
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        let w = softmax(&[0.25; 5]);
        for x in w {
            assert_relative_eq!(x, 0.2, max_relative = 1e-6);
        }
    }

    #[test]
    fn means_pooling_identity_for_single_head_group() {
        let raw = vec![vec![0.0f32, 1.0, -2.0]];
        let pooled = pool_group_scores(&raw, 1, PoolingMethod::MeanS).unwrap();
        assert_eq!(pooled, softmax(&raw[0]));
    }

    #[test]
    fn hand_computed_group_pooling() {
        // P1=[0, ln2], P2=[ln2, 0]: softmax gives [1/3, 2/3] and [2/3, 1/3].
        let ln2 = 2.0f32.ln();
        let raw = vec![vec![0.0, ln2], vec![ln2, 0.0]];
        let mean_s = pool_group_scores(&raw, 2, PoolingMethod::MeanS).unwrap();
        assert_relative_eq!(mean_s[0], 0.5, max_relative = 1e-6);
        assert_relative_eq!(mean_s[1], 0.5, max_relative = 1e-6);
        let mean_qk = pool_group_scores(&raw, 2, PoolingMethod::MeanQk).unwrap();
        assert_relative_eq!(mean_qk[0], ln2 / 2.0, max_relative = 1e-6);
        assert_relative_eq!(mean_qk[1], ln2 / 2.0, max_relative = 1e-6);
    }

    #[test]
    fn group_size_mismatch_is_an_error() {
        let raw = vec![vec![0.0f32], vec![1.0]];
        assert!(matches!(
            pool_group_scores(&raw, 4, PoolingMethod::MeanS),
            Err(SelectionError::GroupSizeMismatch { .. })
        ));
        assert!(matches!(
            pool_group_scores(&raw, 2, PoolingMethod::MeanQ),
            Err(SelectionError::ScorePoolingUnsupported(_))
        ));
    }

    #[test]
    fn means_pooled_vector_is_a_distribution() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let g = rng.gen_range(1..5usize);
            let raw: Vec<Vec<f32>> = (0..g)
                .map(|_| (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            for scores in &raw {
                let sum: f32 = softmax(scores).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            let pooled = pool_group_scores(&raw, g, PoolingMethod::MeanS).unwrap();
            let sum: f32 = pooled.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_examples() {
        let ids: Vec<u32> = vec![0, 1, 2];
        assert_eq!(select_topk(&[0.1, 0.5, 0.4], &ids, 2), vec![1, 2]);
        let ids4: Vec<u32> = vec![0, 1, 2, 3];
        assert_eq!(select_topk(&[0.3; 4], &ids4, 2), vec![0, 1]);
        assert_eq!(select_topk(&[0.3; 4], &ids4, 0), Vec::<u32>::new());
        assert_eq!(select_topk(&[0.3; 4], &ids4, 9), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topk_ids_need_not_start_at_zero() {
        let ids: Vec<u32> = vec![16, 17, 18, 19];
        assert_eq!(select_topk(&[0.0, 2.0, 1.0, 2.0], &ids, 2), vec![17, 19]);
    }

    proptest! {
        #[test]
        fn topk_invariant_under_monotone_transform(
            scores in prop::collection::vec(-10.0f32..10.0, 1..40),
            k in 0usize..45,
        ) {
            let ids: Vec<u32> = (0..scores.len() as u32).collect();
            let base = select_topk(&scores, &ids, k);
            // strictly monotone: x -> 3x + 1, and x -> tanh(x/20)
            let t1: Vec<f32> = scores.iter().map(|&x| 3.0 * x + 1.0).collect();
            let t2: Vec<f32> = scores.iter().map(|&x| (x / 20.0).tanh()).collect();
            prop_assert_eq!(&base, &select_topk(&t1, &ids, k));
            prop_assert_eq!(&base, &select_topk(&t2, &ids, k));
        }

        #[test]
        fn summary_bounds_random_pages(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let (p, n_kv, d) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..6));
            let data: Vec<f32> = (0..p * n_kv * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let page = key_page(p, n_kv, d, data);
            let s = summarize_page(&page);
            for h in 0..n_kv {
                for t in 0..p {
                    let row = page.token_head_row(t, h);
                    for c in 0..d {
                        prop_assert!(s.min_key[h][c] <= row[c]);
                        prop_assert!(s.max_key[h][c] >= row[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn raw_scores_pool_to_the_same_selection() {
        // score_pages -> pool_group_scores -> select_topk reproduces the
        // packaged select_pages path for the score-pooling variants
        let mut rng = StdRng::seed_from_u64(31);
        let (n_kv, g, d, n_pages) = (2, 3, 6, 9);
        let mut store = SummaryStore::default();
        for _ in 0..n_pages {
            let data: Vec<f32> = (0..2 * n_kv * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.push(summarize_page(&key_page(2, n_kv, d, data)));
        }
        let queries: Vec<Vec<f32>> = (0..n_kv * g)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for method in [
            PoolingMethod::MeanS,
            PoolingMethod::MaxS,
            PoolingMethod::MeanQk,
            PoolingMethod::MaxQk,
        ] {
            let ctx = SelectionContext {
                summaries: &store,
                first_selectable: 1,
                last_selectable: n_pages,
                group_size: g,
                budget_pages: 3,
                method,
            };
            let scores = score_pages(&queries, &ctx);
            assert_eq!(scores.per_head.len(), n_kv * g);
            assert!(scores
                .per_head
                .iter()
                .all(|s| s.len() == n_pages - 1 && s.iter().all(|x| x.is_finite())));
            let ids = ctx.selectable_ids();
            let packaged = select_pages(&queries, n_kv, &ctx).unwrap();
            for m in 0..n_kv {
                let pooled =
                    pool_group_scores(&scores.per_head[m * g..(m + 1) * g], g, method).unwrap();
                assert_eq!(
                    select_topk(&pooled, &ids, 3),
                    packaged.per_kv_head[m],
                    "method {method}"
                );
            }
        }
    }

    #[test]
    fn parallel_and_sequential_selection_agree() {
        let mut rng = StdRng::seed_from_u64(21);
        let (n_kv, g, d, n_pages) = (4, 2, 8, 12);
        let mut store = SummaryStore::default();
        for _ in 0..n_pages {
            let data: Vec<f32> = (0..4 * n_kv * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.push(summarize_page(&key_page(4, n_kv, d, data)));
        }
        let queries: Vec<Vec<f32>> = (0..n_kv * g)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for method in PoolingMethod::ALL {
            let ctx = SelectionContext {
                summaries: &store,
                first_selectable: 2,
                last_selectable: n_pages,
                group_size: g,
                budget_pages: 4,
                method,
            };
            let a = select_pages(&queries, n_kv, &ctx).unwrap();
            let b = select_pages_seq(&queries, n_kv, &ctx).unwrap();
            assert_eq!(a, b, "method {method}");
        }
    }
}

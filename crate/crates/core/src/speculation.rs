//! The speculative retrieval state machine.
//!
//! Each step's attention reuses the pages recalled during the previous
//! step, so selection and recall leave the critical path. Per KV head, the
//! group-pooled cosine similarity between this step's and the previous
//! step's query vectors decides whether that head instead re-selects and
//! recalls synchronously before attending (a correction). Whenever any
//! head corrects, selection runs once for all heads with the current
//! query; non-corrected heads consume it as their background recall for
//! the next step without re-running selection.

use thiserror::Error;

use crate::config::{EngineConfig, SimilarityPooling, SpecMode};
use crate::selection::{select_pages, SelectionContext, SelectionError, SelectionResult};
use crate::store::{plan_recall, DeviceCache, StoreError, TransferPlan};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("advance called before the background recall barrier")]
    BarrierNotReached,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Carried speculation state: the previous step's queries and the
/// selection whose pages are resident for reuse.
#[derive(Debug, Clone)]
pub struct StepState {
    pub step_index: u64,
    pub prev_queries: Option<Vec<Vec<f32>>>,
    pub prev_selection: SelectionResult,
}

impl StepState {
    pub fn initial(n_kv: usize) -> Self {
        Self {
            step_index: 0,
            prev_queries: None,
            prev_selection: SelectionResult::empty(n_kv),
        }
    }
}

/// Per-KV-head correction verdicts and the pooled similarities behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionDecision {
    pub corrected: Vec<bool>,
    pub pooled_similarity: Vec<f32>,
}

impl CorrectionDecision {
    /// Step-0 bootstrap: no previous query exists, so every head takes the
    /// synchronous path. Not counted as a correction by the metrics.
    pub fn bootstrap(n_kv: usize) -> Self {
        Self {
            corrected: vec![true; n_kv],
            pooled_similarity: vec![0.0; n_kv],
        }
    }

    pub fn any_corrected(&self) -> bool {
        self.corrected.iter().any(|&c| c)
    }
}

/// One step's resolved retrieval work.
#[derive(Debug, Clone)]
pub struct DecodePlan {
    /// What this step's attention consumes, per KV head.
    pub selection_used: SelectionResult,
    /// The selection computed from the current query; becomes
    /// `prev_selection` after [`advance`].
    pub fresh_selection: SelectionResult,
    /// Must complete before attention (corrected heads only).
    pub sync_plan: TransferPlan,
    /// Executes after attention, for reuse at the next step.
    pub background_plan: TransferPlan,
}

/// Cosine similarity of two query vectors. A zero vector yields 0 (which
/// forces correction under any positive threshold) rather than NaN.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f32;
    let mut na = 0.0f32;
    let mut nb = 0.0f32;
    for c in 0..a.len() {
        dot += a[c] * b[c];
        na += a[c] * a[c];
        nb += b[c] * b[c];
    }
    if na == 0.0 || nb == 0.0 {
        log::debug!("zero query vector in similarity; treating as 0");
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Per-attention-head similarities between this step's and the previous
/// step's queries.
pub fn head_similarities(current: &[Vec<f32>], previous: &[Vec<f32>]) -> Vec<f32> {
    debug_assert_eq!(current.len(), previous.len());
    current
        .iter()
        .zip(previous)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect()
}

/// Unify one group's similarities into a single per-KV-head value.
pub fn pool_similarity(values: &[f32], method: SimilarityPooling) -> f32 {
    match method {
        SimilarityPooling::Mean => {
            let mut acc = 0.0f32;
            for &v in values {
                acc += v;
            }
            acc / values.len() as f32
        }
        SimilarityPooling::Max => {
            let mut acc = f32::NEG_INFINITY;
            for &v in values {
                acc = acc.max(v);
            }
            acc
        }
    }
}

/// Pool per-attention-head similarities down to one value per KV head.
pub fn pool_group_similarities(
    per_head: &[f32],
    group_size: usize,
    method: SimilarityPooling,
) -> Vec<f32> {
    per_head
        .chunks(group_size)
        .map(|group| pool_similarity(group, method))
        .collect()
}

/// Apply the threshold (or the mode override) to pooled similarities.
/// `tau <= 0` never corrects and `tau >= 1` always corrects.
pub fn identify_corrections(pooled: &[f32], cfg: &EngineConfig) -> CorrectionDecision {
    let spec = &cfg.spec;
    let corrected = match spec.mode {
        SpecMode::AlwaysCorrect => vec![true; pooled.len()],
        SpecMode::NeverCorrect => vec![false; pooled.len()],
        SpecMode::Speculative => {
            if spec.tau <= 0.0 {
                vec![false; pooled.len()]
            } else if spec.tau >= 1.0 {
                vec![true; pooled.len()]
            } else {
                pooled.iter().map(|&s| s < spec.tau).collect()
            }
        }
    };
    CorrectionDecision {
        corrected,
        pooled_similarity: pooled.to_vec(),
    }
}

/// Build the step's retrieval plan.
///
/// Step 0 (no previous queries) selects and recalls synchronously for all
/// heads. Afterwards, selection runs exactly once per step with the
/// current query: corrected heads fetch from it before attention and
/// consume it now; everyone else keeps consuming the previous selection
/// and fetches the fresh one in the background for the next step.
pub fn plan_step(
    state: &StepState,
    queries: &[Vec<f32>],
    decisions: &CorrectionDecision,
    ctx: &SelectionContext,
    cache: &DeviceCache,
    cfg: &EngineConfig,
) -> Result<DecodePlan, SpecError> {
    let n_kv = cfg.dims.n_kv;
    let geom = cfg.geometry();
    let layout = cfg.spec.host_layout;
    let fresh = select_pages(queries, n_kv, ctx)?;
    if state.prev_queries.is_none() {
        let sync_plan = plan_recall(&fresh, cache, &geom, layout, None)?;
        return Ok(DecodePlan {
            selection_used: fresh.clone(),
            fresh_selection: fresh,
            sync_plan,
            background_plan: TransferPlan::empty(geom, layout),
        });
    }
    let corrected = &decisions.corrected;
    let background_mask: Vec<bool> = corrected.iter().map(|&c| !c).collect();
    let sync_plan = if decisions.any_corrected() {
        plan_recall(&fresh, cache, &geom, layout, Some(corrected))?
    } else {
        TransferPlan::empty(geom, layout)
    };
    let background_plan = plan_recall(&fresh, cache, &geom, layout, Some(&background_mask))?;
    let selection_used = SelectionResult {
        per_kv_head: (0..n_kv)
            .map(|m| {
                if corrected[m] {
                    fresh.per_kv_head[m].clone()
                } else {
                    state.prev_selection.per_kv_head[m].clone()
                }
            })
            .collect(),
    };
    Ok(DecodePlan {
        selection_used,
        fresh_selection: fresh,
        sync_plan,
        background_plan,
    })
}

/// Roll the state forward once the background recall barrier has passed:
/// the fresh selection's pages are resident, so it becomes the reuse
/// target and the current queries become the comparison baseline.
pub fn advance(
    state: StepState,
    queries: Vec<Vec<f32>>,
    fresh_selection: SelectionResult,
    background_done: bool,
) -> Result<StepState, SpecError> {
    if !background_done {
        return Err(SpecError::BarrierNotReached);
    }
    Ok(StepState {
        step_index: state.step_index + 1,
        prev_queries: Some(queries),
        prev_selection: fresh_selection,
    })
}

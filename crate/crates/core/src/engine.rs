//! Trace-driven decode driver: per layer, the full offload / correction /
//! selection / recall / attention loop with the speculation state machine.
//!
//! Per step and layer the order is fixed: append the new token's K/V to
//! the ring, offload pages that aged out of the window, decide corrections
//! from the previous step's queries, plan the step, run synchronous
//! recalls, attend, run the background recall, advance the speculation
//! state, and only then release offloaded pages from the ring. That late
//! release keeps every token reachable while the selection that first saw
//! its page is still propagating, which is what makes full-budget runs
//! exact.

use thiserror::Error;

use crate::attention::{exact_attention, sparse_attention, AttentionError};
use crate::config::EngineConfig;
use crate::par;
use crate::selection::{SelectionContext, SelectionResult, SummaryStore};
use crate::speculation::{
    advance, head_similarities, identify_corrections, plan_step, pool_group_similarities,
    CorrectionDecision, SpecError, StepState,
};
use crate::store::{
    gather_all_rows, offload_full_page, DeviceCache, HostPool, StoreError, TransferAgent,
    TransferStats,
};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("trace dimensions disagree with config: {0}")]
    DimsMismatch(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Everything one (step, layer) produced.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub step: usize,
    pub layer: usize,
    pub exempt: bool,
    /// Step 0 bootstrap: synchronous by construction, not a correction.
    pub bootstrap: bool,
    pub outputs: Vec<Vec<f32>>,
    pub selection_used: SelectionResult,
    pub fresh_selection: SelectionResult,
    pub corrected: Vec<bool>,
    pub pooled_similarity: Vec<f32>,
    pub sync_stats: TransferStats,
    pub background_stats: TransferStats,
}

#[derive(Debug, Clone)]
pub struct EngineRun {
    pub n_steps: usize,
    pub n_layers: usize,
    pub records: Vec<LayerRecord>,
}

impl EngineRun {
    pub fn record(&self, step: usize, layer: usize) -> &LayerRecord {
        &self.records[step * self.n_layers + layer]
    }
}

struct LayerRuntime {
    host: HostPool,
    cache: DeviceCache,
    summaries: SummaryStore,
    state: StepState,
    exempt: bool,
}

/// The speculative decode engine for one sequence.
pub struct Engine {
    cfg: EngineConfig,
    agent: TransferAgent,
    layers: Vec<LayerRuntime>,
}

impl Engine {
    pub fn new(cfg: &EngineConfig, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|layer| LayerRuntime {
                host: HostPool::new(),
                cache: DeviceCache::from_config(cfg),
                summaries: SummaryStore::default(),
                state: StepState::initial(cfg.dims.n_kv),
                exempt: cfg.spec.first_layer_exempt && layer == 0,
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            agent: TransferAgent::new(),
            layers,
        }
    }

    /// Replay a whole trace.
    pub fn run(trace: &Trace, cfg: &EngineConfig) -> Result<EngineRun, EngineError> {
        let (n_qo, n_kv, d) = trace.dims();
        if (n_qo, n_kv, d) != (cfg.dims.n_qo, cfg.dims.n_kv, cfg.dims.d) {
            return Err(EngineError::DimsMismatch(format!(
                "trace ({n_qo}, {n_kv}, {d}) vs config ({}, {}, {})",
                cfg.dims.n_qo, cfg.dims.n_kv, cfg.dims.d
            )));
        }
        let n_layers = trace.header.n_layers as usize;
        let mut engine = Self::new(cfg, n_layers);
        engine.prefill(trace)?;
        let mut records = Vec::with_capacity(trace.steps.len() * n_layers);
        for (step, data) in trace.steps.iter().enumerate() {
            for (layer, ls) in data.layers.iter().enumerate() {
                records.push(engine.step_layer(step, layer, &ls.q, &ls.k, &ls.v)?);
            }
        }
        Ok(EngineRun {
            n_steps: trace.steps.len(),
            n_layers,
            records,
        })
    }

    fn prefill(&mut self, trace: &Trace) -> Result<(), EngineError> {
        for (layer, prefill) in trace.prefill.iter().enumerate() {
            let rt = &mut self.layers[layer];
            for (k, v) in prefill.k.iter().zip(&prefill.v) {
                rt.cache.append_token(k, v);
            }
            offload_due(rt)?;
            // no release: step 0's selection must see these pages first
        }
        Ok(())
    }

    fn step_layer(
        &mut self,
        step: usize,
        layer: usize,
        queries: &[Vec<f32>],
        k_row: &[f32],
        v_row: &[f32],
    ) -> Result<LayerRecord, EngineError> {
        let cfg = &self.cfg;
        let n_kv = cfg.dims.n_kv;
        let g = cfg.dims.group_size();
        let rt = &mut self.layers[layer];
        rt.cache.append_token(k_row, v_row);
        offload_due(rt)?;

        if rt.exempt {
            let outputs = full_attention(&rt.host, &rt.cache, queries, n_kv, g)?;
            rt.cache.release_offloaded();
            return Ok(LayerRecord {
                step,
                layer,
                exempt: true,
                bootstrap: step == 0,
                outputs,
                selection_used: SelectionResult::empty(n_kv),
                fresh_selection: SelectionResult::empty(n_kv),
                corrected: vec![false; n_kv],
                pooled_similarity: vec![0.0; n_kv],
                sync_stats: TransferStats::default(),
                background_stats: TransferStats::default(),
            });
        }

        let bootstrap = rt.state.prev_queries.is_none();
        let decisions = match &rt.state.prev_queries {
            None => CorrectionDecision::bootstrap(n_kv),
            Some(prev) => {
                let sims = head_similarities(queries, prev);
                let pooled = pool_group_similarities(&sims, g, cfg.spec.similarity_pooling);
                identify_corrections(&pooled, cfg)
            }
        };
        let ctx = SelectionContext {
            summaries: &rt.summaries,
            first_selectable: cfg.sink_pages.min(rt.host.len()),
            last_selectable: rt.host.len(),
            group_size: g,
            budget_pages: cfg.selectable_pages,
            method: cfg.spec.pooling,
        };
        let plan = plan_step(&rt.state, queries, &decisions, &ctx, &rt.cache, cfg)?;
        let tick = step as u64;
        let sync_stats = self
            .agent
            .execute_streamed(&plan.sync_plan, &rt.host, &mut rt.cache, tick)?;
        for m in 0..n_kv {
            rt.cache.touch(m, &plan.selection_used.per_kv_head[m], tick);
        }
        let outputs = sparse_attention(queries, &rt.cache, &plan.selection_used, g)?;
        let background_stats =
            self.agent
                .execute_streamed(&plan.background_plan, &rt.host, &mut rt.cache, tick)?;
        let old_state = std::mem::replace(&mut rt.state, StepState::initial(n_kv));
        rt.state = advance(
            old_state,
            queries.to_vec(),
            plan.fresh_selection.clone(),
            true,
        )?;
        rt.cache.release_offloaded();
        Ok(LayerRecord {
            step,
            layer,
            exempt: false,
            bootstrap,
            outputs,
            selection_used: plan.selection_used,
            fresh_selection: plan.fresh_selection,
            corrected: decisions.corrected,
            pooled_similarity: decisions.pooled_similarity,
            sync_stats,
            background_stats,
        })
    }
}

fn offload_due(rt: &mut LayerRuntime) -> Result<(), EngineError> {
    for pid in rt.cache.pages_due_for_offload() {
        let (k_page, v_page) = rt.cache.extract_page(pid);
        offload_full_page(
            &mut rt.host,
            &mut rt.cache,
            &mut rt.summaries,
            &k_page,
            &v_page,
        )?;
    }
    Ok(())
}

/// Uncompressed attention over the entire context, for exempt layers.
fn full_attention(
    host: &HostPool,
    cache: &DeviceCache,
    queries: &[Vec<f32>],
    n_kv: usize,
    group_size: usize,
) -> Result<Vec<Vec<f32>>, EngineError> {
    let per_kv: Vec<Result<Vec<Vec<f32>>, AttentionError>> = par::map_indexed(n_kv, |m| {
        let rows = gather_all_rows(host, cache, m);
        let row_refs: Vec<(&[f32], &[f32])> = rows.iter().map(|r| (r.key, r.value)).collect();
        (0..group_size)
            .map(|j| exact_attention(&queries[m * group_size + j], &row_refs))
            .collect()
    });
    let mut outputs = Vec::with_capacity(queries.len());
    for group in per_kv {
        outputs.extend(group?);
    }
    Ok(outputs)
}

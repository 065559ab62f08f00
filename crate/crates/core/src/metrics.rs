//! Run metrics, report building, and the harness entry points that tie
//! the engine, the synchronous reference, and the latency model together.
//!
//! Reports are deterministic: same trace bytes, config, and model
//! parameters produce byte-identical JSON and CSV.

use serde::Serialize;

use crate::config::EngineConfig;
use crate::engine::{Engine, EngineError, EngineRun, LayerRecord};
use crate::oracle::{OracleStepRecord, SyncEngine};
use crate::sim::{
    simulate_decode_step, ComputeModel, DecodeStepShape, DecodeStepSim, LinkModel, RecallShape,
    Timeline,
};
use crate::store::TransferStats;
use crate::trace::{trace_sha256, write_trace, Trace};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TransferTotals {
    pub sync: TransferStats,
    pub background: TransferStats,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SimTotals {
    pub total_exposed_us: f64,
    pub total_makespan_us: f64,
    pub overlap_window_us: f64,
}

/// One run's summary. Error and overlap fields compare against the
/// synchronous reference engine on the same trace.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub trace_sha256: String,
    pub n_steps: usize,
    pub n_layers: usize,
    pub config: EngineConfig,
    /// Fraction of KV heads corrected, averaged over decode steps `>= 1`
    /// and non-exempt layers (the step-0 bootstrap is structural, not a
    /// correction).
    pub correction_rate: f64,
    /// Mean Jaccard overlap between consumed selections and the
    /// reference's current-query selections.
    pub selection_jaccard_mean: f64,
    /// Max absolute difference of attention outputs vs the reference.
    pub output_max_abs_err: f64,
    pub transfer: TransferTotals,
    pub sim: SimTotals,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full harness output for one run.
pub struct RunArtifacts {
    pub metrics: MetricsReport,
    pub run: EngineRun,
    pub reference: Vec<OracleStepRecord>,
    pub timeline: Timeline,
    pub stats_csv: String,
}

fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let sa: std::collections::BTreeSet<u32> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<u32> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

fn max_abs_err(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let mut err = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            err = err.max((*x as f64 - *y as f64).abs());
        }
    }
    err
}

fn step_shape(cfg: &EngineConfig, record: &LayerRecord) -> DecodeStepShape {
    DecodeStepShape {
        sync_pages: record.sync_stats.pages_fetched as usize,
        background_pages: record.background_stats.pages_fetched as usize,
        recall: RecallShape::for_layout(&cfg.geometry(), cfg.spec.host_layout),
        streamed: true,
        correction_triggered: record.corrected.iter().any(|&c| c),
    }
}

/// Run the engine and the synchronous reference on a trace and assemble
/// the report, the run timeline, and the per-step stats CSV.
pub fn run_engine(
    trace: &Trace,
    cfg: &EngineConfig,
    link: &LinkModel,
    compute: &ComputeModel,
) -> Result<RunArtifacts, EngineError> {
    let run = Engine::run(trace, cfg)?;
    let reference = SyncEngine::run(trace, cfg);
    debug_assert_eq!(run.records.len(), reference.len());

    let mut correction_num = 0.0f64;
    let mut correction_den = 0.0f64;
    let mut jaccard_sum = 0.0f64;
    let mut jaccard_n = 0.0f64;
    let mut out_err = 0.0f64;
    let mut transfer = TransferTotals::default();
    let mut timeline = Timeline::default();
    let mut sims: Vec<DecodeStepSim> = Vec::with_capacity(run.records.len());
    let mut clock = 0.0f64;
    let mut stats_csv = String::from(
        "step,layer,exempt,corrected_kv_heads,sync_pages,sync_ops,sync_bytes,\
         bg_pages,bg_ops,bg_bytes,jaccard,max_abs_err,exposed_us,step_us\n",
    );

    for (record, oracle) in run.records.iter().zip(&reference) {
        let corrected = record.corrected.iter().filter(|&&c| c).count();
        if !record.exempt && record.step >= 1 {
            correction_num += corrected as f64 / record.corrected.len() as f64;
            correction_den += 1.0;
        }
        let mut row_jaccard = 1.0f64;
        if !record.exempt {
            let mut acc = 0.0;
            for (a, b) in record
                .selection_used
                .per_kv_head
                .iter()
                .zip(&oracle.selection.per_kv_head)
            {
                acc += jaccard(a, b);
            }
            row_jaccard = acc / record.selection_used.per_kv_head.len() as f64;
            jaccard_sum += acc;
            jaccard_n += record.selection_used.per_kv_head.len() as f64;
        }
        let err = max_abs_err(&record.outputs, &oracle.outputs);
        out_err = out_err.max(err);
        transfer.sync.merge(&record.sync_stats);
        transfer.background.merge(&record.background_stats);

        let sim = simulate_decode_step(&step_shape(cfg, record), link, compute, true);
        timeline.extend_shifted(
            &sim.timeline,
            clock,
            &format!("s{}.l{} ", record.step, record.layer),
        );
        clock += sim.step_sec;
        stats_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.3e},{:.3},{:.3}\n",
            record.step,
            record.layer,
            record.exempt,
            corrected,
            record.sync_stats.pages_fetched,
            record.sync_stats.copy_ops,
            record.sync_stats.bytes_moved,
            record.background_stats.pages_fetched,
            record.background_stats.copy_ops,
            record.background_stats.bytes_moved,
            row_jaccard,
            err,
            sim.exposed_sec * 1e6,
            sim.step_sec * 1e6,
        ));
        sims.push(sim);
    }

    let metrics = MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        trace_sha256: trace_sha256(&write_trace(trace)),
        n_steps: run.n_steps,
        n_layers: run.n_layers,
        config: cfg.clone(),
        correction_rate: if correction_den > 0.0 {
            correction_num / correction_den
        } else {
            0.0
        },
        selection_jaccard_mean: if jaccard_n > 0.0 {
            jaccard_sum / jaccard_n
        } else {
            1.0
        },
        output_max_abs_err: out_err,
        transfer,
        sim: SimTotals {
            total_exposed_us: sims.iter().map(|s| s.exposed_sec).sum::<f64>() * 1e6,
            total_makespan_us: clock * 1e6,
            overlap_window_us: compute.overlap_window_sec() * 1e6,
        },
    };
    Ok(RunArtifacts {
        metrics,
        run,
        reference,
        timeline,
        stats_csv,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonEntry {
    pub label: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub trace_sha256: String,
    pub runs: Vec<ComparisonEntry>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One summary row per config.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,mode,pooling,tau,host_layout,correction_rate,selection_jaccard,\
             output_max_abs_err,total_bytes,total_ops,total_pages,exposed_us,makespan_us\n",
        );
        for entry in &self.runs {
            let m = &entry.metrics;
            let total_bytes = m.transfer.sync.bytes_moved + m.transfer.background.bytes_moved;
            let total_ops = m.transfer.sync.copy_ops + m.transfer.background.copy_ops;
            let total_pages = m.transfer.sync.pages_fetched + m.transfer.background.pages_fetched;
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.3e},{},{},{},{:.3},{:.3}\n",
                entry.label,
                m.config.spec.mode,
                m.config.spec.pooling,
                m.config.spec.tau,
                m.config.spec.host_layout,
                m.correction_rate,
                m.selection_jaccard_mean,
                m.output_max_abs_err,
                total_bytes,
                total_ops,
                total_pages,
                m.sim.total_exposed_us,
                m.sim.total_makespan_us,
            ));
        }
        out
    }
}

/// Run several configs against the same trace, side by side.
pub fn compare_modes(
    trace: &Trace,
    configs: &[(String, EngineConfig)],
    link: &LinkModel,
    compute: &ComputeModel,
) -> Result<(ComparisonReport, Vec<RunArtifacts>), EngineError> {
    let mut runs = Vec::with_capacity(configs.len());
    let mut artifacts = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let art = run_engine(trace, cfg, link, compute)?;
        runs.push(ComparisonEntry {
            label: label.clone(),
            metrics: art.metrics.clone(),
        });
        artifacts.push(art);
    }
    Ok((
        ComparisonReport {
            schema_version: METRICS_SCHEMA_VERSION,
            trace_sha256: trace_sha256(&write_trace(trace)),
            runs,
        },
        artifacts,
    ))
}

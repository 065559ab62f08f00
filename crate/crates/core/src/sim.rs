//! Discrete-event model of recall transfer, layout conversion, and compute
//! overlap.
//!
//! All times are model outputs derived from configurable link/compute
//! parameters; none of them are measurements. One "page" here is one
//! per-head page block moving host to device. Its transfer time is
//! `page_bytes / bandwidth + per_op_latency * ops_per_page`; fragmented
//! layouts pay per copy operation. Conversion runs at a device-like
//! throughput. Streamed recall pipelines the two stages through two
//! staging buffers, so transfer of page `n + 1` proceeds while page `n`
//! converts.

use serde::{Deserialize, Serialize};

use crate::config::HostLayoutMode;
use crate::layout::{contiguous_runs, LayoutKind, PageGeometry};

/// Host-device link abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_bytes_per_sec: f64,
    pub per_op_latency_sec: f64,
}

impl Default for LinkModel {
    /// Approximate effective PCIe Gen4 figures; every number is a knob.
    fn default() -> Self {
        Self {
            bandwidth_bytes_per_sec: 25e9,
            per_op_latency_sec: 2e-6,
        }
    }
}

/// Per-layer compute costs and the on-device conversion throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    pub attention_time_sec: f64,
    pub ffn_time_sec: f64,
    pub qkv_proj_time_sec: f64,
    pub selection_time_sec: f64,
    pub conversion_throughput_bytes_per_sec: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            attention_time_sec: 60e-6,
            ffn_time_sec: 80e-6,
            qkv_proj_time_sec: 30e-6,
            selection_time_sec: 20e-6,
            conversion_throughput_bytes_per_sec: 800e9,
        }
    }
}

impl ComputeModel {
    /// The overlap window a background recall can hide inside: attention
    /// and FFN of this layer plus the next layer's QKV projections.
    pub fn overlap_window_sec(&self) -> f64 {
        self.attention_time_sec + self.ffn_time_sec + self.qkv_proj_time_sec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Transfer,
    Convert,
}

impl Lane {
    pub fn as_str(&self) -> &'static str {
        match self {
            Lane::Compute => "compute",
            Lane::Transfer => "transfer",
            Lane::Convert => "convert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub lane: Lane,
    pub label: String,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    pub makespan_sec: f64,
}

impl Timeline {
    fn push(&mut self, lane: Lane, label: String, start_sec: f64, end_sec: f64) {
        debug_assert!(end_sec >= start_sec);
        self.makespan_sec = self.makespan_sec.max(end_sec);
        self.events.push(TimelineEvent {
            lane,
            label,
            start_sec,
            end_sec,
        });
    }

    /// Append another timeline's events shifted by `offset_sec`.
    pub fn extend_shifted(&mut self, other: &Timeline, offset_sec: f64, prefix: &str) {
        for ev in &other.events {
            self.push(
                ev.lane,
                format!("{prefix}{}", ev.label),
                ev.start_sec + offset_sec,
                ev.end_sec + offset_sec,
            );
        }
    }

    /// True when no two events on the same lane overlap.
    pub fn lanes_disjoint(&self) -> bool {
        for lane in [Lane::Compute, Lane::Transfer, Lane::Convert] {
            let mut spans: Vec<(f64, f64)> = self
                .events
                .iter()
                .filter(|e| e.lane == lane)
                .map(|e| (e.start_sec, e.end_sec))
                .collect();
            spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in spans.windows(2) {
                if w[1].0 < w[0].1 - 1e-12 {
                    return false;
                }
            }
        }
        true
    }

    /// `lane,label,start_us,end_us` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lane,label,start_us,end_us\n");
        for ev in &self.events {
            out.push_str(&format!(
                "{},{},{:.3},{:.3}\n",
                ev.lane.as_str(),
                ev.label,
                ev.start_sec * 1e6,
                ev.end_sec * 1e6
            ));
        }
        out
    }
}

/// Geometry of the page blocks a recall plan moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallShape {
    pub page_bytes: usize,
    pub ops_per_page: usize,
}

impl RecallShape {
    /// Shape of one per-head page fetch under the given host layout.
    pub fn for_layout(geom: &PageGeometry, layout: HostLayoutMode) -> Self {
        let page_bytes = geom.head_block_bytes();
        let ops_per_page = match layout {
            HostLayoutMode::Hnd => contiguous_runs(LayoutKind::HndCombined, geom, 0).len(),
            HostLayoutMode::Nhd => 2 * contiguous_runs(LayoutKind::Nhd, geom, 0).len(),
        };
        Self {
            page_bytes,
            ops_per_page,
        }
    }

    pub fn transfer_time_sec(&self, link: &LinkModel) -> f64 {
        self.page_bytes as f64 / link.bandwidth_bytes_per_sec
            + link.per_op_latency_sec * self.ops_per_page as f64
    }

    pub fn convert_time_sec(&self, convert_throughput: f64) -> f64 {
        self.page_bytes as f64 / convert_throughput
    }
}

/// Simulate recalling `n_pages` page blocks, sequentially or through the
/// double-buffered pipeline.
///
/// Sequential makespan is `n * (T_x + T_c)`. Streamed start times obey the
/// two-buffer constraint (transfer `i` waits for conversion `i - 2`),
/// which for constant stage times lands on the classic two-stage pipeline
/// makespan `T_x + (n - 1) * max(T_x, T_c) + T_c`.
pub fn simulate_recall(
    n_pages: usize,
    shape: RecallShape,
    link: &LinkModel,
    convert_throughput: f64,
    streamed: bool,
) -> Timeline {
    let t_x = shape.transfer_time_sec(link);
    let t_c = shape.convert_time_sec(convert_throughput);
    let mut tl = Timeline::default();
    if n_pages == 0 {
        return tl;
    }
    if streamed {
        let mut x_end = vec![0.0f64; n_pages];
        let mut c_end = vec![0.0f64; n_pages];
        for i in 0..n_pages {
            let prev_x_end = if i > 0 { x_end[i - 1] } else { 0.0 };
            let buffer_free = if i >= 2 { c_end[i - 2] } else { 0.0 };
            let x_start = prev_x_end.max(buffer_free);
            x_end[i] = x_start + t_x;
            let prev_c_end = if i > 0 { c_end[i - 1] } else { 0.0 };
            let c_start = x_end[i].max(prev_c_end);
            c_end[i] = c_start + t_c;
            tl.push(Lane::Transfer, format!("xfer p{i}"), x_start, x_end[i]);
            tl.push(Lane::Convert, format!("convert p{i}"), c_start, c_end[i]);
        }
    } else {
        let mut t = 0.0f64;
        for i in 0..n_pages {
            tl.push(Lane::Transfer, format!("xfer p{i}"), t, t + t_x);
            tl.push(Lane::Convert, format!("convert p{i}"), t + t_x, t + t_x + t_c);
            t += t_x + t_c;
        }
    }
    tl
}

/// Retrieval work of one decode step, as fed to the step model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeStepShape {
    pub sync_pages: usize,
    pub background_pages: usize,
    pub recall: RecallShape,
    pub streamed: bool,
    /// Whether a synchronous selection pass precedes attention.
    pub correction_triggered: bool,
}

/// Step model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStepSim {
    pub timeline: Timeline,
    pub window_sec: f64,
    pub background_recall_sec: f64,
    pub exposed_sec: f64,
    pub step_sec: f64,
}

/// Simulate one layer's decode step.
///
/// With overlap on, the background recall occupies the window from
/// attention start through the next layer's QKV projections; only
/// `max(0, recall - window)` is exposed. Synchronous correction work
/// (selection plus recall for corrected heads) prepends to the critical
/// path. Background selection is assumed hidden; only recall can exceed
/// the window. With overlap off, selection and every recall serialize
/// ahead of compute and the whole recall time is exposed.
pub fn simulate_decode_step(
    shape: &DecodeStepShape,
    link: &LinkModel,
    compute: &ComputeModel,
    overlap_enabled: bool,
) -> DecodeStepSim {
    let window = compute.overlap_window_sec();
    let mut tl = Timeline::default();
    let mut t = 0.0f64;
    let sync_recall = simulate_recall(
        shape.sync_pages,
        shape.recall,
        link,
        compute.conversion_throughput_bytes_per_sec,
        shape.streamed,
    );
    let bg_recall = simulate_recall(
        shape.background_pages,
        shape.recall,
        link,
        compute.conversion_throughput_bytes_per_sec,
        shape.streamed,
    );

    if !overlap_enabled {
        // Serial baseline: selection, all recall, then compute.
        tl.push(Lane::Compute, "selection".into(), t, t + compute.selection_time_sec);
        t += compute.selection_time_sec;
        let all_recall = simulate_recall(
            shape.sync_pages + shape.background_pages,
            shape.recall,
            link,
            compute.conversion_throughput_bytes_per_sec,
            shape.streamed,
        );
        tl.extend_shifted(&all_recall, t, "");
        t += all_recall.makespan_sec;
        for (label, dur) in [
            ("attention", compute.attention_time_sec),
            ("ffn", compute.ffn_time_sec),
            ("qkv_proj", compute.qkv_proj_time_sec),
        ] {
            tl.push(Lane::Compute, label.into(), t, t + dur);
            t += dur;
        }
        return DecodeStepSim {
            window_sec: window,
            background_recall_sec: all_recall.makespan_sec,
            exposed_sec: all_recall.makespan_sec,
            step_sec: tl.makespan_sec,
            timeline: tl,
        };
    }

    if shape.correction_triggered {
        tl.push(Lane::Compute, "selection".into(), t, t + compute.selection_time_sec);
        t += compute.selection_time_sec;
        tl.extend_shifted(&sync_recall, t, "sync ");
        t += sync_recall.makespan_sec;
    }
    let window_start = t;
    for (label, dur) in [
        ("attention", compute.attention_time_sec),
        ("ffn", compute.ffn_time_sec),
        ("qkv_proj", compute.qkv_proj_time_sec),
    ] {
        tl.push(Lane::Compute, label.into(), t, t + dur);
        t += dur;
    }
    tl.extend_shifted(&bg_recall, window_start, "bg ");
    let exposed = (bg_recall.makespan_sec - window).max(0.0);
    DecodeStepSim {
        window_sec: window,
        background_recall_sec: bg_recall.makespan_sec,
        exposed_sec: exposed,
        step_sec: window_start + window + exposed,
        timeline: tl,
    }
}

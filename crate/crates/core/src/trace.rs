//! Binary decode-trace format and the synthetic trace generator.
//!
//! A trace carries post-position-embedding q/k/v values: a prefill block
//! of K/V rows per layer, then per-step, per-layer records of the decode
//! queries and the new token's K/V rows. Everything is little-endian f32
//! behind a fixed header; counts declared in the header must match the
//! payload exactly.
//!
//! The generator drives the query stream through a similarity schedule:
//! each step's query is `c * u_prev + sqrt(1 - c^2)/sqrt(d) * noise`,
//! renormalized, which lands the expected adjacent-step cosine at the
//! target `c`. Achieved per-step cosines (averaged over heads and layers)
//! are measured post hoc and returned alongside the trace.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TRACE_MAGIC: [u8; 4] = *b"FKVT";
pub const TRACE_VERSION: u32 = 1;
/// Element kind 0: little-endian f32. Other kinds are reserved.
pub const ELEM_KIND_F32: u32 = 0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic; not a trace file")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported element kind {0}")]
    UnsupportedElemKind(u32),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("payload length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid similarity schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub n_layers: u32,
    pub n_qo: u32,
    pub n_kv: u32,
    pub d: u32,
    pub elem_kind: u32,
    pub prefill_len: u32,
    pub n_steps: u32,
}

/// Prefill K/V for one layer: one row of `n_kv * d` values per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillLayer {
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// One decode step's record for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    /// Query per attention head, `n_qo` rows of `d`.
    pub q: Vec<Vec<f32>>,
    /// New token's K row, `n_kv * d`.
    pub k: Vec<f32>,
    /// New token's V row, `n_kv * d`.
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub layers: Vec<LayerStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub prefill: Vec<PrefillLayer>,
    pub steps: Vec<StepData>,
}

impl Trace {
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.header.n_qo as usize,
            self.header.n_kv as usize,
            self.header.d as usize,
        )
    }

    /// Total context length after all decode steps.
    pub fn final_len(&self) -> usize {
        (self.header.prefill_len + self.header.n_steps) as usize
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_trace(trace: &Trace) -> Vec<u8> {
    let h = &trace.header;
    let mut out = Vec::new();
    out.extend_from_slice(&TRACE_MAGIC);
    for field in [
        TRACE_VERSION,
        h.n_layers,
        h.n_qo,
        h.n_kv,
        h.d,
        h.elem_kind,
        h.prefill_len,
        h.n_steps,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for layer in &trace.prefill {
        for row in &layer.k {
            push_f32s(&mut out, row);
        }
        for row in &layer.v {
            push_f32s(&mut out, row);
        }
    }
    for step in &trace.steps {
        for layer in &step.layers {
            for row in &layer.q {
                push_f32s(&mut out, row);
            }
            push_f32s(&mut out, &layer.k);
            push_f32s(&mut out, &layer.v);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take_u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn take_f32_row(&mut self, n: usize) -> Vec<f32> {
        let mut row = Vec::with_capacity(n);
        for _ in 0..n {
            row.push(f32::from_le_bytes(
                self.bytes[self.pos..self.pos + 4].try_into().unwrap(),
            ));
            self.pos += 4;
        }
        row
    }
}

pub fn read_trace(bytes: &[u8]) -> Result<Trace, TraceError> {
    const HEADER_BYTES: usize = 4 + 8 * 4;
    if bytes.len() < HEADER_BYTES {
        return Err(TraceError::BadMagic);
    }
    if bytes[..4] != TRACE_MAGIC {
        return Err(TraceError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.take_u32();
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let header = TraceHeader {
        n_layers: r.take_u32(),
        n_qo: r.take_u32(),
        n_kv: r.take_u32(),
        d: r.take_u32(),
        elem_kind: r.take_u32(),
        prefill_len: r.take_u32(),
        n_steps: r.take_u32(),
    };
    if header.elem_kind != ELEM_KIND_F32 {
        return Err(TraceError::UnsupportedElemKind(header.elem_kind));
    }
    for (name, v) in [
        ("n_layers", header.n_layers),
        ("n_qo", header.n_qo),
        ("n_kv", header.n_kv),
        ("d", header.d),
    ] {
        if v == 0 {
            return Err(TraceError::BadHeader(format!("{name} must be nonzero")));
        }
    }
    let (nl, nq, nk, d) = (
        header.n_layers as usize,
        header.n_qo as usize,
        header.n_kv as usize,
        header.d as usize,
    );
    let prefill_floats = nl * header.prefill_len as usize * nk * d * 2;
    let step_floats = header.n_steps as usize * nl * (nq * d + 2 * nk * d);
    let expected = HEADER_BYTES + 4 * (prefill_floats + step_floats);
    if bytes.len() != expected {
        return Err(TraceError::LengthMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let mut prefill = Vec::with_capacity(nl);
    for _ in 0..nl {
        let k = (0..header.prefill_len)
            .map(|_| r.take_f32_row(nk * d))
            .collect();
        let v = (0..header.prefill_len)
            .map(|_| r.take_f32_row(nk * d))
            .collect();
        prefill.push(PrefillLayer { k, v });
    }
    let mut steps = Vec::with_capacity(header.n_steps as usize);
    for _ in 0..header.n_steps {
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let q = (0..nq).map(|_| r.take_f32_row(d)).collect();
            let k = r.take_f32_row(nk * d);
            let v = r.take_f32_row(nk * d);
            layers.push(LayerStep { q, k, v });
        }
        steps.push(StepData { layers });
    }
    Ok(Trace {
        header,
        prefill,
        steps,
    })
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    Ok(std::fs::write(path, write_trace(trace))?)
}

pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    read_trace(&std::fs::read(path)?)
}

pub fn trace_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Per-step target for the adjacent-step query cosine. Step indices start
/// at 1 (step 0 has no predecessor).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySchedule {
    base: f32,
    overrides: BTreeMap<usize, f32>,
}

impl SimilaritySchedule {
    pub fn constant(base: f32) -> Result<Self, TraceError> {
        Self::new(base, BTreeMap::new())
    }

    pub fn new(base: f32, overrides: BTreeMap<usize, f32>) -> Result<Self, TraceError> {
        for &c in std::iter::once(&base).chain(overrides.values()) {
            if !(-1.0..=1.0).contains(&c) || !c.is_finite() {
                return Err(TraceError::InvalidSchedule(format!(
                    "target {c} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { base, overrides })
    }

    pub fn target(&self, step: usize) -> f32 {
        *self.overrides.get(&step).unwrap_or(&self.base)
    }

    pub fn overrides(&self) -> &BTreeMap<usize, f32> {
        &self.overrides
    }
}

#[derive(Debug, Clone)]
pub struct TraceGenSpec {
    pub seed: u64,
    pub n_layers: usize,
    pub n_qo: usize,
    pub n_kv: usize,
    pub d: usize,
    pub prefill_len: usize,
    pub n_steps: usize,
    pub schedule: SimilaritySchedule,
}

#[derive(Debug, Clone)]
pub struct GeneratedTrace {
    pub trace: Trace,
    /// Achieved cosine per step `i >= 1`, averaged over heads and layers;
    /// index 0 corresponds to step 1.
    pub achieved_similarity: Vec<f32>,
}

fn normal_row(rng: &mut ChaCha20Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f32]) {
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Generate a trace whose adjacent-step query cosines follow the schedule.
pub fn generate_synthetic_trace(spec: &TraceGenSpec) -> Result<GeneratedTrace, TraceError> {
    if spec.n_steps == 0 {
        return Err(TraceError::InvalidSchedule(
            "trace needs at least one decode step".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let kv_row = spec.n_kv * d;
    let prefill: Vec<PrefillLayer> = (0..spec.n_layers)
        .map(|_| PrefillLayer {
            k: (0..spec.prefill_len).map(|_| normal_row(&mut rng, kv_row)).collect(),
            v: (0..spec.prefill_len).map(|_| normal_row(&mut rng, kv_row)).collect(),
        })
        .collect();

    // unit queries per layer per head, carried across steps
    let mut units: Vec<Vec<Vec<f32>>> = (0..spec.n_layers)
        .map(|_| {
            (0..spec.n_qo)
                .map(|_| {
                    let mut u = normal_row(&mut rng, d);
                    normalize(&mut u);
                    u
                })
                .collect()
        })
        .collect();

    let mut steps = Vec::with_capacity(spec.n_steps);
    let mut achieved = Vec::with_capacity(spec.n_steps.saturating_sub(1));
    for step in 0..spec.n_steps {
        let mut cos_sum = 0.0f64;
        let mut layers = Vec::with_capacity(spec.n_layers);
        for layer_units in units.iter_mut() {
            let mut q_rows = Vec::with_capacity(spec.n_qo);
            for u in layer_units.iter_mut() {
                if step > 0 {
                    let c = spec.schedule.target(step);
                    let next = if c >= 1.0 {
                        u.clone()
                    } else if c <= -1.0 {
                        u.iter().map(|x| -x).collect()
                    } else {
                        let beta = (1.0 - c * c).sqrt() / (d as f32).sqrt();
                        let noise = normal_row(&mut rng, d);
                        let mut q: Vec<f32> = u
                            .iter()
                            .zip(&noise)
                            .map(|(&base, &n)| c * base + beta * n)
                            .collect();
                        normalize(&mut q);
                        q
                    };
                    let dot: f32 = next.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                    cos_sum += dot as f64;
                    *u = next;
                }
                q_rows.push(u.clone());
            }
            layers.push(LayerStep {
                q: q_rows,
                k: normal_row(&mut rng, kv_row),
                v: normal_row(&mut rng, kv_row),
            });
        }
        if step > 0 {
            let mean = (cos_sum / (spec.n_layers * spec.n_qo) as f64) as f32;
            let target = spec.schedule.target(step);
            if (mean - target).abs() > 0.05 {
                log::warn!(
                    "step {step}: achieved similarity {mean:.3} misses target {target:.3} by more than 0.05"
                );
            }
            achieved.push(mean);
        }
        steps.push(StepData { layers });
    }

    let trace = Trace {
        header: TraceHeader {
            n_layers: spec.n_layers as u32,
            n_qo: spec.n_qo as u32,
            n_kv: spec.n_kv as u32,
            d: d as u32,
            elem_kind: ELEM_KIND_F32,
            prefill_len: spec.prefill_len as u32,
            n_steps: spec.n_steps as u32,
        },
        prefill,
        steps,
    };
    Ok(GeneratedTrace {
        trace,
        achieved_similarity: achieved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_spec(seed: u64, schedule: SimilaritySchedule) -> TraceGenSpec {
        TraceGenSpec {
            seed,
            n_layers: 2,
            n_qo: 8,
            n_kv: 2,
            d: 64,
            prefill_len: 40,
            n_steps: 20,
            schedule,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let spec = gen_spec(42, SimilaritySchedule::constant(0.9).unwrap());
        let trace = generate_synthetic_trace(&spec).unwrap().trace;
        let bytes = write_trace(&trace);
        let back = read_trace(&bytes).unwrap();
        assert_eq!(trace, back);
        assert_eq!(bytes, write_trace(&back));
    }

    #[test]
    fn target_one_freezes_the_queries() {
        let spec = gen_spec(7, SimilaritySchedule::constant(1.0).unwrap());
        let out = generate_synthetic_trace(&spec).unwrap();
        let first = &out.trace.steps[0].layers[0].q;
        for step in &out.trace.steps[1..] {
            assert_eq!(&step.layers[0].q, first);
        }
        assert!(out.achieved_similarity.iter().all(|&c| (c - 1.0).abs() < 1e-6));
    }

    #[test]
    fn target_zero_draws_fresh_queries() {
        let spec = gen_spec(7, SimilaritySchedule::constant(0.0).unwrap());
        let out = generate_synthetic_trace(&spec).unwrap();
        // mean achieved cosine should hover near zero
        let mean: f32 =
            out.achieved_similarity.iter().sum::<f32>() / out.achieved_similarity.len() as f32;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert_ne!(out.trace.steps[0].layers[0].q, out.trace.steps[1].layers[0].q);
    }

    #[test]
    fn schedule_is_tracked_within_tolerance() {
        let mut overrides = BTreeMap::new();
        overrides.insert(11usize, 0.5f32);
        let spec = gen_spec(123, SimilaritySchedule::new(0.95, overrides).unwrap());
        let out = generate_synthetic_trace(&spec).unwrap();
        for (i, &got) in out.achieved_similarity.iter().enumerate() {
            let step = i + 1;
            let want = spec.schedule.target(step);
            assert!(
                (got - want).abs() <= 0.05,
                "step {step}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn bad_magic_and_corruption_are_rejected() {
        let spec = gen_spec(1, SimilaritySchedule::constant(0.9).unwrap());
        let mut bytes = write_trace(&generate_synthetic_trace(&spec).unwrap().trace);
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(read_trace(&wrong_magic), Err(TraceError::BadMagic)));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            read_trace(&wrong_version),
            Err(TraceError::UnsupportedVersion(_))
        ));
        let mut wrong_kind = bytes.clone();
        wrong_kind[4 + 5 * 4] = 7; // elem_kind field
        assert!(matches!(
            read_trace(&wrong_kind),
            Err(TraceError::UnsupportedElemKind(7))
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_trace(&bytes),
            Err(TraceError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn schedule_targets_must_be_cosines() {
        assert!(SimilaritySchedule::constant(1.5).is_err());
        let mut overrides = BTreeMap::new();
        overrides.insert(3usize, -2.0f32);
        assert!(SimilaritySchedule::new(0.9, overrides).is_err());
    }
}

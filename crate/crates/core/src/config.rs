//! Engine configuration: model dimensions, cache budget, and the
//! speculation/correction knobs, validated into one immutable
//! [`EngineConfig`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::PageGeometry;

/// Head counts and per-page geometry of the model being served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Attention (query/output) heads.
    pub n_qo: usize,
    /// KV heads; `n_qo` must be a multiple of this.
    pub n_kv: usize,
    /// Head dimension.
    pub d: usize,
    /// Tokens per page.
    pub page_size: usize,
    /// Modeled bytes per stored element, 2 or 4.
    pub elem_bytes: usize,
}

impl ModelDims {
    /// Attention heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_qo / self.n_kv
    }
}

/// Token budget split: `budget = sink + window + selectable pages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub budget_tokens: usize,
    pub sink_tokens: usize,
    pub window_tokens: usize,
}

/// Engine behavior modes. `AlwaysCorrect` re-selects synchronously every
/// step for every head; `NeverCorrect` runs on pure step-wise reuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecMode {
    Speculative,
    AlwaysCorrect,
    NeverCorrect,
}

impl fmt::Display for SpecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpecMode::Speculative => "speculative",
            SpecMode::AlwaysCorrect => "always_correct",
            SpecMode::NeverCorrect => "never_correct",
        };
        f.write_str(s)
    }
}

/// Group-consistent page score pooling variants.
///
/// The suffix says what gets pooled across the group: `S` the softmaxed
/// page scores, `Qk` the raw page scores, `Q` the query vectors before a
/// single scoring pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMethod {
    MeanS,
    MaxS,
    MeanQ,
    MaxQ,
    MeanQk,
    MaxQk,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 6] = [
        PoolingMethod::MeanS,
        PoolingMethod::MaxS,
        PoolingMethod::MeanQ,
        PoolingMethod::MaxQ,
        PoolingMethod::MeanQk,
        PoolingMethod::MaxQk,
    ];
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PoolingMethod::MeanS => "MeanS",
            PoolingMethod::MaxS => "MaxS",
            PoolingMethod::MeanQ => "MeanQ",
            PoolingMethod::MaxQ => "MaxQ",
            PoolingMethod::MeanQk => "MeanQK",
            PoolingMethod::MaxQk => "MaxQK",
        };
        f.write_str(s)
    }
}

/// How per-head query similarities are unified per group before the
/// correction threshold test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityPooling {
    Mean,
    Max,
}

/// Host pool layout mode. `Hnd` is the default; `Nhd` exists only to
/// measure the fragmentation cost of a token-major host layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostLayoutMode {
    Hnd,
    Nhd,
}

impl fmt::Display for HostLayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HostLayoutMode::Hnd => "hnd",
            HostLayoutMode::Nhd => "nhd",
        })
    }
}

/// Speculation and correction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    /// Correction threshold in `[0, 1]`. `tau <= 0` disables correction
    /// entirely; `tau >= 1` corrects every step (no speculation).
    pub tau: f32,
    pub mode: SpecMode,
    pub pooling: PoolingMethod,
    pub similarity_pooling: SimilarityPooling,
    /// Leave the first layer uncompressed: it runs full attention and
    /// never speculates.
    pub first_layer_exempt: bool,
    pub host_layout: HostLayoutMode,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            mode: SpecMode::Speculative,
            pooling: PoolingMethod::MeanS,
            similarity_pooling: SimilarityPooling::Mean,
            first_layer_exempt: true,
            host_layout: HostLayoutMode::Hnd,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {}", violations.join("; "))]
    Invalid { violations: Vec<String> },
    #[error("config file parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validated configuration with derived quantities precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub dims: ModelDims,
    pub budget: BudgetConfig,
    pub spec: SpecConfig,
    /// `(budget - sink - window) / page_size`.
    pub selectable_pages: usize,
    /// Sink region size in pages.
    pub sink_pages: usize,
    /// Bytes of one combined host page under `elem_bytes` accounting.
    pub combined_page_bytes: usize,
}

impl EngineConfig {
    pub fn geometry(&self) -> PageGeometry {
        PageGeometry {
            page_size: self.dims.page_size,
            n_kv: self.dims.n_kv,
            head_dim: self.dims.d,
            elem_bytes: self.dims.elem_bytes,
        }
    }
}

/// Check every invariant and derive the selectable-page capacity. All
/// violations are reported together, each naming its constraint.
pub fn validate_config(
    dims: ModelDims,
    budget: BudgetConfig,
    spec: SpecConfig,
) -> Result<EngineConfig, ConfigError> {
    let mut violations = Vec::new();
    if dims.n_kv == 0 {
        violations.push("n_kv > 0".to_string());
    } else if !dims.n_qo.is_multiple_of(dims.n_kv) {
        violations.push(format!(
            "n_qo mod n_kv == 0 (got n_qo={}, n_kv={})",
            dims.n_qo, dims.n_kv
        ));
    }
    if dims.n_qo == 0 {
        violations.push("n_qo > 0".to_string());
    }
    if dims.d == 0 {
        violations.push("d > 0".to_string());
    }
    if dims.page_size == 0 {
        violations.push("page_size > 0".to_string());
    }
    if dims.elem_bytes != 2 && dims.elem_bytes != 4 {
        violations.push(format!("elem_bytes in {{2, 4}} (got {})", dims.elem_bytes));
    }
    let b = budget.budget_tokens;
    let s = budget.sink_tokens;
    let w = budget.window_tokens;
    if b < s + w {
        violations.push(format!("B >= S + W (got B={b}, S={s}, W={w})"));
    }
    if dims.page_size > 0 {
        if !s.is_multiple_of(dims.page_size) {
            violations.push(format!("S mod page_size == 0 (got S={s})"));
        }
        if !w.is_multiple_of(dims.page_size) {
            violations.push(format!("W mod page_size == 0 (got W={w})"));
        }
        if b >= s + w && !(b - s - w).is_multiple_of(dims.page_size) {
            violations.push(format!("(B - S - W) mod page_size == 0 (got {})", b - s - w));
        }
    }
    if !(0.0..=1.0).contains(&spec.tau) {
        violations.push(format!("tau in [0, 1] (got {})", spec.tau));
    }
    if !violations.is_empty() {
        return Err(ConfigError::Invalid { violations });
    }
    let selectable_pages = (b - s - w) / dims.page_size;
    let combined_page_bytes = 2 * dims.page_size * dims.d * dims.n_kv * dims.elem_bytes;
    Ok(EngineConfig {
        dims,
        budget,
        spec,
        selectable_pages,
        sink_pages: s / dims.page_size,
        combined_page_bytes,
    })
}

/// The raw key/value pairs of a config file, before dimension defaults from
/// a trace header are folded in.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "n_qo",
    "n_kv",
    "d",
    "page_size",
    "elem_bytes",
    "budget_tokens",
    "sink_tokens",
    "window_tokens",
    "tau",
    "mode",
    "pooling",
    "similarity_pooling",
    "first_layer_exempt",
    "host_layout",
    "bandwidth_gbps",
    "per_op_latency_us",
    "convert_throughput_gbps",
    "attention_time_us",
    "ffn_time_us",
    "qkv_proj_time_us",
    "selection_time_us",
];

impl RawConfig {
    /// Parse flat `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Build and validate an [`EngineConfig`]. `trace_dims`, when present,
    /// supplies `n_qo`/`n_kv`/`d` defaults; explicit keys must agree with it.
    pub fn into_engine_config(
        &self,
        trace_dims: Option<(usize, usize, usize)>,
    ) -> Result<EngineConfig, ConfigError> {
        let mut violations = Vec::new();
        let mut dim = |key: &str, from_trace: Option<usize>| -> Result<usize, ConfigError> {
            let explicit: Option<usize> = self.get_parsed(key)?;
            match (explicit, from_trace) {
                (Some(e), Some(t)) if e != t => {
                    violations.push(format!("{key}={e} disagrees with trace ({t})"));
                    Ok(t)
                }
                (Some(e), _) => Ok(e),
                (None, Some(t)) => Ok(t),
                (None, None) => {
                    violations.push(format!("{key} is required"));
                    Ok(1)
                }
            }
        };
        let dims = ModelDims {
            n_qo: dim("n_qo", trace_dims.map(|d| d.0))?,
            n_kv: dim("n_kv", trace_dims.map(|d| d.1))?,
            d: dim("d", trace_dims.map(|d| d.2))?,
            page_size: self.get_parsed("page_size")?.unwrap_or(32),
            elem_bytes: self.get_parsed("elem_bytes")?.unwrap_or(4),
        };
        let budget = BudgetConfig {
            budget_tokens: self.get_parsed("budget_tokens")?.unwrap_or(2048),
            sink_tokens: self.get_parsed("sink_tokens")?.unwrap_or(512),
            window_tokens: self.get_parsed("window_tokens")?.unwrap_or(512),
        };
        let defaults = SpecConfig::default();
        let spec = SpecConfig {
            tau: self.get_parsed("tau")?.unwrap_or(defaults.tau),
            mode: match self.entries.get("mode").map(String::as_str) {
                None => defaults.mode,
                Some("speculative") => SpecMode::Speculative,
                Some("always_correct") => SpecMode::AlwaysCorrect,
                Some("never_correct") => SpecMode::NeverCorrect,
                Some(other) => {
                    violations.push(format!("mode must be speculative|always_correct|never_correct (got {other})"));
                    defaults.mode
                }
            },
            pooling: match self.entries.get("pooling") {
                None => defaults.pooling,
                Some(name) => match parse_pooling(name) {
                    Some(p) => p,
                    None => {
                        violations.push(format!(
                            "pooling must be one of MeanS|MaxS|MeanQ|MaxQ|MeanQK|MaxQK (got {name})"
                        ));
                        defaults.pooling
                    }
                },
            },
            similarity_pooling: match self.entries.get("similarity_pooling").map(String::as_str) {
                None => defaults.similarity_pooling,
                Some("mean") => SimilarityPooling::Mean,
                Some("max") => SimilarityPooling::Max,
                Some(other) => {
                    violations.push(format!("similarity_pooling must be mean|max (got {other})"));
                    defaults.similarity_pooling
                }
            },
            first_layer_exempt: self
                .get_parsed("first_layer_exempt")?
                .unwrap_or(defaults.first_layer_exempt),
            host_layout: match self.entries.get("host_layout").map(String::as_str) {
                None => defaults.host_layout,
                Some("hnd") => HostLayoutMode::Hnd,
                Some("nhd") => HostLayoutMode::Nhd,
                Some(other) => {
                    violations.push(format!("host_layout must be hnd|nhd (got {other})"));
                    defaults.host_layout
                }
            },
        };
        if !violations.is_empty() {
            return Err(ConfigError::Invalid { violations });
        }
        validate_config(dims, budget, spec)
    }
}

impl RawConfig {
    /// Link model from `bandwidth_gbps` / `per_op_latency_us`, defaults
    /// otherwise.
    pub fn link_model(&self) -> Result<crate::sim::LinkModel, ConfigError> {
        let defaults = crate::sim::LinkModel::default();
        Ok(crate::sim::LinkModel {
            bandwidth_bytes_per_sec: self
                .get_parsed::<f64>("bandwidth_gbps")?
                .map_or(defaults.bandwidth_bytes_per_sec, |g| g * 1e9),
            per_op_latency_sec: self
                .get_parsed::<f64>("per_op_latency_us")?
                .map_or(defaults.per_op_latency_sec, |us| us * 1e-6),
        })
    }

    /// Compute model from the `*_time_us` / `convert_throughput_gbps`
    /// keys, defaults otherwise.
    pub fn compute_model(&self) -> Result<crate::sim::ComputeModel, ConfigError> {
        let defaults = crate::sim::ComputeModel::default();
        let time = |key: &str, default: f64| -> Result<f64, ConfigError> {
            Ok(self.get_parsed::<f64>(key)?.map_or(default, |us| us * 1e-6))
        };
        Ok(crate::sim::ComputeModel {
            attention_time_sec: time("attention_time_us", defaults.attention_time_sec)?,
            ffn_time_sec: time("ffn_time_us", defaults.ffn_time_sec)?,
            qkv_proj_time_sec: time("qkv_proj_time_us", defaults.qkv_proj_time_sec)?,
            selection_time_sec: time("selection_time_us", defaults.selection_time_sec)?,
            conversion_throughput_bytes_per_sec: self
                .get_parsed::<f64>("convert_throughput_gbps")?
                .map_or(defaults.conversion_throughput_bytes_per_sec, |g| g * 1e9),
        })
    }
}

pub fn parse_pooling(name: &str) -> Option<PoolingMethod> {
    match name.to_ascii_lowercase().as_str() {
        "means" => Some(PoolingMethod::MeanS),
        "maxs" => Some(PoolingMethod::MaxS),
        "meanq" => Some(PoolingMethod::MeanQ),
        "maxq" => Some(PoolingMethod::MaxQ),
        "meanqk" => Some(PoolingMethod::MeanQk),
        "maxqk" => Some(PoolingMethod::MaxQk),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            n_qo: 32,
            n_kv: 8,
            d: 128,
            page_size: 32,
            elem_bytes: 4,
        }
    }

    fn budget() -> BudgetConfig {
        BudgetConfig {
            budget_tokens: 2048,
            sink_tokens: 512,
            window_tokens: 512,
        }
    }

    #[test]
    fn reference_config_validates() {
        let cfg = validate_config(dims(), budget(), SpecConfig::default()).unwrap();
        assert_eq!(cfg.selectable_pages, 32);
        assert_eq!(cfg.sink_pages, 16);
        assert_eq!(cfg.dims.group_size(), 4);
    }

    #[test]
    fn group_divisibility_violation_is_named() {
        let bad = ModelDims {
            n_qo: 7,
            n_kv: 2,
            ..dims()
        };
        let err = validate_config(bad, budget(), SpecConfig::default()).unwrap_err();
        match err {
            ConfigError::Invalid { violations } => {
                assert!(violations.iter().any(|v| v.contains("n_qo mod n_kv")));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn budget_must_cover_sink_and_window() {
        let bad = BudgetConfig {
            budget_tokens: 512,
            sink_tokens: 512,
            window_tokens: 512,
        };
        let err = validate_config(dims(), bad, SpecConfig::default()).unwrap_err();
        match err {
            ConfigError::Invalid { violations } => {
                assert!(violations.iter().any(|v| v.contains("B >= S + W")));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn budget_identity_holds_for_validated_configs() {
        for (b, s, w, p) in [
            (2048, 512, 512, 32),
            (1024, 0, 0, 16),
            (96, 32, 64, 32),
            (640, 128, 256, 64),
        ] {
            let d = ModelDims {
                n_qo: 8,
                n_kv: 2,
                d: 16,
                page_size: p,
                elem_bytes: 4,
            };
            let bcfg = BudgetConfig {
                budget_tokens: b,
                sink_tokens: s,
                window_tokens: w,
            };
            let cfg = validate_config(d, bcfg, SpecConfig::default()).unwrap();
            assert_eq!(s + w + cfg.selectable_pages * p, b);
        }
    }

    #[test]
    fn key_value_parsing_round_trips() {
        let text = "\n# comment\npage_size = 16\nbudget_tokens=128\nsink_tokens=16\n\
                    window_tokens=16\ntau=0.9\nmode=never_correct\npooling=MaxQK\n";
        let raw = RawConfig::parse(text).unwrap();
        let cfg = raw.into_engine_config(Some((8, 2, 64))).unwrap();
        assert_eq!(cfg.dims.page_size, 16);
        assert_eq!(cfg.budget.budget_tokens, 128);
        assert_eq!(cfg.spec.mode, SpecMode::NeverCorrect);
        assert_eq!(cfg.spec.pooling, PoolingMethod::MaxQk);
        assert_eq!(cfg.selectable_pages, 6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RawConfig::parse("page_sise=16"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn trace_dims_conflict_is_reported() {
        let raw = RawConfig::parse("n_qo=16\npage_size=8\nbudget_tokens=64\nsink_tokens=8\nwindow_tokens=8").unwrap();
        assert!(raw.into_engine_config(Some((8, 2, 64))).is_err());
    }
}

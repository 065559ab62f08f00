//! Tiered paged KV-cache retrieval engine.
//!
//! The host keeps the complete KV cache as combined head-major (`HND`)
//! pages; the device keeps a fixed budget: pinned sink pages, the recent
//! token window, and per-KV-head slots for recalled pages chosen by
//! min-max page summaries with group-consistent score pooling. Selection
//! and recall run speculatively one step ahead on the previous step's
//! queries, with per-head synchronous correction whenever the pooled
//! adjacent-step query similarity drops below a threshold. Recall streams
//! through two staging buffers so transfer and layout conversion overlap.
//!
//! A trace-driven driver replays recorded (or synthetic) decode traces,
//! compares every run against an independent synchronous reference
//! engine, and a discrete-event model quantifies transfer/compute overlap
//! for configurable link parameters.
//!
//! Scoring and attention parallelize across KV heads through rayon when
//! the `parallel` feature (default) is enabled; the sequential fallback is
//! bit-identical.

pub mod attention;
pub mod config;
pub mod engine;
pub mod layout;
pub mod metrics;
pub mod oracle;
mod par;
pub mod selection;
pub mod sim;
pub mod speculation;
pub mod store;
pub mod trace;

pub use config::{
    validate_config, BudgetConfig, ConfigError, EngineConfig, HostLayoutMode, ModelDims,
    PoolingMethod, RawConfig, SimilarityPooling, SpecConfig, SpecMode,
};
pub use engine::{Engine, EngineError, EngineRun};
pub use metrics::{compare_modes, run_engine, MetricsReport, RunArtifacts};
pub use trace::{
    generate_synthetic_trace, load_trace, read_trace, save_trace, write_trace, SimilaritySchedule,
    Trace, TraceError, TraceGenSpec,
};

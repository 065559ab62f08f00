//! `kvtier` command line: generate synthetic decode traces, replay them
//! through the engine, compare configs side by side, and run latency
//! what-ifs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! inconsistent trace/config), 3 runtime invariant violation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kvtier::config::{HostLayoutMode, RawConfig};
use kvtier::engine::EngineError;
use kvtier::metrics::{compare_modes, run_engine};
use kvtier::sim::{simulate_recall, ComputeModel, LinkModel, RecallShape};
use kvtier::speculation::SpecError;
use kvtier::trace::{
    generate_synthetic_trace, load_trace, save_trace, SimilaritySchedule, TraceGenSpec,
};

#[derive(Parser)]
#[command(name = "kvtier", version, about = "Tiered paged KV retrieval engine harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic decode trace with a similarity schedule.
    Gen(GenArgs),
    /// Replay a trace through the engine and write metrics artifacts.
    Run(RunArgs),
    /// Run several configs against one trace, side by side.
    Compare(CompareArgs),
    /// Latency-only recall what-ifs from the link model.
    Sim(SimArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode steps to generate.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Prefill context length in tokens.
    #[arg(long, default_value_t = 768)]
    prefill: usize,
    /// Trace dimensions as `n_layers,n_qo,n_kv,head_dim`.
    #[arg(long, default_value = "2,8,2,64")]
    dims: String,
    /// Base adjacent-step query similarity target.
    #[arg(long, default_value_t = 0.95)]
    similarity: f32,
    /// Per-step overrides, `STEP=TARGET`, repeatable.
    #[arg(long = "dip", value_name = "STEP=TARGET")]
    dips: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's mode (speculative|always_correct|never_correct).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Two or more config files.
    #[arg(long, num_args = 2.., required = true)]
    configs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Page-block fetches to simulate.
    #[arg(long, default_value_t = 16)]
    pages: usize,
    /// Host layout: hnd | nhd.
    #[arg(long, default_value = "hnd")]
    layout: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    streamed: bool,
    #[arg(long, default_value_t = 25.0)]
    bandwidth_gbps: f64,
    #[arg(long, default_value_t = 2.0)]
    per_op_latency_us: f64,
    #[arg(long, default_value_t = 800.0)]
    convert_throughput_gbps: f64,
    #[arg(long, default_value_t = 32)]
    page_size: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 2)]
    elem_bytes: usize,
    #[arg(long, default_value_t = 8)]
    n_kv: usize,
    /// Write timeline.csv and sim.json here (prints to stdout otherwise).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
    Invariant(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violation: {m}"),
        }
    }
}

fn data_err<E: fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn engine_err(e: EngineError) -> CliError {
    match e {
        EngineError::DimsMismatch(m) => CliError::Data(m),
        EngineError::Spec(SpecError::BarrierNotReached) => {
            CliError::Invariant("background recall barrier not reached".into())
        }
        other => CliError::Invariant(other.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success codes
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sim(args) => cmd_sim(args),
    }
}

fn parse_dims(spec: &str) -> Result<(usize, usize, usize, usize), CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 4 {
        return Err(CliError::Usage(format!(
            "--dims expects n_layers,n_qo,n_kv,head_dim (got `{spec}`)"
        )));
    }
    let mut vals = [0usize; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad dims component `{part}`")))?;
    }
    Ok((vals[0], vals[1], vals[2], vals[3]))
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let (n_layers, n_qo, n_kv, d) = parse_dims(&args.dims)?;
    let mut overrides = BTreeMap::new();
    for dip in &args.dips {
        let (step, value) = dip.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--dip expects STEP=TARGET (got `{dip}`)"))
        })?;
        let step: usize = step
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad dip step `{step}`")))?;
        let value: f32 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad dip target `{value}`")))?;
        overrides.insert(step, value);
    }
    let schedule = SimilaritySchedule::new(args.similarity, overrides).map_err(data_err)?;
    let spec = TraceGenSpec {
        seed: args.seed,
        n_layers,
        n_qo,
        n_kv,
        d,
        prefill_len: args.prefill,
        n_steps: args.steps,
        schedule,
    };
    let generated = generate_synthetic_trace(&spec).map_err(data_err)?;
    save_trace(&generated.trace, &args.out).map_err(data_err)?;
    let mean = if generated.achieved_similarity.is_empty() {
        f32::NAN
    } else {
        generated.achieved_similarity.iter().sum::<f32>()
            / generated.achieved_similarity.len() as f32
    };
    println!(
        "wrote {} ({} layers, {} steps, prefill {}, mean achieved similarity {mean:.3})",
        args.out.display(),
        n_layers,
        args.steps,
        args.prefill
    );
    Ok(())
}

fn load_config(
    path: &Path,
    trace_dims: (usize, usize, usize),
    mode_override: Option<&str>,
) -> Result<(kvtier::EngineConfig, LinkModel, ComputeModel), CliError> {
    let mut raw = RawConfig::load(path).map_err(data_err)?;
    if let Some(mode) = mode_override {
        match mode {
            "speculative" | "always_correct" | "never_correct" => {
                raw.entries.insert("mode".into(), mode.into());
            }
            other => {
                return Err(CliError::Usage(format!(
                    "--mode must be speculative|always_correct|never_correct (got {other})"
                )))
            }
        }
    }
    let cfg = raw.into_engine_config(Some(trace_dims)).map_err(data_err)?;
    let link = raw.link_model().map_err(data_err)?;
    let compute = raw.compute_model().map_err(data_err)?;
    Ok((cfg, link, compute))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(data_err)?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(data_err)?;
    Ok(path)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let trace = load_trace(&args.trace).map_err(data_err)?;
    let (cfg, link, compute) =
        load_config(&args.config, trace.dims(), args.mode.as_deref())?;
    let artifacts = run_engine(&trace, &cfg, &link, &compute).map_err(engine_err)?;
    let metrics_path = write_file(&args.out_dir, "metrics.json", &artifacts.metrics.to_json())?;
    write_file(&args.out_dir, "timeline.csv", &artifacts.timeline.to_csv())?;
    write_file(&args.out_dir, "stats.csv", &artifacts.stats_csv)?;
    let m = &artifacts.metrics;
    println!(
        "mode {}: correction_rate {:.4}, selection_jaccard {:.4}, max_abs_err {:.3e}",
        cfg.spec.mode, m.correction_rate, m.selection_jaccard_mean, m.output_max_abs_err
    );
    println!(
        "transfer: {} sync + {} background pages, {} bytes total; simulated exposed {:.1} us",
        m.transfer.sync.pages_fetched,
        m.transfer.background.pages_fetched,
        m.transfer.sync.bytes_moved + m.transfer.background.bytes_moved,
        m.sim.total_exposed_us
    );
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let trace = load_trace(&args.trace).map_err(data_err)?;
    let mut labeled = Vec::new();
    let mut link = LinkModel::default();
    let mut compute = ComputeModel::default();
    for path in &args.configs {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let (cfg, l, c) = load_config(path, trace.dims(), None)?;
        link = l;
        compute = c;
        labeled.push((label, cfg));
    }
    let (report, _) = compare_modes(&trace, &labeled, &link, &compute).map_err(engine_err)?;
    write_file(&args.out_dir, "compare.json", &report.to_json())?;
    let csv_path = write_file(&args.out_dir, "compare.csv", &report.to_csv())?;
    for entry in &report.runs {
        println!(
            "{}: mode {} pooling {} jaccard {:.4} err {:.3e} exposed {:.1} us",
            entry.label,
            entry.metrics.config.spec.mode,
            entry.metrics.config.spec.pooling,
            entry.metrics.selection_jaccard_mean,
            entry.metrics.output_max_abs_err,
            entry.metrics.sim.total_exposed_us
        );
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_sim(args: SimArgs) -> Result<(), CliError> {
    let layout = match args.layout.as_str() {
        "hnd" => HostLayoutMode::Hnd,
        "nhd" => HostLayoutMode::Nhd,
        other => {
            return Err(CliError::Usage(format!(
                "--layout must be hnd|nhd (got {other})"
            )))
        }
    };
    if args.elem_bytes != 2 && args.elem_bytes != 4 {
        return Err(CliError::Usage("--elem-bytes must be 2 or 4".into()));
    }
    let geom = kvtier::layout::PageGeometry {
        page_size: args.page_size,
        n_kv: args.n_kv,
        head_dim: args.head_dim,
        elem_bytes: args.elem_bytes,
    };
    let shape = RecallShape::for_layout(&geom, layout);
    let link = LinkModel {
        bandwidth_bytes_per_sec: args.bandwidth_gbps * 1e9,
        per_op_latency_sec: args.per_op_latency_us * 1e-6,
    };
    let convert = args.convert_throughput_gbps * 1e9;
    let requested = simulate_recall(args.pages, shape, &link, convert, args.streamed);
    let sequential = simulate_recall(args.pages, shape, &link, convert, false);
    let streamed = simulate_recall(args.pages, shape, &link, convert, true);
    let summary = serde_json::json!({
        "pages": args.pages,
        "layout": args.layout,
        "streamed": args.streamed,
        "page_bytes": shape.page_bytes,
        "ops_per_page": shape.ops_per_page,
        "transfer_time_us_per_page": shape.transfer_time_sec(&link) * 1e6,
        "convert_time_us_per_page": shape.convert_time_sec(convert) * 1e6,
        "makespan_us": requested.makespan_sec * 1e6,
        "sequential_makespan_us": sequential.makespan_sec * 1e6,
        "streamed_makespan_us": streamed.makespan_sec * 1e6,
    });
    let summary_text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Some(dir) = &args.out_dir {
        write_file(dir, "timeline.csv", &requested.to_csv())?;
        let path = write_file(dir, "sim.json", &summary_text)?;
        println!("wrote {}", path.display());
    }
    println!(
        "{} pages, {} layout, {} ops/page: sequential {:.1} us, streamed {:.1} us",
        args.pages,
        args.layout,
        shape.ops_per_page,
        sequential.makespan_sec * 1e6,
        streamed.makespan_sec * 1e6
    );
    Ok(())
}

//! `hgs`: build resource graphs, run grow/shrink against a hierarchy, drive
//! benchmark suites, and fit the timing models.
//!
//! Exit codes: 0 success, 2 no satisfying resources, 3 transport failure,
//! 4 configuration or input error, 1 anything else.

mod config;
mod runner;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hgs_core::graph::{ClusterSpec, ResourceGraph};
use hgs_core::grow::GrowOutcome;
use hgs_core::hierarchy::{HierarchyError, TransportError};
use hgs_core::jgf::{deserialize_jgf, serialize_jgf_pretty};
use hgs_core::perfmodel::{fit_groups, load_log, render_fit_table, FitError, LogRecord};

use config::{ExperimentConfig, InstanceConfig, TransportMode};
use runner::{BenchTarget, GrowReport};

const EXIT_NO_MATCH: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "hgs", version, about = "Hierarchical graph scheduler workbench")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic cluster graph and write it as a canonical JGF file.
    Build(BuildArgs),
    /// Run one grow request against a configured hierarchy.
    Grow(GrowArgs),
    /// Run the request suite with repetitions and state reset.
    Bench(BenchArgs),
    /// Fit per-(phase, transport) linear models from sample logs.
    Fit(FitArgs),
    /// Host one scheduler instance on a TCP listener.
    Serve(ServeArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Node count.
    #[arg(long)]
    nodes: Option<u64>,
    /// Sockets per node.
    #[arg(long, default_value_t = 0)]
    sockets: u64,
    /// Cores per socket.
    #[arg(long, default_value_t = 0)]
    cores: u64,
    /// GPUs per node.
    #[arg(long, default_value_t = 0)]
    gpus: u64,
    /// Memory units (GB) per socket.
    #[arg(long, default_value_t = 0)]
    memory: u64,
    /// Re-canonicalize an existing JGF file instead of building.
    #[arg(long, conflicts_with = "nodes")]
    from_jgf: Option<PathBuf>,
    /// Write the payload form (root carried only as the anchor).
    #[arg(long)]
    exclude_root: bool,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GrowArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the report and sample log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured transport.
    #[arg(long)]
    transport: Option<String>,
    /// Request in jobspec syntax or a built-in name (t1..t8).
    request: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override repetitions.
    #[arg(long)]
    reps: Option<u64>,
    /// Override transport (inproc or tcp).
    #[arg(long)]
    transport: Option<String>,
    /// Override the suite: comma-separated names/requests, or a file with
    /// one request per line.
    #[arg(long)]
    suite: Option<String>,
    /// Override the policy seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Sample log file(s); repeatable.
    #[arg(long, required = true)]
    log: Vec<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Instance config file.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("HGS_LOG_LEVEL", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Build(args) => cmd_build(args),
        Cmd::Grow(args) => cmd_grow(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Fit(args) => cmd_fit(args),
        Cmd::Serve(args) => cmd_serve(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(h) = cause.downcast_ref::<HierarchyError>() {
            return match h {
                HierarchyError::Transport(_) | HierarchyError::Remote(_) => EXIT_TRANSPORT,
                HierarchyError::Config(_) => EXIT_CONFIG,
                _ => 1,
            };
        }
        if cause.downcast_ref::<TransportError>().is_some() {
            return EXIT_TRANSPORT;
        }
        if cause.downcast_ref::<FitError>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<hgs_core::jobspec::SpecError>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<hgs_core::graph::GraphError>().is_some() {
            return EXIT_CONFIG;
        }
    }
    if err.to_string().contains("config") {
        EXIT_CONFIG
    } else {
        1
    }
}

fn cmd_build(args: BuildArgs) -> Result<u8> {
    let sub = match &args.from_jgf {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            deserialize_jgf(&text).map_err(|e| anyhow!(e))?
        }
        None => {
            let nodes = args
                .nodes
                .ok_or_else(|| anyhow!("config error: --nodes or --from-jgf is required"))?;
            let spec = ClusterSpec {
                nodes,
                sockets_per_node: args.sockets,
                cores_per_socket: args.cores,
                gpus_per_node: args.gpus,
                memory_per_socket: args.memory,
            };
            let graph = ResourceGraph::build_synthetic_cluster(&spec)?;
            println!(
                "graph: {} vertices, {} edges, size {}",
                graph.vertex_count(),
                graph.edge_count(),
                graph.size()
            );
            graph.extract_all(!args.exclude_root)
        }
    };
    println!("document size: {}", sub.size());
    fs::write(&args.out, serialize_jgf_pretty(&sub))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn apply_policy_seed(config: &ExperimentConfig, target: &mut BenchTarget) {
    if config.seed == 0 {
        return;
    }
    let policy = hgs_core::matcher::MatchPolicy::Seeded(config.seed);
    match target {
        BenchTarget::Inproc(h) => {
            for instance in &h.instances {
                instance.borrow_mut().set_policy(policy);
            }
        }
        BenchTarget::Tcp(h) => h.leaf.set_policy(policy),
    }
}

fn build_target(config: &ExperimentConfig, out_dir: &std::path::Path) -> Result<BenchTarget> {
    let mut target = match config.transport {
        TransportMode::Inproc => BenchTarget::Inproc(runner::build_inproc(config)?),
        TransportMode::Tcp => BenchTarget::Tcp(runner::build_tcp(config, out_dir)?),
    };
    apply_policy_seed(config, &mut target);
    Ok(target)
}

fn cmd_grow(args: GrowArgs) -> Result<u8> {
    let mut config = ExperimentConfig::load(&args.config)?;
    override_transport(&mut config, args.transport.as_deref())?;
    let out_dir = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("hgs-out"));
    fs::create_dir_all(&out_dir)?;
    let spec = config::resolve_request(&args.request)?;
    let mut target = build_target(&config, &out_dir)?;
    let recorder = match &target {
        BenchTarget::Inproc(h) => h.recorder.clone(),
        BenchTarget::Tcp(h) => h.recorder.clone(),
    };
    recorder.clear();
    let (_, result) = match &mut target {
        BenchTarget::Inproc(h) => h.grow_at_leaf(&spec).map_err(anyhow::Error::new)?,
        BenchTarget::Tcp(h) => {
            let job = h.leaf.mint_job();
            let t = std::time::Instant::now();
            let result = h.leaf.match_grow(&spec, job).map_err(anyhow::Error::new)?;
            h.recorder
                .record_total(h.leaf.level(), spec.request_size(), t.elapsed().as_secs_f64());
            (job, result)
        }
    };
    let records: Vec<LogRecord> = recorder.snapshot();
    let report: GrowReport = runner::report_from_result(&result, spec.request_size(), &records);
    for level in &report.per_level {
        if let Some(ratio) = level.coverage_ratio {
            debug_assert!(ratio <= 1.000_001, "phase coverage above total at L{}", level.level);
        }
    }
    print!("{}", runner::render_grow_report(&report));
    fs::write(
        out_dir.join("grow-report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let log_path = out_dir.join("samples.jsonl");
    let mut file = fs::File::create(&log_path)?;
    use std::io::Write as _;
    for record in &records {
        writeln!(file, "{}", record.to_json_line())?;
    }
    println!("report: {}", out_dir.join("grow-report.json").display());
    Ok(match result.outcome {
        GrowOutcome::Failed => EXIT_NO_MATCH,
        _ => 0,
    })
}

fn override_transport(config: &mut ExperimentConfig, transport: Option<&str>) -> Result<()> {
    if let Some(t) = transport {
        config.transport = match t {
            "inproc" => TransportMode::Inproc,
            "tcp" => TransportMode::Tcp,
            other => bail!("config error: unknown transport {other:?}"),
        };
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<u8> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(reps) = args.reps {
        config.repetitions = reps;
    }
    override_transport(&mut config, args.transport.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(suite) = &args.suite {
        let path = PathBuf::from(suite);
        config.suite = if path.is_file() {
            fs::read_to_string(&path)?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            suite.split(',').map(|s| s.trim().to_string()).collect()
        };
    }
    config.validate()?;
    let out_dir = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("hgs-out"));
    fs::create_dir_all(&out_dir)?;
    let mut target = build_target(&config, &out_dir)?;
    let summary = runner::run_bench(&config, &mut target, &out_dir)?;
    print!("{}", runner::render_bench_summary(&summary));
    fs::write(
        out_dir.join("bench-summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("\nsummary: {}", out_dir.join("bench-summary.json").display());
    println!("samples: {}", summary.sample_log.display());
    Ok(0)
}

fn cmd_fit(args: FitArgs) -> Result<u8> {
    let mut records = Vec::new();
    for path in &args.log {
        records.extend(load_log(path).map_err(anyhow::Error::new)?);
    }
    let reports = fit_groups(&records).map_err(anyhow::Error::new)?;
    print!("{}", render_fit_table(&reports));
    if let Some(path) = &args.json {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_serve(args: ServeArgs) -> Result<u8> {
    let config = InstanceConfig::load(&args.config)?;
    runner::run_serve(config)?;
    Ok(0)
}

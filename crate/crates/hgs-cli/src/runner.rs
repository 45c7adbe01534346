//! Hierarchy construction and the grow/bench/serve drivers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use hgs_core::graph::{JobId, ResourceGraph};
use hgs_core::grow::{GrowOutcome, GrowResult};
use hgs_core::hierarchy::{
    apply_prealloc, read_frame, InprocHierarchy, SchedulerInstance, TcpLink, TransportError,
};
use hgs_core::jgf::deserialize_jgf;
use hgs_core::jobspec::JobSpec;
use hgs_core::perfmodel::{LogRecord, Phase, Recorder, Transport};
use hgs_core::provider::{Catalog, MockProvider};

use crate::config::{
    ExperimentConfig, GraphSource, InstanceConfig, InstanceProviderConfig, ProviderConfig,
    TransportMode,
};

/// Job id used to preload busy levels.
pub fn prealloc_job(level: u32) -> JobId {
    JobId::new(level, u64::MAX)
}

fn attach_provider(
    instance: &mut SchedulerInstance,
    specialization: bool,
    catalog: Option<&PathBuf>,
    seed: u64,
) -> Result<()> {
    let catalog = match catalog {
        Some(path) => Catalog::load(path).map_err(anyhow::Error::new)?,
        None => Catalog::builtin(),
    };
    instance.attach_provider_for_tests(Box::new(MockProvider::new(catalog, seed)), specialization);
    Ok(())
}

/// Builds the whole hierarchy in this process.
pub fn build_inproc(config: &ExperimentConfig) -> Result<InprocHierarchy> {
    let setups: Vec<_> = config.levels.iter().map(|l| l.level_setup()).collect();
    let hierarchy = InprocHierarchy::build(&setups).map_err(anyhow::Error::new)?;
    if let Some(ProviderConfig {
        attach_level,
        specialization,
        catalog,
        seed,
    }) = &config.provider
    {
        let mut instance = hierarchy.instances[*attach_level as usize].borrow_mut();
        attach_provider(&mut instance, *specialization, catalog.as_ref(), *seed)?;
    }
    Ok(hierarchy)
}

fn connect_parent_with_retries(
    addr: &str,
    timeout: Duration,
    injected_latency: Duration,
    transport: Transport,
) -> Result<TcpLink> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match TcpLink::connect(addr, timeout, injected_latency, transport) {
            Ok(link) => return Ok(link),
            Err(_) if Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => bail!("connecting to parent {addr}: {e}"),
        }
    }
}

/// The multi-process harness: levels 0..n-2 run as spawned `hgs serve`
/// processes, the leaf lives in this process.
pub struct TcpHarness {
    pub leaf: SchedulerInstance,
    pub recorder: Recorder,
    pub server_logs: Vec<PathBuf>,
    children: Vec<Child>,
}

impl Drop for TcpHarness {
    fn drop(&mut self) {
        for child in &mut self.children {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub fn build_tcp(config: &ExperimentConfig, out_dir: &Path) -> Result<TcpHarness> {
    if config.levels.is_empty() {
        bail!("no levels configured");
    }
    fs::create_dir_all(out_dir)?;
    let exe = std::env::current_exe().context("locating the hgs binary")?;
    let mut children = Vec::new();
    let mut server_logs = Vec::new();
    let upper = config.levels.len() - 1;
    for (i, level) in config.levels[..upper].iter().enumerate() {
        let listen = format!("127.0.0.1:{}", config.base_port + i as u16);
        let parent = if i == 0 {
            None
        } else {
            Some(format!("127.0.0.1:{}", config.base_port + i as u16 - 1))
        };
        let sample_log = out_dir.join(format!("samples-level{i}.jsonl"));
        let _ = fs::remove_file(&sample_log);
        let instance = InstanceConfig {
            level: i as u32,
            listen: listen.clone(),
            parent,
            graph: GraphSource::Spec(level.clone()),
            prealloc: level.prealloc,
            link: level.link,
            injected_latency_us: level.injected_latency_us,
            provider: config.provider.as_ref().and_then(|p| {
                (p.attach_level == i as u32).then(|| InstanceProviderConfig {
                    specialization: p.specialization,
                    catalog: p.catalog.clone(),
                    seed: p.seed,
                })
            }),
            sample_log: Some(sample_log.clone()),
            policy_seed: config.seed,
            rpc_timeout_ms: config.rpc_timeout_ms,
        };
        let config_path = out_dir.join(format!("instance-level{i}.json"));
        fs::write(&config_path, serde_json::to_string_pretty(&instance)?)?;
        let child = Command::new(&exe)
            .arg("serve")
            .arg("--config")
            .arg(&config_path)
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .with_context(|| format!("spawning serve for level {i}"))?;
        children.push(child);
        server_logs.push(sample_log);
    }

    let leaf_config = config.levels.last().expect("nonempty levels");
    let recorder = Recorder::new();
    let mut graph = ResourceGraph::build_synthetic_cluster(&leaf_config.cluster_spec())?;
    apply_prealloc(&mut graph, leaf_config.prealloc, prealloc_job(upper as u32))?;
    let mut leaf =
        SchedulerInstance::new(upper as u32, graph).with_recorder(recorder.clone());
    if upper > 0 {
        let parent_addr = format!("127.0.0.1:{}", config.base_port + upper as u16 - 1);
        let link = connect_parent_with_retries(
            &parent_addr,
            Duration::from_millis(config.rpc_timeout_ms),
            Duration::from_micros(leaf_config.injected_latency_us),
            leaf_config.link,
        )?;
        leaf.set_parent(Box::new(link));
    } else if let Some(p) = &config.provider {
        attach_provider(&mut leaf, p.specialization, p.catalog.as_ref(), p.seed)?;
    }
    Ok(TcpHarness {
        leaf,
        recorder,
        server_logs,
        children,
    })
}

// ---- grow ----

#[derive(Debug, Serialize)]
pub struct LevelBreakdown {
    pub level: u32,
    pub match_s: f64,
    pub comms_s: f64,
    pub add_update_s: f64,
    pub total_s: Option<f64>,
    pub coverage_ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct GrowReport {
    pub outcome: GrowOutcome,
    pub levels_traversed: u32,
    pub request_size: u64,
    pub subgraph_size: Option<usize>,
    pub match_s: f64,
    pub comms_s: f64,
    pub add_update_s: f64,
    pub per_level: Vec<LevelBreakdown>,
}

/// Folds recorder records into per-level phase sums plus the coverage ratio
/// (components over total, which stays at or below one).
pub fn level_breakdown(records: &[LogRecord]) -> Vec<LevelBreakdown> {
    let mut by_level: BTreeMap<u32, (f64, f64, f64, Option<f64>)> = BTreeMap::new();
    for record in records {
        match record {
            LogRecord::Sample(s) => {
                let entry = by_level.entry(s.level).or_insert((0.0, 0.0, 0.0, None));
                match s.phase {
                    Phase::Match => entry.0 += s.duration_s,
                    Phase::Comms => entry.1 += s.duration_s,
                    Phase::AddUpdate => entry.2 += s.duration_s,
                }
            }
            LogRecord::LevelTotal { level, duration_s, .. } => {
                let entry = by_level.entry(*level).or_insert((0.0, 0.0, 0.0, None));
                entry.3 = Some(entry.3.unwrap_or(0.0) + duration_s);
            }
        }
    }
    by_level
        .into_iter()
        .map(|(level, (m, c, a, total))| LevelBreakdown {
            level,
            match_s: m,
            comms_s: c,
            add_update_s: a,
            total_s: total,
            coverage_ratio: total.map(|t| if t > 0.0 { (m + c + a) / t } else { 0.0 }),
        })
        .collect()
}

pub fn report_from_result(
    result: &GrowResult,
    request_size: u64,
    records: &[LogRecord],
) -> GrowReport {
    GrowReport {
        outcome: result.outcome,
        levels_traversed: result.levels_traversed,
        request_size,
        subgraph_size: result.subgraph.as_ref().map(|s| s.size()),
        match_s: result.timings.match_s,
        comms_s: result.timings.comms_s,
        add_update_s: result.timings.add_update_s,
        per_level: level_breakdown(records),
    }
}

pub fn render_grow_report(report: &GrowReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "outcome: {:?}\nlevels traversed: {}\nrequest size: {}\nsubgraph size: {}\n",
        report.outcome,
        report.levels_traversed,
        report.request_size,
        report
            .subgraph_size
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into()),
    ));
    out.push_str(&format!(
        "leaf timings: match {:.6}s, comms {:.6}s, add/update {:.6}s\n",
        report.match_s, report.comms_s, report.add_update_s
    ));
    if !report.per_level.is_empty() {
        out.push_str("per level (sums over this run):\n");
        for l in &report.per_level {
            out.push_str(&format!(
                "  L{}: match {:.6}s comms {:.6}s add/update {:.6}s total {} coverage {}\n",
                l.level,
                l.match_s,
                l.comms_s,
                l.add_update_s,
                l.total_s.map(|t| format!("{t:.6}s")).unwrap_or_else(|| "-".into()),
                l.coverage_ratio
                    .map(|r| format!("{r:.3}"))
                    .unwrap_or_else(|| "-".into()),
            ));
        }
    }
    out
}

// ---- bench ----

#[derive(Debug, Serialize)]
pub struct PhaseSummary {
    pub level: u32,
    pub phase: String,
    pub transport: String,
    pub count: usize,
    pub median_s: f64,
    pub p25_s: f64,
    pub p75_s: f64,
    pub iqr_s: f64,
}

#[derive(Debug, Serialize)]
pub struct TestSummary {
    pub request: String,
    pub request_size: u64,
    pub outcomes: BTreeMap<String, u64>,
    pub phases: Vec<PhaseSummary>,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub repetitions: u64,
    pub transport: String,
    pub reset_verified: Option<bool>,
    pub sample_log: PathBuf,
    pub server_logs: Vec<PathBuf>,
    pub tests: Vec<TestSummary>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn phase_summaries(records: &[LogRecord]) -> Vec<PhaseSummary> {
    let mut groups: BTreeMap<(u32, Phase, Transport), Vec<f64>> = BTreeMap::new();
    for record in records {
        if let LogRecord::Sample(s) = record {
            groups
                .entry((s.level, s.phase, s.transport))
                .or_default()
                .push(s.duration_s);
        }
    }
    groups
        .into_iter()
        .map(|((level, phase, transport), mut values)| {
            values.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
            let p25 = percentile(&values, 0.25);
            let p75 = percentile(&values, 0.75);
            PhaseSummary {
                level,
                phase: phase.as_str().to_string(),
                transport: transport.as_str().to_string(),
                count: values.len(),
                median_s: percentile(&values, 0.5),
                p25_s: p25,
                p75_s: p75,
                iqr_s: p75 - p25,
            }
        })
        .collect()
}

pub enum BenchTarget {
    Inproc(InprocHierarchy),
    Tcp(TcpHarness),
}

impl BenchTarget {
    fn recorder(&self) -> Recorder {
        match self {
            BenchTarget::Inproc(h) => h.recorder.clone(),
            BenchTarget::Tcp(h) => h.recorder.clone(),
        }
    }

    fn grow(&mut self, spec: &JobSpec) -> Result<(JobId, GrowResult)> {
        match self {
            BenchTarget::Inproc(h) => h.grow_at_leaf(spec).map_err(anyhow::Error::new),
            BenchTarget::Tcp(h) => {
                let job = h.leaf.mint_job();
                let t = Instant::now();
                let result = h.leaf.match_grow(spec, job).map_err(anyhow::Error::new)?;
                h.recorder
                    .record_total(h.leaf.level(), spec.request_size(), t.elapsed().as_secs_f64());
                Ok((job, result))
            }
        }
    }

    fn shrink(&mut self, job: JobId, result: &GrowResult) -> Result<()> {
        let paths: Vec<String> = result
            .subgraph
            .as_ref()
            .map(|s| s.member_paths().into_iter().collect())
            .unwrap_or_default();
        match self {
            BenchTarget::Inproc(h) => {
                h.leaf()
                    .borrow_mut()
                    .match_shrink(&paths, job)
                    .map_err(anyhow::Error::new)?;
            }
            BenchTarget::Tcp(h) => {
                h.leaf.match_shrink(&paths, job).map_err(anyhow::Error::new)?;
            }
        }
        Ok(())
    }

    fn state_hashes(&self) -> Option<Vec<String>> {
        match self {
            BenchTarget::Inproc(h) => Some(h.state_hashes()),
            BenchTarget::Tcp(_) => None,
        }
    }
}

/// Runs the request suite `repetitions` times each, resetting state between
/// trials by shrinking the grown job, and emits the sample log plus a
/// per-test phase summary.
pub fn run_bench(
    config: &ExperimentConfig,
    target: &mut BenchTarget,
    out_dir: &Path,
) -> Result<BenchSummary> {
    fs::create_dir_all(out_dir)?;
    let recorder = target.recorder();
    let baseline = target.state_hashes();
    let mut reset_verified = baseline.as_ref().map(|_| true);
    let mut all_records: Vec<LogRecord> = Vec::new();
    let mut tests = Vec::new();

    for entry in &config.suite {
        let spec = crate::config::resolve_request(entry)?;
        let request_size = spec.request_size();
        recorder.clear();
        let mut outcomes: BTreeMap<String, u64> = BTreeMap::new();
        for rep in 0..config.repetitions {
            let (job, result) = target.grow(&spec)?;
            *outcomes
                .entry(format!("{:?}", result.outcome))
                .or_insert(0) += 1;
            if result.subgraph.is_some() {
                target.shrink(job, &result)?;
            }
            if let (Some(baseline), Some(now)) = (baseline.as_ref(), target.state_hashes()) {
                if *baseline != now {
                    log::warn!("state reset failed on {entry} repetition {rep}");
                    reset_verified = Some(false);
                }
            }
        }
        let records = recorder.snapshot();
        tests.push(TestSummary {
            request: entry.clone(),
            request_size,
            outcomes,
            phases: phase_summaries(&records),
        });
        all_records.extend(records);
    }

    let sample_log = out_dir.join("samples.jsonl");
    let mut file = fs::File::create(&sample_log)?;
    for record in &all_records {
        writeln!(file, "{}", record.to_json_line())?;
    }

    let server_logs = match target {
        BenchTarget::Tcp(h) => h.server_logs.clone(),
        BenchTarget::Inproc(_) => Vec::new(),
    };
    Ok(BenchSummary {
        repetitions: config.repetitions,
        transport: match config.transport {
            TransportMode::Inproc => "inproc".into(),
            TransportMode::Tcp => "tcp".into(),
        },
        reset_verified,
        sample_log,
        server_logs,
        tests,
    })
}

pub fn render_bench_summary(summary: &BenchSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "transport {} | repetitions {} | state reset {}\n",
        summary.transport,
        summary.repetitions,
        match summary.reset_verified {
            Some(true) => "verified",
            Some(false) => "FAILED",
            None => "unchecked (multi-process)",
        }
    ));
    for test in &summary.tests {
        out.push_str(&format!(
            "\n{} (size {}) outcomes {:?}\n",
            test.request, test.request_size, test.outcomes
        ));
        out.push_str(&format!(
            "  {:<6} {:<12} {:<6} {:>6} {:>12} {:>12}\n",
            "level", "phase", "link", "count", "median_s", "iqr_s"
        ));
        for p in &test.phases {
            out.push_str(&format!(
                "  {:<6} {:<12} {:<6} {:>6} {:>12.6} {:>12.6}\n",
                p.level, p.phase, p.transport, p.count, p.median_s, p.iqr_s
            ));
        }
    }
    out
}

// ---- serve ----

fn build_served_graph(config: &InstanceConfig) -> Result<ResourceGraph> {
    let mut graph = match &config.graph {
        GraphSource::Spec(level) => ResourceGraph::build_synthetic_cluster(&level.cluster_spec())?,
        GraphSource::Jgf(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading graph {}", path.display()))?;
            let sub = deserialize_jgf(&text).map_err(anyhow::Error::new)?;
            ResourceGraph::from_subgraph(&sub, true)?
        }
    };
    apply_prealloc(&mut graph, config.prealloc, prealloc_job(config.level))?;
    Ok(graph)
}

/// Hosts one instance on its configured listener until the process is
/// terminated. Samples are flushed to the configured log after every served
/// frame, outside the measured handling window.
pub fn run_serve(config: InstanceConfig) -> Result<()> {
    let recorder = Recorder::new();
    let graph = build_served_graph(&config)?;
    let mut instance = SchedulerInstance::new(config.level, graph).with_recorder(recorder.clone());
    if config.policy_seed != 0 {
        instance.set_policy(hgs_core::matcher::MatchPolicy::Seeded(config.policy_seed));
    }
    if let Some(parent) = &config.parent {
        let link = connect_parent_with_retries(
            parent,
            Duration::from_millis(config.rpc_timeout_ms),
            Duration::from_micros(config.injected_latency_us),
            config.link,
        )?;
        instance.set_parent(Box::new(link));
    }
    if let Some(p) = &config.provider {
        attach_provider(&mut instance, p.specialization, p.catalog.as_ref(), p.seed)?;
    }
    let listener = TcpListener::bind(&config.listen)
        .with_context(|| format!("binding {}", config.listen))?;
    log::info!("level {} serving on {}", config.level, config.listen);

    loop {
        let (stream, peer) = listener.accept()?;
        log::debug!("connection from {peer}");
        serve_connection_flushing(&mut instance, stream, &recorder, config.sample_log.as_deref())?;
    }
}

fn serve_connection_flushing(
    instance: &mut SchedulerInstance,
    mut stream: TcpStream,
    recorder: &Recorder,
    sample_log: Option<&Path>,
) -> Result<()> {
    let _ = stream.set_nodelay(true);
    loop {
        match read_frame(&mut stream, Duration::from_secs(3600)) {
            Ok(frame) => {
                let reply = instance.handle_frame(&frame);
                if stream.write_all(&reply).is_err() {
                    return Ok(());
                }
                if let Some(path) = sample_log {
                    recorder.append_to_file(path)?;
                    recorder.clear();
                }
            }
            Err(TransportError::Timeout) => continue,
            Err(_) => return Ok(()),
        }
    }
}

//! Ignored diagnostics for inspecting bench sample distributions on the
//! local machine. Run with:
//! `cargo test -p hgs-core --test diag -- --ignored --nocapture`

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::net::TcpListener;
use std::rc::Rc;
use std::time::Duration;

use hgs_core::graph::{ClusterSpec, JobId, ResourceGraph};
use hgs_core::grow::GrowOutcome;
use hgs_core::hierarchy::{
    apply_prealloc, spawn_tcp_host, InprocLink, Prealloc, SchedulerInstance, TcpLink,
};
use hgs_core::jobspec::JobSpec;
use hgs_core::perfmodel::{LogRecord, Phase, Recorder, Transport};

fn t_request(k: usize) -> JobSpec {
    let texts = [
        "node:64 socket:128 core:2048",
        "node:32 socket:64 core:1024",
        "node:16 socket:32 core:512",
        "node:8 socket:16 core:256",
        "node:4 socket:8 core:128",
        "node:2 socket:4 core:64",
        "node:1 socket:2 core:32",
    ];
    JobSpec::parse(texts[k - 1]).unwrap()
}

#[test]
#[ignore]
fn dump_bench_distributions() {
    let reps: usize = std::env::var("DIAG_REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let latency_us: u64 = std::env::var("DIAG_LAT_US").ok().and_then(|v| v.parse().ok()).unwrap_or(300);
    let recorder = Recorder::new();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let top_recorder = recorder.clone();
    let host = spawn_tcp_host(listener, move || {
        let mut graph = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(128, 2, 16)).unwrap();
        apply_prealloc(&mut graph, Prealloc::FirstNodes(8), JobId::new(0, u64::MAX)).unwrap();
        SchedulerInstance::new(0, graph).with_recorder(top_recorder)
    });
    let mut instances: Vec<Rc<RefCell<SchedulerInstance>>> = Vec::new();
    for (level, spec) in [
        (1u32, ClusterSpec::new(8, 2, 16)),
        (2, ClusterSpec::new(4, 2, 16)),
        (3, ClusterSpec::new(2, 2, 16)),
        (4, ClusterSpec::new(1, 2, 16)),
    ] {
        let mut graph = ResourceGraph::build_synthetic_cluster(&spec).unwrap();
        graph.allocate_all(JobId::new(level, u64::MAX)).unwrap();
        let mut instance = SchedulerInstance::new(level, graph).with_recorder(recorder.clone());
        if level == 1 {
            let link = TcpLink::connect(
                host.addr,
                Duration::from_secs(30),
                Duration::from_micros(latency_us),
                Transport::Inter,
            )
            .unwrap();
            instance = instance.with_parent(Box::new(link));
        } else {
            let parent = instances.last().unwrap().clone();
            instance = instance.with_parent(Box::new(InprocLink::new(parent)));
        }
        instances.push(Rc::new(RefCell::new(instance)));
    }
    let leaf = instances.last().unwrap().clone();
    for k in 1..=7 {
        let spec = t_request(k);
        for _ in 0..reps {
            let mut leaf_ref = leaf.borrow_mut();
            let job = leaf_ref.mint_job();
            let result = leaf_ref.match_grow(&spec, job).unwrap();
            assert_eq!(result.outcome, GrowOutcome::SatisfiedByParent);
            let paths: Vec<String> = result.subgraph.as_ref().unwrap().member_paths().into_iter().collect();
            leaf_ref.match_shrink(&paths, job).unwrap();
        }
    }
    host.stop();

    let mut groups: BTreeMap<(Phase, Transport, u64), Vec<f64>> = BTreeMap::new();
    for record in recorder.snapshot() {
        if let LogRecord::Sample(s) = record {
            groups.entry((s.phase, s.transport, s.n)).or_default().push(s.duration_s);
        }
    }
    println!(
        "{:<12} {:<6} {:>6} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "phase", "link", "n", "count", "mean_us", "std_us", "min_us", "median_us", "max_us"
    );
    for ((phase, transport, n), mut values) in groups {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        println!(
            "{:<12} {:<6} {:>6} {:>6} {:>12.1} {:>12.1} {:>12.1} {:>12.1} {:>12.1}",
            phase.as_str(),
            transport.as_str(),
            n,
            count,
            mean * 1e6,
            var.sqrt() * 1e6,
            values[0] * 1e6,
            values[count / 2] * 1e6,
            values[count - 1] * 1e6
        );
    }
}

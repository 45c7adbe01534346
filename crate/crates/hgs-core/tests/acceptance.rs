//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured evidence. Run with
//! `cargo test -p hgs-core --test acceptance -- --nocapture`.

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::net::TcpListener;
use std::rc::Rc;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgs_core::graph::{ClusterSpec, JobId, ResourceGraph, ResourceKind, VertexId};
use hgs_core::grow::{add_subgraph, update_metadata, GrowOutcome};
use hgs_core::hierarchy::{
    apply_prealloc, check_inclusion, spawn_tcp_host, InprocHierarchy, InprocLink, LevelSetup,
    Prealloc, SchedulerInstance, TcpLink,
};
use hgs_core::jobspec::{JobSpec, RequestEntry};
use hgs_core::matcher::{match_allocate, match_allocate_opts, MatchPolicy};
use hgs_core::perfmodel::{
    fit_linear, geometric_bound, predict_t_mg, reference_coefficients, BoundParams, LogRecord,
    Phase, Recorder, Transport,
};
use hgs_core::provider::{ExternalApi, MockProvider};

fn t_request(k: usize) -> JobSpec {
    let texts = [
        "node:64 socket:128 core:2048",
        "node:32 socket:64 core:1024",
        "node:16 socket:32 core:512",
        "node:8 socket:16 core:256",
        "node:4 socket:8 core:128",
        "node:2 socket:4 core:64",
        "node:1 socket:2 core:32",
        "socket:1 core:16",
    ];
    JobSpec::parse(texts[k - 1]).expect("fixed request parses")
}

/// The five-level nested setup: top level free except the nested footprint,
/// deeper levels fully busy so requests climb to the top.
fn ladder() -> InprocHierarchy {
    let mut levels = vec![LevelSetup::new(ClusterSpec::new(128, 2, 16))];
    levels[0].prealloc = Prealloc::FirstNodes(8);
    for spec in [
        ClusterSpec::new(8, 2, 16),
        ClusterSpec::new(4, 2, 16),
        ClusterSpec::new(2, 2, 16),
        ClusterSpec::new(1, 2, 16),
    ] {
        let mut setup = LevelSetup::new(spec);
        setup.prealloc = Prealloc::All;
        levels.push(setup);
    }
    InprocHierarchy::build(&levels).expect("ladder builds")
}

#[test]
fn criterion_01_grow_protocol_fidelity() {
    let start = Instant::now();
    let h = ladder();
    let spec = t_request(4);
    let (_, result) = h.grow_at_leaf(&spec).expect("grow executes");
    assert_eq!(result.outcome, GrowOutcome::SatisfiedByParent);
    assert_eq!(result.levels_traversed, 5);
    let sub = result.subgraph.as_ref().expect("satisfied grow has a subgraph");
    for level in 0..5 {
        let inst = h.level(level);
        for path in sub.member_paths() {
            assert!(
                inst.graph().lookup_by_path(&path).is_some(),
                "level {level} is missing {path}"
            );
        }
    }
    assert!(h.inclusion_chain_holds(), "inclusion after grow");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "criterion 1: PASS — T4 from the leaf: satisfied_by_parent, 5 levels, every level \
         contains the subgraph, inclusion holds ({elapsed:?} < 10s)"
    );
}

#[test]
fn criterion_02_ma_mg_single_level_equivalence() {
    let mut passed = 0;
    for seed in 0..100u64 {
        let policy = MatchPolicy::Seeded(seed);
        let spec = t_request(7);
        let job = JobId::new(0, 1);

        let mut ma_graph =
            ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(2, 2, 16)).unwrap();
        let ma_sub = match_allocate(&mut ma_graph, &spec, job, &policy)
            .expect("match executes")
            .expect("free graph satisfies T7");

        let mg_graph =
            ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(2, 2, 16)).unwrap();
        let mut instance = SchedulerInstance::new(0, mg_graph).with_policy(policy);
        let result = instance.match_grow(&spec, job).expect("grow executes");
        assert_eq!(result.outcome, GrowOutcome::SatisfiedLocally);
        let mg_sub = result.subgraph.expect("satisfied locally");

        assert_eq!(
            ma_sub.member_paths(),
            mg_sub.member_paths(),
            "selected sets differ at seed {seed}"
        );
        assert_eq!(
            ma_graph.state_hash(),
            instance.graph().state_hash(),
            "post-states differ at seed {seed}"
        );
        passed += 1;
    }
    println!("criterion 2: PASS — MA and MG select identical sets with identical post-states, {passed}/100 seeds");
}

#[test]
fn criterion_03_idempotence_and_inversion() {
    let mut grows = 0;
    let mut failures = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l0_nodes = rng.random_range(4..=8u64);
        let cores = rng.random_range(2..=4u64);
        let nested = rng.random_range(1..=3u64);
        let mut levels = vec![LevelSetup::new(ClusterSpec::new(l0_nodes, 1, cores))];
        levels[0].prealloc = Prealloc::FirstNodes(nested);
        let mut mid = LevelSetup::new(ClusterSpec::new(nested, 1, cores));
        mid.prealloc = Prealloc::All;
        levels.push(mid);
        let mut leaf = LevelSetup::new(ClusterSpec::new(1, 1, cores));
        leaf.prealloc = Prealloc::All;
        levels.push(leaf);
        let h = InprocHierarchy::build(&levels).expect("hierarchy builds");

        // Addition idempotence on a randomized subgraph.
        {
            let donor =
                ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(l0_nodes + 4, 1, cores))
                    .unwrap();
            let pick = format!("/cluster0/node{}", l0_nodes + rng.random_range(0..4));
            let members: BTreeSet<VertexId> = donor
                .vertices()
                .filter(|v| v.path == pick || v.path.starts_with(&format!("{pick}/")))
                .map(|v| v.id)
                .collect();
            let sub = donor.extract_subgraph(&members);
            let mut instance = h.instances[0].borrow_mut();
            add_subgraph(instance.graph_mut(), &sub).expect("first add");
            update_metadata(instance.graph_mut(), &sub, JobId::new(9, seed)).expect("update");
            let once = instance.graph().state_hash();
            add_subgraph(instance.graph_mut(), &sub).expect("second add");
            assert_eq!(instance.graph().state_hash(), once, "seed {seed}: add not idempotent");
        }

        let before = h.state_hashes();
        let nodes_req = rng.random_range(1..=l0_nodes);
        let req_cores = rng.random_range(0..=cores);
        let mut totals = vec![(ResourceKind::Node, nodes_req)];
        if req_cores > 0 {
            totals.push((ResourceKind::Core, nodes_req * req_cores));
        }
        let spec = JobSpec::chain(&totals).unwrap();
        let (job, result) = h.grow_at_leaf(&spec).expect("grow executes");
        if result.subgraph.is_some() {
            grows += 1;
            h.shrink_at_leaf(job, &result).expect("shrink executes");
        } else {
            failures += 1;
        }
        assert_eq!(
            h.state_hashes(),
            before,
            "seed {seed}: pre-grow state not restored"
        );
    }
    println!(
        "criterion 3: PASS — add twice == once and grow-then-shrink restores all levels, \
         200 randomized 3-level sequences ({grows} grown, {failures} failed cleanly)"
    );
}

#[test]
fn criterion_04_matcher_equals_exhaustive_oracle() {
    let start = Instant::now();
    let mut cases = 0usize;

    let mut graphs = Vec::new();
    for nodes in 1..=2u64 {
        graphs.push(ClusterSpec::new(nodes, 0, 0));
        for sockets in 1..=2u64 {
            for cores in 0..=3u64 {
                graphs.push(ClusterSpec::new(nodes, sockets, cores));
            }
        }
    }

    let mut requests: Vec<JobSpec> = Vec::new();
    for a in 1..=2u64 {
        for b in 0..=2u64 {
            for c in 0..=3u64 {
                let mut node = RequestEntry::new(ResourceKind::Node, a);
                if b > 0 {
                    let mut socket = RequestEntry::new(ResourceKind::Socket, b);
                    if c > 0 {
                        socket = socket
                            .with_children(vec![RequestEntry::new(ResourceKind::Core, c)]);
                    }
                    node = node.with_children(vec![socket]);
                } else if c > 0 {
                    node = node.with_children(vec![RequestEntry::new(ResourceKind::Core, c)]);
                }
                requests.push(JobSpec::from_entries(vec![node]).unwrap());
            }
        }
    }
    for b in 1..=2u64 {
        for c in 0..=3u64 {
            let mut socket = RequestEntry::new(ResourceKind::Socket, b);
            if c > 0 {
                socket = socket.with_children(vec![RequestEntry::new(ResourceKind::Core, c)]);
            }
            requests.push(JobSpec::from_entries(vec![socket]).unwrap());
        }
    }
    for c in 1..=3u64 {
        requests.push(
            JobSpec::from_entries(vec![RequestEntry::new(ResourceKind::Core, c)]).unwrap(),
        );
    }
    // Heterogeneous sibling shapes.
    requests.push(
        JobSpec::from_entries(vec![
            RequestEntry::new(ResourceKind::Socket, 1)
                .with_children(vec![RequestEntry::new(ResourceKind::Core, 2)]),
            RequestEntry::new(ResourceKind::Socket, 1)
                .with_children(vec![RequestEntry::new(ResourceKind::Core, 1)]),
        ])
        .unwrap(),
    );
    requests.push(
        JobSpec::from_entries(vec![
            RequestEntry::new(ResourceKind::Core, 1),
            RequestEntry::new(ResourceKind::Socket, 1),
        ])
        .unwrap(),
    );

    for spec in &graphs {
        for busy_node0 in [false, true] {
            let mut base = ResourceGraph::build_synthetic_cluster(spec).unwrap();
            if busy_node0 {
                base.allocate_subtree("/cluster0/node0", JobId::new(5, 5)).unwrap();
            }
            let snap = common::snapshot(&base);
            for request in &requests {
                cases += 1;
                let expected = common::oracle_match(&snap, &request.entries, "/cluster0");

                let mut pruned = base.clone();
                let got =
                    match_allocate_opts(&mut pruned, request, JobId::new(0, 1), &MatchPolicy::LowestPath, true)
                        .expect("match executes")
                        .map(|sub| sub.member_paths());
                assert_eq!(
                    got, expected,
                    "graph {spec:?} busy={busy_node0} request {:?}",
                    request.to_text()
                );

                let mut unpruned = base.clone();
                let got_unpruned = match_allocate_opts(
                    &mut unpruned,
                    request,
                    JobId::new(0, 1),
                    &MatchPolicy::LowestPath,
                    false,
                )
                .expect("match executes")
                .map(|sub| sub.member_paths());
                assert_eq!(got_unpruned, got, "pruning changed the outcome");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "criterion 4: PASS — matcher equals the exhaustive oracle on {cases} enumerated cases \
         ({elapsed:?} < 60s)"
    );
}

// ---- shared bench run for criteria 5 and 6 ----

struct BenchData {
    records: Vec<LogRecord>,
}

static BENCH: OnceLock<BenchData> = OnceLock::new();

const BENCH_REPS: usize = 100;
const INTER_LATENCY: Duration = Duration::from_micros(300);

fn bench_data() -> &'static BenchData {
    BENCH.get_or_init(|| {
        let recorder = Recorder::new();
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let top_recorder = recorder.clone();
        let host = spawn_tcp_host(listener, move || {
            let mut graph =
                ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(128, 2, 16)).unwrap();
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
            let mut instance =
                SchedulerInstance::new(level, graph).with_recorder(recorder.clone());
            if level == 1 {
                let link = TcpLink::connect(
                    host.addr,
                    Duration::from_secs(30),
                    INTER_LATENCY,
                    Transport::Inter,
                )
                .expect("leaf connects");
                instance = instance.with_parent(Box::new(link));
            } else {
                let parent = instances.last().expect("built in order").clone();
                instance = instance.with_parent(Box::new(InprocLink::new(parent)));
            }
            instances.push(Rc::new(RefCell::new(instance)));
        }
        let leaf = instances.last().expect("four nested levels").clone();

        for k in 1..=7 {
            let spec = t_request(k);
            for _ in 0..BENCH_REPS {
                let mut leaf_ref = leaf.borrow_mut();
                let job = leaf_ref.mint_job();
                let result = leaf_ref.match_grow(&spec, job).expect("grow executes");
                assert_eq!(result.outcome, GrowOutcome::SatisfiedByParent, "bench T{k}");
                let paths: Vec<String> = result
                    .subgraph
                    .as_ref()
                    .expect("satisfied")
                    .member_paths()
                    .into_iter()
                    .collect();
                leaf_ref.match_shrink(&paths, job).expect("reset by shrink");
            }
        }
        let records = recorder.snapshot();
        host.stop();
        BenchData { records }
    })
}

fn fit_phase(records: &[LogRecord], phase: Phase, transport: Transport) -> (f64, f64, f64, usize) {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Sample(s) if s.phase == phase && s.transport == transport => {
                Some((s.n as f64, s.duration_s))
            }
            _ => None,
        })
        .collect();
    let model = fit_linear(&points).expect("enough samples per group");
    (model.beta, model.beta0, model.r2, points.len())
}

#[test]
fn criterion_05_locality_and_attach_linearity() {
    // Exact touch budgets on every suite size.
    for k in 1..=7 {
        let donor =
            ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(200, 2, 16)).unwrap();
        let spec = t_request(k);
        let nodes_total = spec.total_of_kind(ResourceKind::Node);
        let members: BTreeSet<VertexId> = donor
            .vertices()
            .filter(|v| {
                for i in 100..100 + nodes_total {
                    let base = format!("/cluster0/node{i}");
                    if v.path == base || v.path.starts_with(&format!("{base}/")) {
                        return true;
                    }
                }
                false
            })
            .map(|v| v.id)
            .collect();
        let sub = donor.extract_subgraph(&members);
        assert_eq!(sub.size() as u64, spec.request_size(), "T{k} donor shape");

        let mut host =
            ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(2, 2, 16)).unwrap();
        let doc_vertices = sub.vertices_by_path().len();
        let doc_edges = sub.edges().len();
        let add = add_subgraph(&mut host, &sub).expect("add");
        assert!(
            add.stats.vertex_writes + add.stats.edge_writes <= doc_vertices + doc_edges,
            "T{k} add touched {} > n+m {}",
            add.stats.vertex_writes + add.stats.edge_writes,
            doc_vertices + doc_edges
        );

        // Distinct outside ancestors of the member-forest roots.
        let anchors = 1usize; // every T request anchors at the cluster root
        let update = update_metadata(&mut host, &sub, JobId::new(0, 1)).expect("update");
        assert!(
            update.vertex_writes + update.ancestor_writes <= doc_vertices + doc_edges + anchors,
            "T{k} update touched {} > n+m+p {}",
            update.vertex_writes + update.ancestor_writes,
            doc_vertices + doc_edges + anchors
        );
        assert!(host.verify_aggregates());
    }

    // Linearity of add/update durations over the suite.
    let data = bench_data();
    let (beta, beta0, r2, count) = fit_phase(&data.records, Phase::AddUpdate, Transport::Intra);
    assert!(
        r2 >= 0.95,
        "add/update fit R2 {r2} below 0.95 (beta {beta:.3e}, beta0 {beta0:.3e}, {count} samples)"
    );
    println!(
        "criterion 5: PASS — touch budgets hold exactly on T1..T7; add/update fit over {count} \
         samples: beta {beta:.4e}, beta0 {beta0:.4e}, R2 {r2:.5} >= 0.95"
    );
}

#[test]
fn criterion_06_comms_model_structure() {
    let data = bench_data();
    let (bi, b0i, r2i, ni) = fit_phase(&data.records, Phase::Comms, Transport::Inter);
    let (ba, b0a, r2a, na) = fit_phase(&data.records, Phase::Comms, Transport::Intra);
    assert!(r2i >= 0.95, "inter comms R2 {r2i} below 0.95 ({ni} samples)");
    assert!(r2a >= 0.95, "intra comms R2 {r2a} below 0.95 ({na} samples)");
    assert!(
        b0i > b0a,
        "inter intercept {b0i:.3e} does not exceed intra intercept {b0a:.3e}"
    );
    println!(
        "criterion 6: PASS — comms fits: inter beta {bi:.4e} beta0 {b0i:.4e} R2 {r2i:.5} \
         ({ni} samples); intra beta {ba:.4e} beta0 {b0a:.4e} R2 {r2a:.5} ({na} samples); \
         inter intercept exceeds intra"
    );
}

#[test]
fn criterion_07_bound_dominance_and_limit() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b0d);
    for trial in 0..1000 {
        let b = rng.random_range(2.0..=8.0);
        let s0 = 10f64.powf(rng.random_range(1.0..=6.0));
        let beta = rng.random_range(1e-6..=2e-5);
        let beta0 = rng.random_range(5e-4..=5e-3);
        let params = BoundParams {
            b,
            s0,
            t0: beta * s0 + beta0,
            beta,
            beta0,
        };
        let bound = geometric_bound(&params);
        let sum = common::bound_partial_sum(b, s0, beta, beta0);
        assert!(
            bound >= sum,
            "trial {trial}: bound {bound} < partial sum {sum} for {params:?}"
        );
    }
    let params = BoundParams {
        b: 2.0,
        s0: 1e6,
        t0: 1.0,
        beta: 1.0 / 1e6,
        beta0: 0.0,
    };
    let ratio = geometric_bound(&params) / params.t0;
    assert!((1.99..=2.0).contains(&ratio), "limit ratio {ratio}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "criterion 7: PASS — bound dominates the partial sum on 1000 draws; \
         bound/t0 = {ratio:.6} in [1.99, 2.0] ({elapsed:?} < 1s)"
    );
}

#[test]
fn criterion_08_aggregate_model_arithmetic() {
    let t0 = 0.002871;
    let got = predict_t_mg(94.0, 1.0, 3.0, 4.0, &reference_coefficients(), t0);
    // Hand-evaluated closed form, digit by digit:
    //   2*t0                      = 0.005742
    //   1.5829e-5*94 + 0.0020992  = 0.003587126
    //   3*(9.0824e-6*94+6.3196e-4)= 0.0044571168
    //   4*94*3.4583e-5            = 0.013003208
    let expected = 0.026_789_450_8_f64;
    let rel = ((got - expected) / expected).abs();
    assert!(rel <= 1e-12, "relative error {rel}");
    println!(
        "criterion 8: PASS — predicted {got:.10} matches the hand-evaluated {expected:.10} \
         (relative error {rel:.2e} <= 1e-12)"
    );
}

#[test]
fn criterion_09_provider_path() {
    // Table-exact sizes for the CPU-only instance types.
    let mut provider = MockProvider::with_builtin_catalog(11);
    let micro = provider
        .request(&JobSpec::parse("@type:t2.micro").unwrap(), "/cluster0")
        .unwrap();
    assert_eq!(micro.size(), 6);
    let xl2 = provider
        .request(&JobSpec::parse("@type:t2.2xlarge").unwrap(), "/cluster0")
        .unwrap();
    assert_eq!(xl2.size(), 82);

    // A ten-instance single-type fleet satisfied through the hierarchy.
    let mut levels = vec![LevelSetup::new(ClusterSpec::new(2, 1, 2))];
    levels[0].prealloc = Prealloc::All;
    let mut l1 = LevelSetup::new(ClusterSpec::new(1, 1, 2));
    l1.prealloc = Prealloc::All;
    levels.push(l1);
    let h = InprocHierarchy::build(&levels).unwrap();
    h.instances[0]
        .borrow_mut()
        .attach_provider_for_tests(Box::new(MockProvider::with_builtin_catalog(11)), false);
    let (_, result) = h.grow_at_leaf(&JobSpec::parse("@fleet:10:t2.micro").unwrap()).unwrap();
    assert_eq!(result.outcome, GrowOutcome::SatisfiedByProvider);
    let sub = result.subgraph.as_ref().unwrap();
    let node_paths: Vec<String> = sub
        .vertices_by_path()
        .iter()
        .filter(|v| v.vertex.kind == ResourceKind::Node)
        .map(|v| v.vertex.path.clone())
        .collect();
    assert_eq!(node_paths.len(), 10, "ten instances");
    for p in &node_paths {
        let zones = p.split('/').filter(|seg| seg.starts_with("ec2-zone")).count();
        assert_eq!(zones, 1, "zone interposition on {p}");
    }
    assert!(h.inclusion_chain_holds(), "inclusion after provider grow");

    // Specialization: a nested provider's externals never reach the ancestor.
    let h2 = InprocHierarchy::build(&levels).unwrap();
    h2.instances[1]
        .borrow_mut()
        .attach_provider_for_tests(Box::new(MockProvider::with_builtin_catalog(11)), true);
    let (job, result) = h2.grow_at_leaf(&JobSpec::parse("@fleet:10:t2.micro").unwrap()).unwrap();
    assert_eq!(result.outcome, GrowOutcome::SatisfiedByProvider);
    let externals = h2.level(1).external_paths().clone();
    assert!(!externals.is_empty());
    for p in &externals {
        assert!(
            h2.level(0).graph().lookup_by_path(p).is_none(),
            "external {p} leaked to the ancestor"
        );
    }
    assert!(h2.inclusion_chain_holds(), "specialized inclusion");
    h2.shrink_at_leaf(job, &result).unwrap();
    assert!(check_inclusion(h2.level(1).graph(), h2.level(0).graph()));
    println!(
        "criterion 9: PASS — t2.micro size 6, t2.2xlarge size 82; ten-instance fleet grows the \
         hierarchy zone-interposed with inclusion and specialization invariants holding"
    );
}

#[test]
fn criterion_10_fit_recovery_from_reference_rows() {
    let coeffs = reference_coefficients();
    let rows = [
        ("inter", coeffs.inter_beta, coeffs.inter_beta0),
        ("intra", coeffs.intra_beta, coeffs.intra_beta0),
        ("attach", coeffs.attach_beta, coeffs.attach_beta0),
    ];
    let sizes = [70u64, 140, 280, 560, 1120, 2240, 4480];
    for (name, beta, beta0) in rows {
        let mut rng = ChaCha8Rng::seed_from_u64(0xf17);
        let mut samples = Vec::new();
        for _ in 0..15 {
            for n in sizes {
                let noise = 1.0 + rng.random_range(-0.01..0.01);
                samples.push((n as f64, (beta * n as f64 + beta0) * noise));
            }
        }
        let model = fit_linear(&samples).expect("fit succeeds");
        let rel = ((model.beta - beta) / beta).abs();
        assert!(rel <= 0.05, "{name}: beta off by {rel:.4}");
        assert!(model.mape <= 0.02, "{name}: MAPE {:.4} above 0.02", model.mape);
        println!(
            "criterion 10 ({name}): beta {:.4e} vs {beta:.4e} (rel {rel:.4}), MAPE {:.4}",
            model.beta, model.mape
        );
    }
    println!("criterion 10: PASS — reference-row recovery within 5% with MAPE <= 0.02, seeded 5-fold CV");
}

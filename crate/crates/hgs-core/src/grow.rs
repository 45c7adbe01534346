//! Graph transforms for elastic growth: subgraph addition, localized
//! metadata update, their composition, and the subtractive analog.
//!
//! `add_subgraph` is pure topology: it inserts exactly the missing vertices
//! and edges, locating attachment points through the path index, and runs in
//! O(n + m) for a document of n vertices and m edges regardless of host graph
//! size. `update_metadata` applies the allocation and repairs the pruning
//! aggregates, touching only the subgraph vertices and their ancestor chain.
//! `run_grow` composes the two. Aggregates of vertices inserted by
//! `add_subgraph` are pending until `update_metadata` completes them, which
//! keeps each half inside its touch budget.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{parent_path_of, GraphError, JobId, ResourceGraph, VertexId};
use crate::jgf::Subgraph;
use crate::matcher::CreatedFrom;

#[derive(Debug, Error)]
pub enum GrowError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("subgraph does not attach to the graph: vertex {0:?} has no resolvable parent")]
    Orphan(String),
    #[error("subgraph vertex {0:?} is not present in the graph")]
    MissingMember(String),
    #[error("edge {source_path:?} -> {target_path:?} would give the existing target a second parent")]
    SecondParent {
        source_path: String,
        target_path: String,
    },
    #[error("vertex {path:?} disagrees with the existing vertex at that path on {field}")]
    VertexMismatch { path: String, field: &'static str },
}

/// Instrumentation for the locality contracts: state writes performed by one
/// transform call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TouchStats {
    /// Vertices inserted (add) or whose metadata was written (update).
    pub vertex_writes: usize,
    /// Document edges processed during add.
    pub edge_writes: usize,
    /// Outside-ancestor aggregate writes during update.
    pub ancestor_writes: usize,
}

impl TouchStats {
    pub fn touched(&self) -> usize {
        self.vertex_writes + self.edge_writes + self.ancestor_writes
    }
}

/// How a grow request was ultimately satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowOutcome {
    SatisfiedLocally,
    SatisfiedByParent,
    SatisfiedByProvider,
    Failed,
}

/// Phase durations observed by one instance for one grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub match_s: f64,
    pub comms_s: f64,
    pub add_update_s: f64,
}

/// Result of a grow request at the issuing instance.
#[derive(Debug, Clone)]
pub struct GrowResult {
    pub outcome: GrowOutcome,
    pub subgraph: Option<Subgraph>,
    pub levels_traversed: u32,
    pub timings: PhaseTimings,
}

impl GrowResult {
    pub fn failed(timings: PhaseTimings) -> Self {
        GrowResult {
            outcome: GrowOutcome::Failed,
            subgraph: None,
            levels_traversed: 1,
            timings,
        }
    }
}

struct AddPlan {
    /// Paths to insert, in path order (parents before children).
    inserts: Vec<String>,
    /// Document edges resolved to (source path, target path).
    edges: Vec<(String, String)>,
}

fn plan_add(g: &ResourceGraph, sub: &Subgraph) -> Result<AddPlan, GrowError> {
    let doc_paths: BTreeSet<&str> = sub
        .vertices_by_path()
        .iter()
        .map(|v| v.vertex.path.as_str())
        .collect();
    let mut inserts: Vec<String> = Vec::new();
    for entry in sub.vertices_by_path() {
        let path = entry.vertex.path.as_str();
        match g.lookup_by_path(path) {
            Some(existing) => {
                // The addition is the identity for vertices already present,
                // but the payload must agree with what is there.
                let have = g.vertex(existing).expect("indexed vertex");
                if have.kind != entry.vertex.kind {
                    return Err(GrowError::VertexMismatch {
                        path: path.to_string(),
                        field: "type",
                    });
                }
                if have.unit_size != entry.vertex.unit_size {
                    return Err(GrowError::VertexMismatch {
                        path: path.to_string(),
                        field: "unit_size",
                    });
                }
            }
            None => {
                let parent = parent_path_of(path).ok_or_else(|| GrowError::Orphan(path.to_string()))?;
                if g.lookup_by_path(parent).is_none() && !doc_paths.contains(parent) {
                    return Err(GrowError::Orphan(path.to_string()));
                }
                inserts.push(path.to_string());
            }
        }
    }
    // Vertices arrive path-sorted, so parents precede children.
    let by_id: BTreeMap<VertexId, &str> = sub
        .vertices_by_path()
        .iter()
        .map(|v| (v.vertex.id, v.vertex.path.as_str()))
        .collect();
    let mut edges = Vec::new();
    for e in sub.edges() {
        let source = by_id[&e.source].to_string();
        let target = by_id[&e.target].to_string();
        if let Some(target_id) = g.lookup_by_path(&target) {
            match g.parent_of(target_id) {
                Some(p) if g.vertex(p).expect("parent vertex").path == source => {}
                _ => {
                    return Err(GrowError::SecondParent {
                        source_path: source,
                        target_path: target,
                    });
                }
            }
        }
        edges.push((source, target));
    }
    Ok(AddPlan { inserts, edges })
}

/// What one `add_subgraph` call did.
#[derive(Debug, Clone, Default)]
pub struct AddOutcome {
    pub stats: TouchStats,
    /// Paths inserted by this call, in path order.
    pub inserted: Vec<String>,
}

/// Inserts exactly the missing vertices and edges of `sub` into `g`.
///
/// Vertices are attached under the parent named by their path; the
/// attachment point is found through the path index in constant time.
/// Re-adding a subgraph that is already present is a no-op. Aggregates of
/// inserted vertices are pending until the next `update_metadata`.
pub fn add_subgraph(g: &mut ResourceGraph, sub: &Subgraph) -> Result<AddOutcome, GrowError> {
    let plan = plan_add(g, sub)?;
    let by_path: BTreeMap<&str, &crate::jgf::SubgraphVertex> = sub
        .vertices_by_path()
        .iter()
        .map(|v| (v.vertex.path.as_str(), v))
        .collect();
    let mut outcome = AddOutcome::default();
    for path in &plan.inserts {
        let entry = by_path[path.as_str()];
        let parent_path = parent_path_of(path).expect("validated in plan_add");
        let parent = g
            .lookup_by_path(parent_path)
            .ok_or_else(|| GrowError::Orphan(path.clone()))?;
        g.insert_pending_vertex(parent, &entry.vertex)?;
        outcome.stats.vertex_writes += 1;
        outcome.inserted.push(path.clone());
    }
    outcome.stats.edge_writes = plan.edges.len();
    Ok(outcome)
}

/// Marks every member vertex of `sub` as allocated to `job` and repairs the
/// pruning aggregates along the members and their outside ancestor chain
/// only. Idempotent for vertices already holding `job`.
pub fn update_metadata(
    g: &mut ResourceGraph,
    sub: &Subgraph,
    job: JobId,
) -> Result<TouchStats, GrowError> {
    if sub.is_empty() {
        return Ok(TouchStats::default());
    }
    let mut members: BTreeSet<VertexId> = BTreeSet::new();
    for entry in sub.members() {
        let id = g
            .lookup_by_path(&entry.vertex.path)
            .ok_or_else(|| GrowError::MissingMember(entry.vertex.path.clone()))?;
        members.insert(id);
    }
    let mut vertex_writes = 0usize;
    let total = g.apply_member_deltas(&members, |g, v| {
        vertex_writes += 1;
        let pending = !g.has_aggregate_entry(v);
        if pending {
            g.set_aggregate(v, 0);
        }
        let was_free = g.add_job_to_vertex(v, job);
        let is_core = g.vertex(v).expect("member vertex").kind == crate::graph::ResourceKind::Core;
        if !pending && was_free && is_core {
            -1
        } else {
            // Fresh vertices enter with their post-allocation contribution,
            // which is zero: they are born allocated.
            0
        }
    });
    let mut ancestor_writes = total.saturating_sub(vertex_writes);
    ancestor_writes += complete_anchor_aggregates(g, sub, &mut vertex_writes);
    // Keep the job registry in step with the vertex tables.
    match g.job_mut(job) {
        Some(alloc) => {
            alloc.vertices.extend(members.iter().copied());
        }
        None => {
            g.register_job(crate::matcher::Allocation {
                job,
                vertices: members.clone(),
                created_from: CreatedFrom::MatchGrow,
                added_topology: false,
            });
        }
    }
    Ok(TouchStats {
        vertex_writes,
        edge_writes: 0,
        ancestor_writes,
    })
}

/// Completes pending aggregates for freshly inserted non-member vertices
/// (zone-style subgraph roots carried without an in-edge). Their value is
/// their own contribution plus their children's settled aggregates, and any
/// nonzero total is pushed up the outside ancestor chain.
fn complete_anchor_aggregates(
    g: &mut ResourceGraph,
    sub: &Subgraph,
    vertex_writes: &mut usize,
) -> usize {
    let mut pending: Vec<VertexId> = sub
        .rootless_vertices()
        .iter()
        .filter_map(|entry| g.lookup_by_path(&entry.vertex.path))
        .filter(|id| !g.has_aggregate_entry(*id))
        .collect();
    // Deepest first so nested pendings settle before their parents.
    pending.sort_by(|a, b| {
        g.vertex(*b)
            .expect("pending vertex")
            .path
            .cmp(&g.vertex(*a).expect("pending vertex").path)
    });
    let mut ancestor_writes = 0usize;
    for v in pending {
        let own = u64::from(
            g.vertex(v).expect("pending vertex").kind == crate::graph::ResourceKind::Core
                && g.is_free(v),
        );
        let total: u64 = own
            + g.children_of(v)
                .iter()
                .map(|c| g.aggregate(*c))
                .sum::<u64>();
        g.set_aggregate(v, total);
        *vertex_writes += 1;
        if total > 0 {
            let mut cur = g.parent_of(v);
            while let Some(p) = cur {
                g.set_aggregate(p, g.aggregate(p) + total);
                ancestor_writes += 1;
                cur = g.parent_of(p);
            }
        }
    }
    ancestor_writes
}

/// Stats for one `run_grow` call.
#[derive(Debug, Clone, Default)]
pub struct RunGrowStats {
    pub add: Option<AddOutcome>,
    pub update: TouchStats,
}

/// The grow application step: when `add` is set the subgraph is first
/// inserted, then the scheduler metadata is updated; when resources were
/// found locally only the metadata update runs.
pub fn run_grow(
    g: &mut ResourceGraph,
    sub: &Subgraph,
    add: bool,
    job: JobId,
) -> Result<RunGrowStats, GrowError> {
    let mut stats = RunGrowStats::default();
    if add {
        stats.add = Some(add_subgraph(g, sub)?);
    }
    stats.update = update_metadata(g, sub, job)?;
    if let Some(alloc) = g.job_mut(job) {
        alloc.created_from = CreatedFrom::MatchGrow;
        if add {
            alloc.added_topology = true;
        }
    }
    Ok(stats)
}

/// Removes the whole subtrees rooted at `paths` from `g`.
///
/// Every vertex in those subtrees must be free or held only by `job` (when
/// given); a foreign live allocation refuses the whole removal and nothing
/// changes. Nested paths collapse into their outermost root.
pub fn remove_subgraph(
    g: &mut ResourceGraph,
    paths: &[String],
    job: Option<JobId>,
) -> Result<usize, GrowError> {
    let mut roots: Vec<VertexId> = Vec::new();
    let mut sorted: Vec<&String> = paths.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut covered: Vec<String> = Vec::new();
    for path in sorted {
        if covered
            .iter()
            .any(|c| path.as_str() == c || path.starts_with(&format!("{c}/")))
        {
            continue; // nested under an earlier root
        }
        let id = g
            .lookup_by_path(path)
            .ok_or_else(|| GraphError::UnknownPath(path.clone()))?;
        if id == g.root() {
            return Err(GraphError::RemoveRoot(path.clone()).into());
        }
        roots.push(id);
        covered.push(path.clone());
    }
    // Validate allocations across all subtrees before touching anything.
    for r in &roots {
        for v in g.dfs_subtree(*r) {
            let holders = g.jobs_on(v);
            let foreign: Vec<String> = holders
                .iter()
                .filter(|j| Some(**j) != job)
                .map(|j| j.to_string())
                .collect();
            if !foreign.is_empty() {
                return Err(GraphError::ForeignAllocation {
                    path: g.vertex(v).expect("subtree vertex").path.clone(),
                    holders: foreign.join(","),
                }
                .into());
            }
        }
    }
    Ok(g.remove_subtrees(&roots)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ClusterSpec, ResourceGraph};
    use crate::matcher::{match_allocate, MatchPolicy};

    fn l2_graph() -> ResourceGraph {
        ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(4, 2, 16)).unwrap()
    }

    fn t6_subgraph() -> Subgraph {
        // 2 nodes / 4 sockets / 64 cores, named clear of the host's nodes.
        let donor = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(12, 2, 16)).unwrap();
        let members: BTreeSet<VertexId> = donor
            .vertices()
            .filter(|v| v.path.starts_with("/cluster0/node10") || v.path.starts_with("/cluster0/node11"))
            .map(|v| v.id)
            .collect();
        assert_eq!(members.len(), 70);
        donor.extract_subgraph(&members)
    }

    #[test]
    fn add_grows_by_subgraph_size() {
        let mut g = l2_graph();
        let sub = t6_subgraph();
        assert_eq!(sub.size(), 140);
        let before = g.size();
        let outcome = add_subgraph(&mut g, &sub).unwrap();
        assert_eq!(g.size(), before + 140);
        assert_eq!(outcome.stats.vertex_writes, 70);
        assert_eq!(outcome.inserted.len(), 70);
        assert!(g.check_tree());
    }

    #[test]
    fn add_is_idempotent() {
        let mut g = l2_graph();
        let sub = t6_subgraph();
        add_subgraph(&mut g, &sub).unwrap();
        update_metadata(&mut g, &sub, JobId::new(1, 1)).unwrap();
        let hash = g.state_hash();
        let outcome = add_subgraph(&mut g, &sub).unwrap();
        assert_eq!(outcome.stats.vertex_writes, 0);
        assert!(outcome.inserted.is_empty());
        assert_eq!(g.state_hash(), hash);
    }

    #[test]
    fn add_inserts_only_the_difference() {
        let mut g = l2_graph();
        let sub = t6_subgraph();
        // Pre-insert one of the two nodes by adding a smaller extract first.
        let donor = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(12, 2, 16)).unwrap();
        let first: BTreeSet<VertexId> = donor
            .vertices()
            .filter(|v| v.path.starts_with("/cluster0/node10"))
            .map(|v| v.id)
            .collect();
        let partial = donor.extract_subgraph(&first);
        add_subgraph(&mut g, &partial).unwrap();
        update_metadata(&mut g, &partial, JobId::new(1, 9)).unwrap();

        let paths_before: BTreeSet<String> = g.vertices().map(|v| v.path.clone()).collect();
        add_subgraph(&mut g, &sub).unwrap();
        let paths_after: BTreeSet<String> = g.vertices().map(|v| v.path.clone()).collect();
        let added: BTreeSet<String> = paths_after.difference(&paths_before).cloned().collect();
        let expected: BTreeSet<String> = sub
            .member_paths()
            .difference(&paths_before)
            .cloned()
            .collect();
        assert_eq!(added, expected);
        assert_eq!(added.len(), 35);
    }

    #[test]
    fn orphan_forest_rejected() {
        let mut g = l2_graph();
        // A forest rooted under a cluster the host does not have.
        let donor = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(1, 1, 1)).unwrap();
        let mut foreign = Subgraph::default();
        for entry in donor.extract_all(true).vertices_by_path() {
            let mut vert = entry.vertex.clone();
            vert.path = vert.path.replace("/cluster0", "/elsewhere0");
            if vert.basename == "cluster0" {
                vert.basename = "elsewhere0".into();
            }
            foreign.push_vertex(vert, entry.jobs.clone());
        }
        for e in donor.extract_all(true).edges() {
            foreign.push_edge(e.source, e.target);
        }
        foreign.canonicalize();
        let before = g.state_hash();
        let err = add_subgraph(&mut g, &foreign).unwrap_err();
        assert!(matches!(err, GrowError::Orphan(_)));
        assert_eq!(g.state_hash(), before);
    }

    #[test]
    fn second_parent_rejected() {
        let mut g = l2_graph();
        // An edge claiming existing node0 hangs under node1.
        let node0 = g.lookup_by_path("/cluster0/node0").unwrap();
        let node1 = g.lookup_by_path("/cluster0/node1").unwrap();
        let mut conflict = Subgraph::default();
        conflict.push_vertex(g.vertex(node1).unwrap().clone(), Default::default());
        conflict.push_vertex(g.vertex(node0).unwrap().clone(), Default::default());
        conflict.push_edge(node1, node0);
        conflict.canonicalize();
        let err = add_subgraph(&mut g, &conflict).unwrap_err();
        assert!(matches!(err, GrowError::SecondParent { .. }));
    }

    #[test]
    fn update_is_localized_and_consistent() {
        let mut g = l2_graph();
        let sub = t6_subgraph();
        add_subgraph(&mut g, &sub).unwrap();
        let root_agg_before = g.aggregate(g.root());
        let stats = update_metadata(&mut g, &sub, JobId::new(2, 1)).unwrap();
        // New cores arrive allocated: the root's free-core count is unchanged.
        assert_eq!(g.aggregate(g.root()), root_agg_before);
        assert!(g.verify_aggregates());
        assert_eq!(stats.vertex_writes, 70);
        assert!(stats.touched() <= 70 + 70 + 1);
        for entry in sub.members() {
            let id = g.lookup_by_path(&entry.vertex.path).unwrap();
            assert!(g.jobs_on(id).contains(&JobId::new(2, 1)));
        }
    }

    #[test]
    fn update_empty_subgraph_is_noop() {
        let mut g = l2_graph();
        let hash = g.state_hash();
        let stats = update_metadata(&mut g, &Subgraph::default(), JobId::new(0, 1)).unwrap();
        assert_eq!(stats.touched(), 0);
        assert_eq!(g.state_hash(), hash);
    }

    #[test]
    fn deep_attach_touch_budget() {
        // Attach n vertices at depth 4: touched <= n + 4 outside ancestors.
        let mut g = l2_graph();
        let donor = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(1, 2, 18)).unwrap();
        let members: BTreeSet<VertexId> = donor
            .vertices()
            .filter(|v| {
                v.path.starts_with("/cluster0/node0/socket0/core16")
                    || v.path.starts_with("/cluster0/node0/socket0/core17")
            })
            .map(|v| v.id)
            .collect();
        let sub = donor.extract_subgraph(&members);
        let n = sub.members().len();
        add_subgraph(&mut g, &sub).unwrap();
        let stats = update_metadata(&mut g, &sub, JobId::new(3, 1)).unwrap();
        assert!(stats.vertex_writes + stats.ancestor_writes <= n + 4);
        assert!(g.verify_aggregates());
    }

    #[test]
    fn run_grow_local_leaves_topology_alone() {
        let mut g = ResourceGraph::build_synthetic_cluster(&ClusterSpec::new(2, 2, 16)).unwrap();
        let spec = crate::jobspec::JobSpec::parse("node:1 socket:2 core:32").unwrap();
        let job = JobId::new(0, 1);
        let sub = match_allocate(&mut g, &spec, job, &MatchPolicy::LowestPath)
            .unwrap()
            .expect("free graph satisfies T7");
        let (v, e) = (g.vertex_count(), g.edge_count());
        run_grow(&mut g, &sub, false, job).unwrap();
        assert_eq!((g.vertex_count(), g.edge_count()), (v, e));
        assert!(g.verify_aggregates());
        let alloc = g.allocation(job).unwrap();
        assert_eq!(alloc.created_from, CreatedFrom::MatchGrow);
        assert!(!alloc.added_topology);
    }

    #[test]
    fn grow_then_remove_restores_state() {
        let mut g = l2_graph();
        let before = g.state_hash();
        let sub = t6_subgraph();
        let job = JobId::new(4, 2);
        run_grow(&mut g, &sub, true, job).unwrap();
        assert!(g.verify_aggregates());
        let roots: Vec<String> = sub
            .rootless_vertices()
            .iter()
            .flat_map(|anchor| {
                sub.edges()
                    .iter()
                    .filter(|e| e.source == anchor.vertex.id)
                    .map(|e| sub.vertex_by_id(e.target).unwrap().vertex.path.clone())
                    .collect::<Vec<_>>()
            })
            .collect();
        remove_subgraph(&mut g, &roots, Some(job)).unwrap();
        assert_eq!(g.state_hash(), before);
        assert!(g.verify_aggregates());
        assert!(g.check_tree());
    }

    #[test]
    fn remove_refuses_foreign_allocations() {
        let mut g = l2_graph();
        let job = JobId::new(0, 5);
        g.allocate_subtree("/cluster0/node2", job).unwrap();
        let hash = g.state_hash();
        let err = remove_subgraph(&mut g, &["/cluster0/node2".to_string()], Some(JobId::new(0, 6)))
            .unwrap_err();
        assert!(matches!(err, GrowError::Graph(GraphError::ForeignAllocation { .. })));
        assert_eq!(g.state_hash(), hash);
    }
}

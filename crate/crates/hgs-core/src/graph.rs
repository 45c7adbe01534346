//! The directed resource graph: typed vertices, containment edges, a path
//! index, and per-vertex scheduler metadata (allocations and pruning
//! aggregates).
//!
//! Graphs are rooted containment trees. Every vertex is addressed by its
//! graph path (the '/'-joined basenames from the root, e.g.
//! `/cluster0/node3/socket1/core12`); vertex ids are graph-local integers and
//! never cross an instance boundary. The pruning aggregate on each vertex
//! counts the free core vertices in the subtree rooted there, which lets the
//! matcher skip exhausted subtrees.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jgf::Subgraph;
use crate::matcher::{Allocation, CreatedFrom};

/// Graph-local vertex identifier. Cross-level identity is by path, never id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId(pub u64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Job identifier: the level that originated the request plus a per-instance
/// sequence number. Keeping the namespace per-level means ids minted by
/// different instances can never collide once they travel across the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct JobId {
    pub level: u32,
    pub seq: u64,
}

impl JobId {
    pub fn new(level: u32, seq: u64) -> Self {
        JobId { level, seq }
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.seq)
    }
}

impl FromStr for JobId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (level, seq) = s
            .split_once(':')
            .ok_or_else(|| format!("malformed job id {s:?}: expected \"level:seq\""))?;
        Ok(JobId {
            level: level.parse().map_err(|e| format!("bad job level in {s:?}: {e}"))?,
            seq: seq.parse().map_err(|e| format!("bad job seq in {s:?}: {e}"))?,
        })
    }
}

impl TryFrom<String> for JobId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<JobId> for String {
    fn from(j: JobId) -> String {
        j.to_string()
    }
}

/// Resource kind. The containment order is cluster > zone > rack > node >
/// socket > {core, gpu, memory}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Cluster,
    Zone,
    Rack,
    Node,
    Socket,
    Core,
    Gpu,
    Memory,
}

impl ResourceKind {
    /// Depth rank in the containment order; children must rank strictly
    /// deeper than their parents in a request.
    pub fn depth(self) -> u8 {
        match self {
            ResourceKind::Cluster => 0,
            ResourceKind::Zone => 1,
            ResourceKind::Rack => 2,
            ResourceKind::Node => 3,
            ResourceKind::Socket => 4,
            ResourceKind::Core | ResourceKind::Gpu | ResourceKind::Memory => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Cluster => "cluster",
            ResourceKind::Zone => "zone",
            ResourceKind::Rack => "rack",
            ResourceKind::Node => "node",
            ResourceKind::Socket => "socket",
            ResourceKind::Core => "core",
            ResourceKind::Gpu => "gpu",
            ResourceKind::Memory => "memory",
        }
    }
}

impl FromStr for ResourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cluster" => Ok(ResourceKind::Cluster),
            "zone" => Ok(ResourceKind::Zone),
            "rack" => Ok(ResourceKind::Rack),
            "node" => Ok(ResourceKind::Node),
            "socket" => Ok(ResourceKind::Socket),
            "core" => Ok(ResourceKind::Core),
            "gpu" => Ok(ResourceKind::Gpu),
            "memory" => Ok(ResourceKind::Memory),
            _ => Err(format!("unknown resource kind {s:?}")),
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed resource vertex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceVertex {
    pub id: VertexId,
    #[serde(rename = "type")]
    pub kind: ResourceKind,
    pub basename: String,
    /// Unit count the vertex stands for (GB for memory, 1 otherwise).
    pub unit_size: u64,
    /// '/'-joined basenames from the root; unique within a graph.
    pub path: String,
    /// Owner hint; -1 when unset.
    pub rank: i64,
}

/// A containment edge. The relation is always `"contains"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEdge {
    pub source: VertexId,
    pub target: VertexId,
    pub relation: String,
}

pub const CONTAINS: &str = "contains";

/// Per-vertex scheduler state: the allocation table (job ids holding the
/// vertex) and the pruning aggregate (free vertices of the filter kind in the
/// subtree rooted at the vertex). The filter kind is fixed to cores.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchedulerMetadata {
    allocations: BTreeMap<VertexId, BTreeSet<JobId>>,
    aggregates: BTreeMap<VertexId, u64>,
}

impl SchedulerMetadata {
    pub fn jobs_on(&self, v: VertexId) -> &BTreeSet<JobId> {
        static EMPTY: BTreeSet<JobId> = BTreeSet::new();
        self.allocations.get(&v).unwrap_or(&EMPTY)
    }

    pub fn aggregate(&self, v: VertexId) -> Option<u64> {
        self.aggregates.get(&v).copied()
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph spec produces no resource vertices")]
    EmptySpec,
    #[error("invalid graph spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate path {0:?}")]
    DuplicatePath(String),
    #[error("unknown vertex id {0}")]
    UnknownVertex(VertexId),
    #[error("unknown path {0:?}")]
    UnknownPath(String),
    #[error("edge {source_vertex} -> {target_vertex} would give {target_vertex} a second parent")]
    SecondParent {
        source_vertex: VertexId,
        target_vertex: VertexId,
    },
    #[error("self edge on vertex {0}")]
    SelfEdge(VertexId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} already present in the graph")]
    DuplicateJob(JobId),
    #[error("vertex {path:?} is held by another job ({holders})")]
    ForeignAllocation { path: String, holders: String },
    #[error("path {0:?} does not root a whole subtree selection")]
    PartialSubtree(String),
    #[error("cannot remove the graph root {0:?}")]
    RemoveRoot(String),
}

/// Shape of a synthetic test cluster.
///
/// Counts nest: `sockets` is per node, `cores` is per socket, `gpus` is per
/// node, and `memory` is unit-sized (1 GB) vertices per socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub nodes: u64,
    pub sockets_per_node: u64,
    pub cores_per_socket: u64,
    #[serde(default)]
    pub gpus_per_node: u64,
    #[serde(default)]
    pub memory_per_socket: u64,
}

impl ClusterSpec {
    pub fn new(nodes: u64, sockets_per_node: u64, cores_per_socket: u64) -> Self {
        ClusterSpec {
            nodes,
            sockets_per_node,
            cores_per_socket,
            gpus_per_node: 0,
            memory_per_socket: 0,
        }
    }
}

/// The resource graph: an id-indexed vertex set, containment edges held as a
/// parent map plus ordered child lists, a path index, and scheduler metadata.
#[derive(Debug, Clone)]
pub struct ResourceGraph {
    vertices: BTreeMap<VertexId, ResourceVertex>,
    parent: BTreeMap<VertexId, VertexId>,
    children: BTreeMap<VertexId, Vec<VertexId>>,
    path_index: HashMap<String, VertexId>,
    metadata: SchedulerMetadata,
    jobs: BTreeMap<JobId, Allocation>,
    root: VertexId,
    next_id: u64,
}

impl ResourceGraph {
    /// Creates a graph holding only a cluster root named `basename`.
    pub fn with_root(basename: &str) -> Self {
        let root = VertexId(0);
        let path = format!("/{basename}");
        let vertex = ResourceVertex {
            id: root,
            kind: ResourceKind::Cluster,
            basename: basename.to_string(),
            unit_size: 1,
            path: path.clone(),
            rank: -1,
        };
        let mut vertices = BTreeMap::new();
        vertices.insert(root, vertex);
        let mut path_index = HashMap::new();
        path_index.insert(path, root);
        let mut metadata = SchedulerMetadata::default();
        metadata.aggregates.insert(root, 0);
        ResourceGraph {
            vertices,
            parent: BTreeMap::new(),
            children: BTreeMap::new(),
            path_index,
            metadata,
            jobs: BTreeMap::new(),
            root,
            next_id: 1,
        }
    }

    /// Builds a synthetic cluster graph for the given shape. Ids and paths
    /// are deterministic for a given spec.
    pub fn build_synthetic_cluster(spec: &ClusterSpec) -> Result<Self, GraphError> {
        if spec.nodes == 0 {
            return Err(GraphError::EmptySpec);
        }
        if spec.cores_per_socket > 0 && spec.sockets_per_node == 0 {
            return Err(GraphError::InvalidSpec(
                "cores per socket require at least one socket per node".into(),
            ));
        }
        if spec.memory_per_socket > 0 && spec.sockets_per_node == 0 {
            return Err(GraphError::InvalidSpec(
                "memory per socket requires at least one socket per node".into(),
            ));
        }
        let mut g = ResourceGraph::with_root("cluster0");
        for n in 0..spec.nodes {
            let node = g.insert_child(g.root, ResourceKind::Node, &format!("node{n}"), 1)?;
            for gp in 0..spec.gpus_per_node {
                g.insert_child(node, ResourceKind::Gpu, &format!("gpu{gp}"), 1)?;
            }
            for s in 0..spec.sockets_per_node {
                let socket = g.insert_child(node, ResourceKind::Socket, &format!("socket{s}"), 1)?;
                for c in 0..spec.cores_per_socket {
                    g.insert_child(socket, ResourceKind::Core, &format!("core{c}"), 1)?;
                }
                for m in 0..spec.memory_per_socket {
                    g.insert_child(socket, ResourceKind::Memory, &format!("memory{m}"), 1)?;
                }
            }
        }
        debug_assert!(g.verify_aggregates());
        Ok(g)
    }

    /// Inserts a vertex under `parent`, maintaining the path index, sibling
    /// order, and the ancestor aggregates.
    pub fn insert_child(
        &mut self,
        parent: VertexId,
        kind: ResourceKind,
        basename: &str,
        unit_size: u64,
    ) -> Result<VertexId, GraphError> {
        let parent_path = self
            .vertices
            .get(&parent)
            .ok_or(GraphError::UnknownVertex(parent))?
            .path
            .clone();
        let path = format!("{parent_path}/{basename}");
        if self.path_index.contains_key(&path) {
            return Err(GraphError::DuplicatePath(path));
        }
        let id = VertexId(self.next_id);
        self.next_id += 1;
        self.vertices.insert(
            id,
            ResourceVertex {
                id,
                kind,
                basename: basename.to_string(),
                unit_size,
                path: path.clone(),
                rank: -1,
            },
        );
        self.path_index.insert(path, id);
        self.parent.insert(id, parent);
        self.attach_child_ordered(parent, id);
        let own = u64::from(kind == ResourceKind::Core);
        self.metadata.aggregates.insert(id, own);
        if own > 0 {
            let mut cur = parent;
            loop {
                *self.metadata.aggregates.entry(cur).or_insert(0) += own;
                match self.parent.get(&cur) {
                    Some(p) => cur = *p,
                    None => break,
                }
            }
        }
        Ok(id)
    }

    fn attach_child_ordered(&mut self, parent: VertexId, child: VertexId) {
        let basename = self.vertices[&child].basename.clone();
        let list = self.children.entry(parent).or_default();
        let pos = list
            .binary_search_by(|c| self.vertices[c].basename.as_str().cmp(basename.as_str()))
            .unwrap_or_else(|p| p);
        list.insert(pos, child);
    }

    pub fn root(&self) -> VertexId {
        self.root
    }

    pub fn vertex(&self, id: VertexId) -> Option<&ResourceVertex> {
        self.vertices.get(&id)
    }

    pub fn parent_of(&self, id: VertexId) -> Option<VertexId> {
        self.parent.get(&id).copied()
    }

    pub fn children_of(&self, id: VertexId) -> &[VertexId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Constant-time path lookup.
    pub fn lookup_by_path(&self, path: &str) -> Option<VertexId> {
        self.path_index.get(path).copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.len()
    }

    /// Graph size: vertex count plus edge count.
    pub fn size(&self) -> usize {
        self.vertex_count() + self.edge_count()
    }

    pub fn vertices(&self) -> impl Iterator<Item = &ResourceVertex> {
        self.vertices.values()
    }

    /// Containment edges, derived from the parent map.
    pub fn edges(&self) -> impl Iterator<Item = ResourceEdge> + '_ {
        self.parent.iter().map(|(child, parent)| ResourceEdge {
            source: *parent,
            target: *child,
            relation: CONTAINS.to_string(),
        })
    }

    pub fn metadata(&self) -> &SchedulerMetadata {
        &self.metadata
    }

    pub fn jobs_on(&self, v: VertexId) -> &BTreeSet<JobId> {
        self.metadata.jobs_on(v)
    }

    pub fn is_free(&self, v: VertexId) -> bool {
        self.metadata.jobs_on(v).is_empty()
    }

    pub fn aggregate(&self, v: VertexId) -> u64 {
        self.metadata.aggregate(v).unwrap_or(0)
    }

    pub fn allocation(&self, job: JobId) -> Option<&Allocation> {
        self.jobs.get(&job)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.jobs.values()
    }

    pub fn has_job(&self, job: JobId) -> bool {
        self.jobs.contains_key(&job)
    }

    /// Pre-order traversal of the subtree rooted at `v`, children in path
    /// order, which enumerates vertex paths in lexicographic order.
    pub fn dfs_subtree(&self, v: VertexId) -> Vec<VertexId> {
        let mut out = Vec::new();
        let mut stack = vec![v];
        while let Some(cur) = stack.pop() {
            out.push(cur);
            for child in self.children_of(cur).iter().rev() {
                stack.push(*child);
            }
        }
        out
    }

    /// Marks `vertices` as allocated to `job` and registers the allocation.
    /// Aggregates are maintained with one batched pass: subtree deltas are
    /// folded bottom-up over the member set and each distinct outside
    /// ancestor is written once.
    pub fn allocate_vertices(
        &mut self,
        job: JobId,
        members: &BTreeSet<VertexId>,
        created_from: CreatedFrom,
        added_topology: bool,
    ) -> Result<(), GraphError> {
        if self.jobs.contains_key(&job) {
            return Err(GraphError::DuplicateJob(job));
        }
        for v in members {
            if !self.vertices.contains_key(v) {
                return Err(GraphError::UnknownVertex(*v));
            }
        }
        self.apply_member_deltas(members, |g, v| {
            let entry = g.metadata.allocations.entry(v).or_default();
            let was_free = entry.is_empty();
            entry.insert(job);
            let is_core = g.vertices[&v].kind == ResourceKind::Core;
            if was_free && is_core {
                -1
            } else {
                0
            }
        });
        self.jobs.insert(
            job,
            Allocation {
                job,
                vertices: members.clone(),
                created_from,
                added_topology,
            },
        );
        Ok(())
    }

    /// Releases every vertex held by `job`. The graph topology is unchanged;
    /// aggregates are restored.
    pub fn free_job(&mut self, job: JobId) -> Result<Allocation, GraphError> {
        let alloc = self.jobs.remove(&job).ok_or(GraphError::UnknownJob(job))?;
        let members: BTreeSet<VertexId> = alloc
            .vertices
            .iter()
            .filter(|v| self.vertices.contains_key(v))
            .copied()
            .collect();
        self.apply_member_deltas(&members, |g, v| {
            let entry = g.metadata.allocations.entry(v).or_default();
            entry.remove(&job);
            let now_free = entry.is_empty();
            if now_free {
                g.metadata.allocations.remove(&v);
            }
            let is_core = g.vertices[&v].kind == ResourceKind::Core;
            if now_free && is_core {
                1
            } else {
                0
            }
        });
        Ok(alloc)
    }

    /// Applies a per-member mutation returning that member's own-contribution
    /// delta, folds subtree deltas bottom-up across the member set, and
    /// pushes each member-forest root's accumulated delta onto its distinct
    /// ancestors. Returns the number of state writes performed.
    pub(crate) fn apply_member_deltas<F>(&mut self, members: &BTreeSet<VertexId>, mut mutate: F) -> usize
    where
        F: FnMut(&mut Self, VertexId) -> i64,
    {
        // Deepest-first: sort members by path descending so children fold
        // into parents before the parents are processed.
        let mut ordered: Vec<VertexId> = members.iter().copied().collect();
        ordered.sort_by(|a, b| self.vertices[b].path.cmp(&self.vertices[a].path));

        let mut writes = 0usize;
        let mut folded: HashMap<VertexId, i64> = HashMap::new();
        let mut anchor_deltas: HashMap<VertexId, i64> = HashMap::new();
        for v in ordered {
            let own = mutate(self, v);
            writes += 1;
            let subtree = own + folded.remove(&v).unwrap_or(0);
            if subtree != 0 {
                let agg = self.metadata.aggregates.entry(v).or_insert(0);
                *agg = agg.checked_add_signed(subtree).expect("aggregate underflow");
            }
            match self.parent.get(&v) {
                Some(p) if members.contains(p) => {
                    *folded.entry(*p).or_insert(0) += subtree;
                }
                Some(p) => {
                    if subtree != 0 {
                        *anchor_deltas.entry(*p).or_insert(0) += subtree;
                    }
                }
                None => {}
            }
        }
        // Accumulate anchor deltas over each distinct outside ancestor.
        let mut outside: HashMap<VertexId, i64> = HashMap::new();
        for (anchor, delta) in anchor_deltas {
            let mut cur = Some(anchor);
            while let Some(v) = cur {
                *outside.entry(v).or_insert(0) += delta;
                cur = self.parent.get(&v).copied();
            }
        }
        for (v, delta) in outside {
            if delta != 0 {
                let agg = self.metadata.aggregates.entry(v).or_insert(0);
                *agg = agg.checked_add_signed(delta).expect("aggregate underflow");
                writes += 1;
            }
        }
        writes
    }

    /// Recomputes every aggregate from scratch and compares with the stored
    /// values.
    pub fn verify_aggregates(&self) -> bool {
        let mut computed: HashMap<VertexId, u64> = HashMap::new();
        for v in self.dfs_subtree(self.root).into_iter().rev() {
            let own = u64::from(
                self.vertices[&v].kind == ResourceKind::Core && self.is_free(v),
            );
            let total = own
                + self
                    .children_of(v)
                    .iter()
                    .map(|c| computed.get(c).copied().unwrap_or(0))
                    .sum::<u64>();
            computed.insert(v, total);
        }
        if computed.len() != self.metadata.aggregates.len() {
            return false;
        }
        computed
            .into_iter()
            .all(|(v, want)| self.metadata.aggregate(v) == Some(want))
    }

    #[cfg(test)]
    pub(crate) fn corrupt_aggregate_for_tests(&mut self, v: VertexId) {
        let agg = self.metadata.aggregates.entry(v).or_insert(0);
        *agg += 1;
    }

    /// Extracts the subgraph made of `members` plus the in-edge of every
    /// member; in-edge sources outside the member set appear as anchor
    /// entries. Allocation flags are carried.
    pub fn extract_subgraph(&self, members: &BTreeSet<VertexId>) -> Subgraph {
        let mut sub = Subgraph::default();
        let mut included: BTreeSet<VertexId> = BTreeSet::new();
        for v in members {
            let vert = &self.vertices[v];
            sub.push_vertex(vert.clone(), self.jobs_on(*v).clone());
            included.insert(*v);
        }
        for v in members {
            if let Some(p) = self.parent.get(v) {
                if !included.contains(p) && !members.contains(p) {
                    let vert = &self.vertices[p];
                    sub.push_vertex(vert.clone(), self.jobs_on(*p).clone());
                    included.insert(*p);
                }
                sub.push_edge(*p, *v);
            }
        }
        sub.canonicalize();
        sub
    }

    /// Serializes the whole graph, optionally without the root vertex (the
    /// root then appears only as the anchor of its children's in-edges).
    pub fn extract_all(&self, include_root_as_member: bool) -> Subgraph {
        let members: BTreeSet<VertexId> = self
            .vertices
            .keys()
            .copied()
            .filter(|v| include_root_as_member || *v != self.root)
            .collect();
        self.extract_subgraph(&members)
    }

    /// Materializes a subgraph document as a fresh graph. The document must
    /// contain exactly one in-edgeless vertex (the root). Allocation flags
    /// are applied when `carry_allocations` is set.
    pub fn from_subgraph(sub: &Subgraph, carry_allocations: bool) -> Result<Self, GraphError> {
        let roots = sub.rootless_vertices();
        if roots.len() != 1 {
            return Err(GraphError::InvalidSpec(format!(
                "subgraph has {} rootless vertices, expected exactly 1",
                roots.len()
            )));
        }
        let root_entry = &roots[0];
        let basename = root_entry.vertex.basename.clone();
        let mut g = ResourceGraph::with_root(&basename);
        if root_entry.vertex.path != g.vertices[&g.root].path {
            // Root deeper than "/<basename>" (e.g. a re-rooted extract) keeps
            // its original path string.
            let root_id = g.root;
            let old_path = g.vertices[&root_id].path.clone();
            g.path_index.remove(&old_path);
            let v = g.vertices.get_mut(&root_id).unwrap();
            v.path = root_entry.vertex.path.clone();
            v.kind = root_entry.vertex.kind;
            v.unit_size = root_entry.vertex.unit_size;
            v.rank = root_entry.vertex.rank;
            g.path_index.insert(root_entry.vertex.path.clone(), root_id);
        } else {
            let root_id = g.root;
            let v = g.vertices.get_mut(&root_id).unwrap();
            v.kind = root_entry.vertex.kind;
            v.unit_size = root_entry.vertex.unit_size;
            v.rank = root_entry.vertex.rank;
        }
        // Insert members in path order so parents come first.
        for entry in sub.vertices_by_path() {
            if entry.vertex.path == root_entry.vertex.path {
                continue;
            }
            let parent_path = parent_path_of(&entry.vertex.path).ok_or_else(|| {
                GraphError::InvalidSpec(format!("vertex {:?} has no parent path", entry.vertex.path))
            })?;
            let parent = g
                .lookup_by_path(parent_path)
                .ok_or_else(|| GraphError::UnknownPath(parent_path.to_string()))?;
            let id = g.insert_child(parent, entry.vertex.kind, &entry.vertex.basename, entry.vertex.unit_size)?;
            g.vertices.get_mut(&id).unwrap().rank = entry.vertex.rank;
        }
        if carry_allocations {
            let mut by_job: BTreeMap<JobId, BTreeSet<VertexId>> = BTreeMap::new();
            for entry in sub.vertices_by_path() {
                let id = g.lookup_by_path(&entry.vertex.path).unwrap();
                for job in &entry.jobs {
                    by_job.entry(*job).or_default().insert(id);
                }
            }
            for (job, members) in by_job {
                g.allocate_vertices(job, &members, CreatedFrom::MatchAllocate, false)?;
            }
        }
        debug_assert!(g.verify_aggregates());
        Ok(g)
    }

    /// Allocates every vertex (root included) to `job`; used to preload
    /// "fully busy" levels in experiments.
    pub fn allocate_all(&mut self, job: JobId) -> Result<(), GraphError> {
        let members: BTreeSet<VertexId> = self.vertices.keys().copied().collect();
        self.allocate_vertices(job, &members, CreatedFrom::MatchAllocate, false)
    }

    /// Allocates the whole subtree rooted at `path` to `job`.
    pub fn allocate_subtree(&mut self, path: &str, job: JobId) -> Result<(), GraphError> {
        let root = self
            .lookup_by_path(path)
            .ok_or_else(|| GraphError::UnknownPath(path.to_string()))?;
        let members: BTreeSet<VertexId> = self.dfs_subtree(root).into_iter().collect();
        self.allocate_vertices(job, &members, CreatedFrom::MatchAllocate, false)
    }

    /// Content hash over the path-keyed observable state: vertices with
    /// their fields and allocations, edges as path pairs, aggregates, and
    /// the job table. Vertex ids and provenance flags are excluded, so two
    /// graphs that are isomorphic by path hash identically.
    pub fn state_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut by_path: Vec<&ResourceVertex> = self.vertices.values().collect();
        by_path.sort_by(|a, b| a.path.cmp(&b.path));
        for v in by_path {
            hasher.update(v.path.as_bytes());
            hasher.update([0u8]);
            hasher.update(v.kind.as_str().as_bytes());
            hasher.update(v.basename.as_bytes());
            hasher.update(v.unit_size.to_le_bytes());
            hasher.update(v.rank.to_le_bytes());
            for job in self.metadata.jobs_on(v.id) {
                hasher.update(job.to_string().as_bytes());
                hasher.update([1u8]);
            }
            hasher.update(self.metadata.aggregate(v.id).unwrap_or(u64::MAX).to_le_bytes());
            match self.parent.get(&v.id) {
                Some(p) => hasher.update(self.vertices[p].path.as_bytes()),
                None => hasher.update(b"<root>"),
            }
            hasher.update([2u8]);
        }
        hasher.update(b"|jobs|");
        for (job, alloc) in &self.jobs {
            hasher.update(job.to_string().as_bytes());
            let mut paths: Vec<&str> = alloc
                .vertices
                .iter()
                .filter_map(|v| self.vertices.get(v).map(|vert| vert.path.as_str()))
                .collect();
            paths.sort_unstable();
            for path in paths {
                hasher.update(path.as_bytes());
                hasher.update([3u8]);
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Removes whole subtrees rooted at the given vertex ids. Used by the
    /// shrink half of the protocol; validation lives with the caller.
    pub(crate) fn remove_subtrees(&mut self, roots: &[VertexId]) -> Result<usize, GraphError> {
        let mut removed = 0usize;
        for r in roots {
            if *r == self.root {
                return Err(GraphError::RemoveRoot(self.vertices[r].path.clone()));
            }
            if !self.vertices.contains_key(r) {
                continue; // already gone as part of an earlier subtree
            }
            let subtree = self.dfs_subtree(*r);
            let delta = self.metadata.aggregate(*r).unwrap_or(0);
            let anchor = self.parent.get(r).copied();
            for v in &subtree {
                let vert = self.vertices.remove(v).expect("subtree vertex present");
                self.path_index.remove(&vert.path);
                self.parent.remove(v);
                self.children.remove(v);
                self.metadata.aggregates.remove(v);
                if let Some(holders) = self.metadata.allocations.remove(v) {
                    for job in holders {
                        if let Some(alloc) = self.jobs.get_mut(&job) {
                            alloc.vertices.remove(v);
                            if alloc.vertices.is_empty() {
                                self.jobs.remove(&job);
                            }
                        }
                    }
                }
                removed += 1;
            }
            if let Some(anchor) = anchor {
                self.children
                    .get_mut(&anchor)
                    .map(|list| list.retain(|c| c != r));
                if delta > 0 {
                    let mut cur = Some(anchor);
                    while let Some(v) = cur {
                        let agg = self.metadata.aggregates.entry(v).or_insert(0);
                        *agg = agg.checked_sub(delta).expect("aggregate underflow");
                        cur = self.parent.get(&v).copied();
                    }
                }
            }
        }
        Ok(removed)
    }

    /// Tree sanity: every non-root vertex has exactly one in-edge and the
    /// path index covers exactly the vertex set.
    pub fn check_tree(&self) -> bool {
        if self.path_index.len() != self.vertices.len() {
            return false;
        }
        for (id, v) in &self.vertices {
            if self.path_index.get(&v.path) != Some(id) {
                return false;
            }
            match self.parent.get(id) {
                None => {
                    if *id != self.root {
                        return false;
                    }
                }
                Some(p) => {
                    let pv = match self.vertices.get(p) {
                        Some(pv) => pv,
                        None => return false,
                    };
                    let expected = format!("{}/{}", pv.path, v.basename);
                    if expected != v.path {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Internal hook for the grow module: inserts a vertex whose aggregate is
    /// left pending (no entry) until `update_metadata` completes it.
    pub(crate) fn insert_pending_vertex(
        &mut self,
        parent: VertexId,
        vertex: &ResourceVertex,
    ) -> Result<VertexId, GraphError> {
        let parent_path = self
            .vertices
            .get(&parent)
            .ok_or(GraphError::UnknownVertex(parent))?
            .path
            .clone();
        let path = vertex.path.clone();
        if self.path_index.contains_key(&path) {
            return Err(GraphError::DuplicatePath(path));
        }
        let expected = format!("{parent_path}/{}", vertex.basename);
        if expected != path {
            return Err(GraphError::InvalidSpec(format!(
                "vertex path {path:?} does not extend its parent path {parent_path:?}"
            )));
        }
        let id = VertexId(self.next_id);
        self.next_id += 1;
        self.vertices.insert(
            id,
            ResourceVertex {
                id,
                kind: vertex.kind,
                basename: vertex.basename.clone(),
                unit_size: vertex.unit_size,
                path: path.clone(),
                rank: vertex.rank,
            },
        );
        self.path_index.insert(path, id);
        self.parent.insert(id, parent);
        self.attach_child_ordered(parent, id);
        Ok(id)
    }

    pub(crate) fn has_aggregate_entry(&self, v: VertexId) -> bool {
        self.metadata.aggregates.contains_key(&v)
    }

    pub(crate) fn set_aggregate(&mut self, v: VertexId, value: u64) {
        self.metadata.aggregates.insert(v, value);
    }

    pub(crate) fn register_job(&mut self, alloc: Allocation) {
        self.jobs.insert(alloc.job, alloc);
    }

    pub(crate) fn job_mut(&mut self, job: JobId) -> Option<&mut Allocation> {
        self.jobs.get_mut(&job)
    }

    pub(crate) fn add_job_to_vertex(&mut self, v: VertexId, job: JobId) -> bool {
        let entry = self.metadata.allocations.entry(v).or_default();
        let was_free = entry.is_empty();
        entry.insert(job);
        was_free
    }
}

/// Parent path of a graph path, or `None` for a top-level path.
pub fn parent_path_of(path: &str) -> Option<&str> {
    let idx = path.rfind('/')?;
    if idx == 0 {
        None
    } else {
        Some(&path[..idx])
    }
}

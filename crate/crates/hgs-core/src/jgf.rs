//! The subgraph wire format: vertex/edge sets exchanged between scheduler
//! levels and returned by providers, encoded as a JSON graph document.
//!
//! A document is one object, `{"graph": {"nodes": [...], "edges": [...]}}`.
//! Each node carries the canonical field set under `"metadata"`: type,
//! basename, unit_size, path, rank, and allocated-job-ids. Edges carry
//! source/target vertex ids and the containment relation. Canonical ordering
//! is vertices by path and edges by (source path, target path), which makes
//! serialization deterministic.
//!
//! Member vertices are the targets of in-document edges (every transported
//! vertex travels together with its in-edge). A vertex that only appears as
//! an edge source is an anchor: a reference to an attachment point that
//! already exists in the receiving graph. Anchors are carried so documents
//! are self-contained, but they do not count toward the subgraph size.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{JobId, ResourceVertex, VertexId, CONTAINS};

/// One transported vertex: the vertex record plus the job ids holding it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphVertex {
    pub vertex: ResourceVertex,
    pub jobs: BTreeSet<JobId>,
}

/// One transported containment edge, by in-document vertex id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphEdge {
    pub source: VertexId,
    pub target: VertexId,
}

/// An in-memory subgraph document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Subgraph {
    vertices: Vec<SubgraphVertex>,
    edges: Vec<SubgraphEdge>,
}

#[derive(Debug, Error)]
pub enum JgfError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("duplicate vertex id {0} in document")]
    DuplicateId(u64),
    #[error("duplicate path {0:?} in document")]
    DuplicatePath(String),
    #[error("edge #{index} ({source_id} -> {target_id}) references nonexistent vertex id {missing}")]
    DanglingEdge {
        index: usize,
        source_id: u64,
        target_id: u64,
        missing: u64,
    },
    #[error("edge #{index} is a self edge on vertex {id}")]
    SelfEdge { index: usize, id: u64 },
    #[error("duplicate edge {source_id} -> {target_id}")]
    DuplicateEdge { source_id: u64, target_id: u64 },
    #[error("vertex {id} ({path:?}) has more than one in-edge")]
    MultipleParents { id: u64, path: String },
    #[error("edge #{index} has relation {relation:?}, expected \"contains\"")]
    BadRelation { index: usize, relation: String },
    #[error("edge {source_path:?} -> {target_path:?} is inconsistent with the target path")]
    PathMismatch {
        source_path: String,
        target_path: String,
    },
}

impl Subgraph {
    pub fn push_vertex(&mut self, vertex: ResourceVertex, jobs: BTreeSet<JobId>) {
        self.vertices.push(SubgraphVertex { vertex, jobs });
    }

    pub fn push_edge(&mut self, source: VertexId, target: VertexId) {
        self.edges.push(SubgraphEdge { source, target });
    }

    /// Sorts vertices by path and edges by (source path, target path).
    pub fn canonicalize(&mut self) {
        self.vertices.sort_by(|a, b| a.vertex.path.cmp(&b.vertex.path));
        let paths: BTreeMap<VertexId, String> = self
            .vertices
            .iter()
            .map(|v| (v.vertex.id, v.vertex.path.clone()))
            .collect();
        self.edges.sort_by(|a, b| {
            (&paths[&a.source], &paths[&a.target]).cmp(&(&paths[&b.source], &paths[&b.target]))
        });
    }

    pub fn vertices_by_path(&self) -> &[SubgraphVertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[SubgraphEdge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn target_ids(&self) -> BTreeSet<VertexId> {
        self.edges.iter().map(|e| e.target).collect()
    }

    fn endpoint_ids(&self) -> BTreeSet<VertexId> {
        self.edges
            .iter()
            .flat_map(|e| [e.source, e.target])
            .collect()
    }

    /// Member vertices: targets of in-document edges plus isolated vertices.
    pub fn members(&self) -> Vec<&SubgraphVertex> {
        let targets = self.target_ids();
        let endpoints = self.endpoint_ids();
        self.vertices
            .iter()
            .filter(|v| targets.contains(&v.vertex.id) || !endpoints.contains(&v.vertex.id))
            .collect()
    }

    /// Vertices with no in-edge in the document: anchors of an extracted
    /// subgraph, or the root of a whole-graph dump.
    pub fn rootless_vertices(&self) -> Vec<&SubgraphVertex> {
        let targets = self.target_ids();
        self.vertices
            .iter()
            .filter(|v| !targets.contains(&v.vertex.id))
            .collect()
    }

    /// Subgraph size: member vertex count plus edge count.
    pub fn size(&self) -> usize {
        self.members().len() + self.edges.len()
    }

    pub fn member_paths(&self) -> BTreeSet<String> {
        self.members()
            .into_iter()
            .map(|v| v.vertex.path.clone())
            .collect()
    }

    pub fn all_paths(&self) -> BTreeSet<String> {
        self.vertices.iter().map(|v| v.vertex.path.clone()).collect()
    }

    pub fn edge_path_pairs(&self) -> BTreeSet<(String, String)> {
        let paths: BTreeMap<VertexId, &str> = self
            .vertices
            .iter()
            .map(|v| (v.vertex.id, v.vertex.path.as_str()))
            .collect();
        self.edges
            .iter()
            .map(|e| (paths[&e.source].to_string(), paths[&e.target].to_string()))
            .collect()
    }

    pub fn vertex_by_id(&self, id: VertexId) -> Option<&SubgraphVertex> {
        self.vertices.iter().find(|v| v.vertex.id == id)
    }
}

// ---- JSON document shape ----

#[derive(Serialize, Deserialize)]
struct JgfDoc {
    graph: JgfGraph,
}

#[derive(Serialize, Deserialize)]
struct JgfGraph {
    nodes: Vec<JgfNode>,
    edges: Vec<JgfEdgeRec>,
}

#[derive(Serialize, Deserialize)]
struct JgfNode {
    id: u64,
    metadata: JgfNodeMeta,
}

#[derive(Serialize, Deserialize)]
struct JgfNodeMeta {
    #[serde(rename = "type")]
    kind: crate::graph::ResourceKind,
    basename: String,
    unit_size: u64,
    path: String,
    rank: i64,
    #[serde(rename = "allocated-job-ids")]
    allocated_job_ids: Vec<JobId>,
}

#[derive(Serialize, Deserialize)]
struct JgfEdgeRec {
    source: u64,
    target: u64,
    metadata: JgfEdgeMeta,
}

#[derive(Serialize, Deserialize)]
struct JgfEdgeMeta {
    relation: String,
}

// Borrowed mirror of the document shape, so serialization makes a single
// pass over the subgraph without copying vertex data.

#[derive(Serialize)]
struct JgfDocRef<'a> {
    graph: JgfGraphRef<'a>,
}

#[derive(Serialize)]
struct JgfGraphRef<'a> {
    nodes: Vec<JgfNodeRef<'a>>,
    edges: Vec<JgfEdgeRef>,
}

#[derive(Serialize)]
struct JgfNodeRef<'a> {
    id: u64,
    metadata: JgfNodeMetaRef<'a>,
}

#[derive(Serialize)]
struct JgfNodeMetaRef<'a> {
    #[serde(rename = "type")]
    kind: crate::graph::ResourceKind,
    basename: &'a str,
    unit_size: u64,
    path: &'a str,
    rank: i64,
    #[serde(rename = "allocated-job-ids")]
    allocated_job_ids: &'a BTreeSet<JobId>,
}

#[derive(Serialize)]
struct JgfEdgeRef {
    source: u64,
    target: u64,
    metadata: JgfEdgeMeta,
}

fn to_doc_ref(sub: &Subgraph) -> JgfDocRef<'_> {
    let mut vertex_order: Vec<&SubgraphVertex> = sub.vertices.iter().collect();
    vertex_order.sort_by(|a, b| a.vertex.path.cmp(&b.vertex.path));
    let paths: BTreeMap<VertexId, &str> = sub
        .vertices
        .iter()
        .map(|v| (v.vertex.id, v.vertex.path.as_str()))
        .collect();
    let mut edge_order: Vec<&SubgraphEdge> = sub.edges.iter().collect();
    edge_order.sort_by(|a, b| {
        (&paths[&a.source], &paths[&a.target]).cmp(&(&paths[&b.source], &paths[&b.target]))
    });
    JgfDocRef {
        graph: JgfGraphRef {
            nodes: vertex_order
                .into_iter()
                .map(|v| JgfNodeRef {
                    id: v.vertex.id.0,
                    metadata: JgfNodeMetaRef {
                        kind: v.vertex.kind,
                        basename: &v.vertex.basename,
                        unit_size: v.vertex.unit_size,
                        path: &v.vertex.path,
                        rank: v.vertex.rank,
                        allocated_job_ids: &v.jobs,
                    },
                })
                .collect(),
            edges: edge_order
                .into_iter()
                .map(|e| JgfEdgeRef {
                    source: e.source.0,
                    target: e.target.0,
                    metadata: JgfEdgeMeta {
                        relation: CONTAINS.to_string(),
                    },
                })
                .collect(),
        },
    }
}

/// Serializes a subgraph as a canonical single-line JGF document.
pub fn serialize_jgf(sub: &Subgraph) -> String {
    serde_json::to_string(&to_doc_ref(sub)).expect("jgf serialization cannot fail")
}

/// Serializes a subgraph as a canonical pretty-printed JGF file body
/// (trailing newline included).
pub fn serialize_jgf_pretty(sub: &Subgraph) -> String {
    let mut s =
        serde_json::to_string_pretty(&to_doc_ref(sub)).expect("jgf serialization cannot fail");
    s.push('\n');
    s
}

/// Parses and validates a JGF document.
pub fn deserialize_jgf(text: &str) -> Result<Subgraph, JgfError> {
    let doc: JgfDoc = serde_json::from_str(text).map_err(|e| JgfError::Parse(e.to_string()))?;

    let mut ids: BTreeSet<u64> = BTreeSet::new();
    let mut paths: BTreeSet<&str> = BTreeSet::new();
    for node in &doc.graph.nodes {
        if !ids.insert(node.id) {
            return Err(JgfError::DuplicateId(node.id));
        }
        if !paths.insert(node.metadata.path.as_str()) {
            return Err(JgfError::DuplicatePath(node.metadata.path.clone()));
        }
    }

    let by_id: BTreeMap<u64, &JgfNode> = doc.graph.nodes.iter().map(|n| (n.id, n)).collect();
    let mut seen_pairs: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut in_edges: BTreeMap<u64, usize> = BTreeMap::new();
    for (index, edge) in doc.graph.edges.iter().enumerate() {
        if edge.metadata.relation != CONTAINS {
            return Err(JgfError::BadRelation {
                index,
                relation: edge.metadata.relation.clone(),
            });
        }
        if edge.source == edge.target {
            return Err(JgfError::SelfEdge {
                index,
                id: edge.source,
            });
        }
        for endpoint in [edge.source, edge.target] {
            if !by_id.contains_key(&endpoint) {
                return Err(JgfError::DanglingEdge {
                    index,
                    source_id: edge.source,
                    target_id: edge.target,
                    missing: endpoint,
                });
            }
        }
        if !seen_pairs.insert((edge.source, edge.target)) {
            return Err(JgfError::DuplicateEdge {
                source_id: edge.source,
                target_id: edge.target,
            });
        }
        *in_edges.entry(edge.target).or_insert(0) += 1;
        let source = by_id[&edge.source];
        let target = by_id[&edge.target];
        let expected = format!("{}/{}", source.metadata.path, target.metadata.basename);
        if expected != target.metadata.path {
            return Err(JgfError::PathMismatch {
                source_path: source.metadata.path.clone(),
                target_path: target.metadata.path.clone(),
            });
        }
    }
    for (id, count) in in_edges {
        if count > 1 {
            return Err(JgfError::MultipleParents {
                id,
                path: by_id[&id].metadata.path.clone(),
            });
        }
    }

    let mut sub = Subgraph::default();
    for node in doc.graph.nodes {
        sub.push_vertex(
            ResourceVertex {
                id: VertexId(node.id),
                kind: node.metadata.kind,
                basename: node.metadata.basename,
                unit_size: node.metadata.unit_size,
                path: node.metadata.path,
                rank: node.metadata.rank,
            },
            node.metadata.allocated_job_ids.into_iter().collect(),
        );
    }
    for edge in doc.graph.edges {
        sub.push_edge(VertexId(edge.source), VertexId(edge.target));
    }
    sub.canonicalize();
    Ok(sub)
}

//! The external provider plug point and a deterministic mock cloud provider.
//!
//! A provider turns a resource request into a subgraph of externally created
//! instances, rooted under zone vertices so placement stays visible to the
//! scheduler. The mock provider draws from an instance-type catalog, supports
//! specific-type requests, generic requests (smallest covering type), and
//! fleet requests where the provider itself chooses types and zones. Every
//! returned path is namespaced with an `ec2` prefix so external vertices can
//! never collide with locally built cluster paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ResourceKind, ResourceVertex, VertexId};
use crate::jgf::Subgraph;
use crate::jobspec::{JobSpec, ProviderHint};

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceType {
    pub name: String,
    pub cpus: u64,
    pub memory_gb: u64,
    pub gpus: u64,
    pub zone_pool: Vec<String>,
    /// Lower is cheaper.
    pub cost_rank: u32,
}

/// Provider-side type selection for fleets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    CheapestFirst,
    SeededRandom,
}

/// A fleet request: a total instance count and the types the provider may
/// pick from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetRequest {
    pub total_count: u64,
    pub allowed_types: Vec<String>,
    pub policy: SelectionPolicy,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("unknown instance type {0:?}")]
    UnknownType(String),
    #[error("fleet requests need a total count of at least 1")]
    EmptyFleet,
    #[error("fleet allowed-type list is empty")]
    NoAllowedTypes,
    #[error("fleet allowed-type list has {got} entries, the API accepts at most {max}")]
    TooManyTypes { got: usize, max: usize },
    #[error("no catalog type covers the request ({0})")]
    NoCoveringType(String),
    #[error("catalog file error: {0}")]
    Catalog(String),
}

/// The instance-type catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default = "default_max_fleet_types")]
    pub max_fleet_types: usize,
    pub types: Vec<InstanceType>,
}

fn default_max_fleet_types() -> usize {
    300
}

impl Catalog {
    /// The built-in eight-type catalog with two synthetic zones.
    pub fn builtin() -> Self {
        let zones = vec!["ec2-zone-a".to_string(), "ec2-zone-b".to_string()];
        let rows: [(&str, u64, u64, u64); 8] = [
            ("t2.micro", 1, 1, 0),
            ("t2.small", 1, 2, 0),
            ("t2.medium", 2, 4, 0),
            ("t2.large", 2, 8, 0),
            ("t2.xlarge", 4, 16, 0),
            ("t2.2xlarge", 8, 32, 0),
            ("g2.2xlarge", 8, 15, 1),
            ("g3.4xlarge", 16, 128, 4),
        ];
        Catalog {
            max_fleet_types: default_max_fleet_types(),
            types: rows
                .iter()
                .enumerate()
                .map(|(i, (name, cpus, mem, gpus))| InstanceType {
                    name: name.to_string(),
                    cpus: *cpus,
                    memory_gb: *mem,
                    gpus: *gpus,
                    zone_pool: zones.clone(),
                    cost_rank: i as u32,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Catalog(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Catalog(e.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&InstanceType, ProviderError> {
        self.types
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ProviderError::UnknownType(name.to_string()))
    }

    /// Cheapest type covering the per-node demands.
    pub fn smallest_covering(
        &self,
        cpus: u64,
        memory_gb: u64,
        gpus: u64,
    ) -> Result<&InstanceType, ProviderError> {
        self.types
            .iter()
            .filter(|t| t.cpus >= cpus && t.memory_gb >= memory_gb && t.gpus >= gpus)
            .min_by_key(|t| (t.cost_rank, t.name.clone()))
            .ok_or_else(|| {
                ProviderError::NoCoveringType(format!(
                    "cpus >= {cpus}, memory_gb >= {memory_gb}, gpus >= {gpus}"
                ))
            })
    }
}

/// The plug point an instance calls to create or release external resources.
pub trait ExternalApi {
    /// Translates the request into provider instances and returns them as a
    /// subgraph attachable under `attach_path`.
    fn request(&mut self, spec: &JobSpec, attach_path: &str) -> Result<Subgraph, ProviderError>;

    /// Releases previously returned resources (shrink path).
    fn release(&mut self, paths: &[String]);

    fn provider_name(&self) -> &str;
}

/// Deterministic mock provider: no latency simulation, no lifecycle; just
/// catalog-driven subgraph construction with a seeded generator.
#[derive(Debug)]
pub struct MockProvider {
    catalog: Catalog,
    seed: u64,
    calls: u64,
    next_instance: u64,
    released: Vec<String>,
}

impl MockProvider {
    pub fn new(catalog: Catalog, seed: u64) -> Self {
        MockProvider {
            catalog,
            seed,
            calls: 0,
            next_instance: 0,
            released: Vec::new(),
        }
    }

    pub fn with_builtin_catalog(seed: u64) -> Self {
        MockProvider::new(Catalog::builtin(), seed)
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn released_paths(&self) -> &[String] {
        &self.released
    }

    fn next_call_seed(&mut self) -> u64 {
        let s = self.seed.wrapping_add(self.calls.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.calls += 1;
        s
    }
}

impl ExternalApi for MockProvider {
    fn request(&mut self, spec: &JobSpec, attach_path: &str) -> Result<Subgraph, ProviderError> {
        let seed = self.next_call_seed();
        let first_index = self.next_instance;
        let (sub, used) = match &spec.hint {
            Some(ProviderHint::InstanceType(name)) => {
                let ty = self.catalog.get(name)?.clone();
                let count = spec.total_of_kind(ResourceKind::Node).max(1);
                let picks: Vec<(InstanceType, String)> = (0..count)
                    .map(|i| {
                        let zone = ty.zone_pool[(i as usize) % ty.zone_pool.len()].clone();
                        (ty.clone(), zone)
                    })
                    .collect();
                (build_zone_subgraph(&picks, attach_path, first_index), count)
            }
            Some(ProviderHint::Fleet {
                total_count,
                allowed_types,
            }) => {
                let req = FleetRequest {
                    total_count: *total_count,
                    allowed_types: allowed_types.clone(),
                    policy: SelectionPolicy::CheapestFirst,
                };
                let sub = fleet_request(&self.catalog, &req, seed, attach_path, first_index)?;
                (sub, *total_count)
            }
            None => {
                let nodes = spec.total_of_kind(ResourceKind::Node).max(1);
                let per_node = |total: u64| total.div_ceil(nodes);
                let ty = self
                    .catalog
                    .smallest_covering(
                        per_node(spec.total_of_kind(ResourceKind::Core)),
                        per_node(spec.total_of_kind(ResourceKind::Memory)).max(1),
                        per_node(spec.total_of_kind(ResourceKind::Gpu)),
                    )?
                    .clone();
                let picks: Vec<(InstanceType, String)> = (0..nodes)
                    .map(|i| {
                        let zone = ty.zone_pool[(i as usize) % ty.zone_pool.len()].clone();
                        (ty.clone(), zone)
                    })
                    .collect();
                (build_zone_subgraph(&picks, attach_path, first_index), nodes)
            }
        };
        self.next_instance += used;
        Ok(sub)
    }

    fn release(&mut self, paths: &[String]) {
        self.released.extend(paths.iter().cloned());
    }

    fn provider_name(&self) -> &str {
        "mock-ec2"
    }
}

/// Builds a fleet subgraph: `total_count` instance subtrees with types picked
/// by the provider under the request policy, grouped under zone vertices.
/// Deterministic for a given seed and instance index base.
pub fn fleet_request(
    catalog: &Catalog,
    req: &FleetRequest,
    seed: u64,
    attach_path: &str,
    first_instance_index: u64,
) -> Result<Subgraph, ProviderError> {
    if req.total_count == 0 {
        return Err(ProviderError::EmptyFleet);
    }
    if req.allowed_types.is_empty() {
        return Err(ProviderError::NoAllowedTypes);
    }
    if req.allowed_types.len() > catalog.max_fleet_types {
        return Err(ProviderError::TooManyTypes {
            got: req.allowed_types.len(),
            max: catalog.max_fleet_types,
        });
    }
    let resolved: Vec<&InstanceType> = req
        .allowed_types
        .iter()
        .map(|name| catalog.get(name))
        .collect::<Result<_, _>>()?;

    let picks: Vec<(InstanceType, String)> = match req.policy {
        SelectionPolicy::CheapestFirst => {
            let ty = resolved
                .iter()
                .min_by_key(|t| (t.cost_rank, t.name.clone()))
                .expect("nonempty allowed list");
            (0..req.total_count)
                .map(|i| {
                    let zone = ty.zone_pool[(i as usize) % ty.zone_pool.len()].clone();
                    ((*ty).clone(), zone)
                })
                .collect()
        }
        SelectionPolicy::SeededRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..req.total_count)
                .map(|_| {
                    let ty = *resolved.choose(&mut rng).expect("nonempty allowed list");
                    let zone = ty
                        .zone_pool
                        .choose(&mut rng)
                        .expect("nonempty zone pool")
                        .clone();
                    (ty.clone(), zone)
                })
                .collect()
        }
    };
    Ok(build_zone_subgraph(&picks, attach_path, first_instance_index))
}

/// Assembles the returned subgraph: one zone vertex per distinct zone, one
/// node subtree per instance with core, gpu, and per-GB memory vertices.
fn build_zone_subgraph(
    picks: &[(InstanceType, String)],
    attach_path: &str,
    first_instance_index: u64,
) -> Subgraph {
    let mut sub = Subgraph::default();
    let mut next_id = 0u64;
    let id = |next: &mut u64| {
        let v = VertexId(*next);
        *next += 1;
        v
    };
    let zones: BTreeSet<&String> = picks.iter().map(|(_, z)| z).collect();
    let mut zone_ids = std::collections::BTreeMap::new();
    for zone in zones {
        let zid = id(&mut next_id);
        sub.push_vertex(
            ResourceVertex {
                id: zid,
                kind: ResourceKind::Zone,
                basename: zone.clone(),
                unit_size: 1,
                path: format!("{attach_path}/{zone}"),
                rank: -1,
            },
            BTreeSet::new(),
        );
        zone_ids.insert(zone.clone(), zid);
    }
    for (i, (ty, zone)) in picks.iter().enumerate() {
        let node_name = format!("ec2node{}", first_instance_index + i as u64);
        let node_path = format!("{attach_path}/{zone}/{node_name}");
        let nid = id(&mut next_id);
        sub.push_vertex(
            ResourceVertex {
                id: nid,
                kind: ResourceKind::Node,
                basename: node_name,
                unit_size: 1,
                path: node_path.clone(),
                rank: -1,
            },
            BTreeSet::new(),
        );
        sub.push_edge(zone_ids[zone], nid);
        for c in 0..ty.cpus {
            let cid = id(&mut next_id);
            sub.push_vertex(
                ResourceVertex {
                    id: cid,
                    kind: ResourceKind::Core,
                    basename: format!("core{c}"),
                    unit_size: 1,
                    path: format!("{node_path}/core{c}"),
                    rank: -1,
                },
                BTreeSet::new(),
            );
            sub.push_edge(nid, cid);
        }
        for gp in 0..ty.gpus {
            let gid = id(&mut next_id);
            sub.push_vertex(
                ResourceVertex {
                    id: gid,
                    kind: ResourceKind::Gpu,
                    basename: format!("gpu{gp}"),
                    unit_size: 1,
                    path: format!("{node_path}/gpu{gp}"),
                    rank: -1,
                },
                BTreeSet::new(),
            );
            sub.push_edge(nid, gid);
        }
        for m in 0..ty.memory_gb {
            let mid = id(&mut next_id);
            sub.push_vertex(
                ResourceVertex {
                    id: mid,
                    kind: ResourceKind::Memory,
                    basename: format!("memory{m}"),
                    unit_size: 1,
                    path: format!("{node_path}/memory{m}"),
                    rank: -1,
                },
                BTreeSet::new(),
            );
            sub.push_edge(nid, mid);
        }
    }
    sub.canonicalize();
    sub
}

//! Elastic hierarchical graph scheduling.
//!
//! The crate models a scheduling hierarchy in which every instance owns a
//! directed resource graph (a containment tree of cluster/node/socket/core/
//! gpu/memory vertices), matches job specifications against it, and — when a
//! local match fails — grows its graph with a subgraph obtained from its
//! parent instance or from an external provider. Subgraphs travel between
//! levels as JSON Graph Format documents over a small framed RPC protocol.
//!
//! Module map:
//! - [`graph`]: the resource graph, its scheduler metadata, and the synthetic
//!   cluster builder.
//! - [`jgf`]: the subgraph wire format and its (de)serialization.
//! - [`jobspec`]: resource request specifications and their text syntax.
//! - [`matcher`]: pruned depth-first match-and-allocate.
//! - [`grow`]: subgraph addition/removal and the bottom-up/top-down grow
//!   protocol.
//! - [`hierarchy`]: scheduler instances, transports, and inclusion checking.
//! - [`provider`]: the external provider plug point and a deterministic mock
//!   cloud provider.
//! - [`perfmodel`]: timing samples, linear model fits, and the grow latency
//!   predictor.

pub mod graph;
pub mod grow;
pub mod hierarchy;
pub mod jgf;
pub mod jobspec;
pub mod matcher;
pub mod perfmodel;
pub mod provider;

pub use graph::{ClusterSpec, JobId, ResourceGraph, ResourceKind, VertexId};
pub use grow::{GrowOutcome, GrowResult};
pub use hierarchy::SchedulerInstance;
pub use jgf::Subgraph;
pub use jobspec::JobSpec;

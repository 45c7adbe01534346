//! Configuration files: the experiment config consumed by `grow` and
//! `bench`, and the per-instance config consumed by `serve`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hgs_core::graph::ClusterSpec;
use hgs_core::hierarchy::{LevelSetup, Prealloc};
use hgs_core::jobspec::JobSpec;
use hgs_core::perfmodel::Transport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelConfig {
    pub nodes: u64,
    pub sockets_per_node: u64,
    pub cores_per_socket: u64,
    #[serde(default)]
    pub gpus_per_node: u64,
    #[serde(default)]
    pub memory_per_socket: u64,
    #[serde(default = "default_prealloc")]
    pub prealloc: Prealloc,
    /// Link to the parent level; ignored at level 0.
    #[serde(default = "default_link")]
    pub link: Transport,
    #[serde(default)]
    pub injected_latency_us: u64,
}

fn default_prealloc() -> Prealloc {
    Prealloc::None
}

fn default_link() -> Transport {
    Transport::Intra
}

impl LevelConfig {
    pub fn cluster_spec(&self) -> ClusterSpec {
        ClusterSpec {
            nodes: self.nodes,
            sockets_per_node: self.sockets_per_node,
            cores_per_socket: self.cores_per_socket,
            gpus_per_node: self.gpus_per_node,
            memory_per_socket: self.memory_per_socket,
        }
    }

    pub fn level_setup(&self) -> LevelSetup {
        let mut setup = LevelSetup::new(self.cluster_spec());
        setup.prealloc = self.prealloc;
        setup.link = self.link;
        setup.injected_latency = Duration::from_micros(self.injected_latency_us);
        setup
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Level the provider attaches to.
    pub attach_level: u32,
    #[serde(default)]
    pub specialization: bool,
    /// Catalog file; the built-in catalog when absent.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub levels: Vec<LevelConfig>,
    /// Request suite: built-in names (`t1`..`t8`) or request syntax.
    pub suite: Vec<String>,
    #[serde(default = "default_reps")]
    pub repetitions: u64,
    #[serde(default = "default_transport")]
    pub transport: TransportMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_base_port")]
    pub base_port: u16,
    #[serde(default = "default_rpc_timeout")]
    pub rpc_timeout_ms: u64,
}

fn default_reps() -> u64 {
    1
}

fn default_transport() -> TransportMode {
    TransportMode::Inproc
}

fn default_base_port() -> u16 {
    47310
}

fn default_rpc_timeout() -> u64 {
    30_000
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            bail!("config needs at least one level");
        }
        if self.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if let Some(p) = &self.provider {
            if p.attach_level as usize >= self.levels.len() {
                bail!(
                    "provider attach_level {} is out of range for {} levels",
                    p.attach_level,
                    self.levels.len()
                );
            }
            if p.attach_level > 0 && !p.specialization {
                bail!("a provider below the top level requires specialization mode");
            }
        }
        Ok(())
    }
}

/// Resolves a suite entry: a built-in test name or request text.
pub fn resolve_request(entry: &str) -> Result<JobSpec> {
    let text = match entry.to_ascii_lowercase().as_str() {
        "t1" => "node:64 socket:128 core:2048",
        "t2" => "node:32 socket:64 core:1024",
        "t3" => "node:16 socket:32 core:512",
        "t4" => "node:8 socket:16 core:256",
        "t5" => "node:4 socket:8 core:128",
        "t6" => "node:2 socket:4 core:64",
        "t7" => "node:1 socket:2 core:32",
        "t8" => "socket:1 core:16",
        _ => entry,
    };
    JobSpec::parse(text).with_context(|| format!("request {entry:?}"))
}

/// Graph source for a served instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    Spec(LevelConfig),
    Jgf(PathBuf),
}

/// Per-instance config for `hgs serve`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub level: u32,
    pub listen: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub graph: GraphSource,
    #[serde(default = "default_prealloc")]
    pub prealloc: Prealloc,
    #[serde(default = "default_link")]
    pub link: Transport,
    #[serde(default)]
    pub injected_latency_us: u64,
    #[serde(default)]
    pub provider: Option<InstanceProviderConfig>,
    #[serde(default)]
    pub sample_log: Option<PathBuf>,
    /// Nonzero seeds switch the matcher to the seeded candidate order.
    #[serde(default)]
    pub policy_seed: u64,
    #[serde(default = "default_rpc_timeout")]
    pub rpc_timeout_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceProviderConfig {
    #[serde(default)]
    pub specialization: bool,
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl InstanceConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: InstanceConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.level == 0 && config.parent.is_some() {
            bail!("level 0 cannot have a parent");
        }
        if config.level > 0 && config.parent.is_none() {
            bail!("level {} needs a parent address", config.level);
        }
        if let Some(p) = &config.provider {
            if config.level > 0 && !p.specialization {
                bail!("a provider below the top level requires specialization mode");
            }
        }
        Ok(config)
    }
}

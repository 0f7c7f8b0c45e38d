//! JSON run configuration. Unknown keys are rejected and every error names
//! the offending key path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pic::PicConfig;
use crate::types::{CacheBlockConfig, ModelConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathLabel {
    T1,
    T2,
    T3,
}

/// History length for every agent, or one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistoryLen {
    Fixed(usize),
    PerAgent(Vec<usize>),
}

impl HistoryLen {
    pub fn for_agent(&self, agent: usize) -> usize {
        match self {
            Self::Fixed(n) => *n,
            Self::PerAgent(v) => v[agent],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadParams {
    pub num_agents: usize,
    pub num_rounds: usize,
    pub history_len: HistoryLen,
    /// Length of every agent output.
    pub shared_block_len: usize,
    pub task_len: usize,
    /// Draw a per-agent order of the shared outputs; identity otherwise.
    pub permute_shared: bool,
    pub permutation_seed: u64,
    pub token_seed: u64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        Self {
            num_agents: 5,
            num_rounds: 3,
            history_len: HistoryLen::Fixed(64),
            shared_block_len: 32,
            task_len: 8,
            permute_shared: true,
            permutation_seed: 1,
            token_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub capacity_tokens: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub budget_bytes: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            budget_bytes: 64 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub paths: Vec<PathLabel>,
    /// Run the groups of a `T3` round on separate threads.
    pub concurrent_groups: bool,
    pub bench_iterations: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            paths: vec![PathLabel::T1, PathLabel::T2, PathLabel::T3],
            concurrent_groups: false,
            bench_iterations: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub workload: WorkloadParams,
    pub model: ModelConfig,
    pub pic: PicConfig,
    pub blocks: CacheBlockConfig,
    pub pool: PoolConfig,
    pub segment_index: IndexConfig,
    pub harness: HarnessConfig,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.workload;
        if w.num_agents == 0 {
            return Err(ConfigError::invalid(
                "workload.num_agents",
                "must be at least 1",
            ));
        }
        if w.num_rounds == 0 {
            return Err(ConfigError::invalid(
                "workload.num_rounds",
                "must be at least 1",
            ));
        }
        match &w.history_len {
            HistoryLen::Fixed(0) => {
                return Err(ConfigError::invalid(
                    "workload.history_len",
                    "must be at least 1",
                ))
            }
            HistoryLen::PerAgent(v) if v.len() != w.num_agents => {
                return Err(ConfigError::invalid(
                    "workload.history_len",
                    format!("{} entries for {} agents", v.len(), w.num_agents),
                ))
            }
            HistoryLen::PerAgent(v) if v.contains(&0) => {
                return Err(ConfigError::invalid(
                    "workload.history_len",
                    "lengths must be at least 1",
                ))
            }
            _ => {}
        }
        if w.shared_block_len == 0 {
            return Err(ConfigError::invalid(
                "workload.shared_block_len",
                "must be at least 1",
            ));
        }
        if w.task_len == 0 {
            return Err(ConfigError::invalid(
                "workload.task_len",
                "must be at least 1",
            ));
        }
        self.model.validate().map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split_whitespace()
                .find(|s| s.starts_with("model."))
                .unwrap_or("model")
                .to_string();
            ConfigError::Invalid { key, message: msg }
        })?;
        let p = &self.pic;
        if !(0.0..=1.0).contains(&p.recompute_fraction) {
            return Err(ConfigError::invalid(
                "pic.recompute_fraction",
                "must lie in [0, 1]",
            ));
        }
        if p.check_layer >= self.model.num_layers {
            return Err(ConfigError::invalid(
                "pic.check_layer",
                format!("must be below model.num_layers ({})", self.model.num_layers),
            ));
        }
        if self.blocks.block_size == 0 {
            return Err(ConfigError::invalid(
                "blocks.block_size",
                "must be at least 1",
            ));
        }
        if self.harness.paths.is_empty() {
            return Err(ConfigError::invalid(
                "harness.paths",
                "must name at least one path",
            ));
        }
        if self.harness.bench_iterations == 0 {
            return Err(ConfigError::invalid(
                "harness.bench_iterations",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Parse and validate a JSON config.
pub fn parse_spec(text: &str) -> Result<WorkloadSpec, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: WorkloadSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::Parse {
            key: if key == "." { "<root>".into() } else { key },
            message: e.into_inner().to_string(),
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<WorkloadSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_spec(&text)
}

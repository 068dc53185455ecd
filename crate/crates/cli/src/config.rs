//! Service configuration, read from a JSON file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use metasched_core::master::{DEFAULT_LIVENESS_TIMEOUT_S, DEFAULT_MAX_REQUEUES, DEFAULT_OFFER_TTL_S};
use metasched_core::nat::NatConfig;
use metasched_core::sim::ClusterTemplate;
use metasched_core::{MasterConfig, PolicyConfig};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when `--config` is not given.
pub const CONFIG_ENV: &str = "METASCHED_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// `host:port` to accept client connections on.
    pub listen: String,
    pub event_log_path: PathBuf,
    pub snapshot_path: PathBuf,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Clusters and the in-process agents that serve them.
    pub clusters: Vec<ClusterTemplate>,
    #[serde(default)]
    pub nat: NatConfig,
    #[serde(default = "one")]
    pub tick_period_s: u64,
    #[serde(default = "ten")]
    pub heartbeat_period_s: u64,
    /// A snapshot is written after this many new events.
    #[serde(default = "thousand")]
    pub snapshot_every: u64,
    #[serde(default = "offer_ttl")]
    pub offer_ttl_s: u64,
    #[serde(default = "liveness")]
    pub liveness_timeout_s: u64,
    #[serde(default = "requeues")]
    pub max_requeues: u32,
}

fn one() -> u64 {
    1
}

fn ten() -> u64 {
    10
}

fn thousand() -> u64 {
    1000
}

fn offer_ttl() -> u64 {
    DEFAULT_OFFER_TTL_S
}

fn liveness() -> u64 {
    DEFAULT_LIVENESS_TIMEOUT_S
}

fn requeues() -> u32 {
    DEFAULT_MAX_REQUEUES
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path} is not valid: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no config given: pass --config or set {CONFIG_ENV}")]
    Missing,
}

impl ServiceConfig {
    /// Reads and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<ServiceConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.event_log_path, &mut cfg.snapshot_path] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit`, else the path in the environment variable.
    pub fn resolve_path(explicit: Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        explicit
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
            .ok_or(ConfigError::Missing)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.listen.parse::<SocketAddr>().is_err() {
            return invalid(format!("listen address {:?} is not host:port", self.listen));
        }
        if self.tick_period_s == 0 || self.heartbeat_period_s == 0 {
            return invalid("tick_period_s and heartbeat_period_s must be positive".into());
        }
        if self.snapshot_every == 0 {
            return invalid("snapshot_every must be positive".into());
        }
        for p in [&self.event_log_path, &self.snapshot_path] {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !dir.is_dir() {
                return invalid(format!("directory of {} does not exist", p.display()));
            }
        }
        if self.event_log_path == self.snapshot_path {
            return invalid("event log and snapshot need different paths".into());
        }
        Ok(())
    }

    pub fn master_config(&self) -> MasterConfig {
        MasterConfig {
            offer_ttl_s: self.offer_ttl_s,
            liveness_timeout_s: self.liveness_timeout_s,
            max_requeues: self.max_requeues,
            policy: self.policy.clone(),
            nat: self.nat.clone(),
        }
    }
}

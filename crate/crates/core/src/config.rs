//! Experiment configuration (TOML) and the default function repository.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{FunctionId, FunctionSpec, Repository, SizeClass, DEFAULT_TRANSFER_RANGE};
use crate::engine::{EngineConfig, HostConfig};
use crate::estimator::{EstimationMatrix, EstimatorMode};
use crate::provisioner::PolicyKind;
use crate::workload::WorkloadConfig;

pub const DEFAULT_HOST_MEMORY_MB: f64 = 6912.0;

/// Start and init latency presets per size class.
pub fn class_latencies(class: SizeClass) -> (f64, f64) {
    match class {
        SizeClass::Small => (0.6, 0.9),
        SizeClass::Medium => (1.0, 1.5),
        SizeClass::Large => (1.4, 2.1),
    }
}

pub fn class_memory_mb(class: SizeClass) -> f64 {
    match class {
        SizeClass::Small => 192.0,
        SizeClass::Medium => 384.0,
        SizeClass::Large => 1024.0,
    }
}

pub const DEFAULT_TRANSFER_S: f64 = 0.02;

/// (size class, exec seconds) for f01..f16, in popularity-rank order.
const DEFAULT_TABLE: [(SizeClass, f64); 16] = [
    (SizeClass::Large, 4.0),
    (SizeClass::Small, 1.6),
    (SizeClass::Medium, 3.0),
    (SizeClass::Small, 1.2),
    (SizeClass::Small, 1.8),
    (SizeClass::Medium, 2.6),
    (SizeClass::Small, 1.4),
    (SizeClass::Large, 4.5),
    (SizeClass::Small, 2.0),
    (SizeClass::Medium, 3.4),
    (SizeClass::Small, 1.5),
    (SizeClass::Medium, 2.8),
    (SizeClass::Small, 1.7),
    (SizeClass::Large, 5.0),
    (SizeClass::Small, 1.3),
    (SizeClass::Medium, 3.2),
];

pub fn function_spec(id: &str, class: SizeClass, exec_time_s: f64) -> FunctionSpec {
    let (start, init) = class_latencies(class);
    FunctionSpec {
        function_id: FunctionId::new(id),
        memory_mb: class_memory_mb(class),
        exec_time_s,
        start_time_s: start,
        init_time_s: init,
        transfer_time_s: DEFAULT_TRANSFER_S,
        size_class: class,
    }
}

pub fn default_functions() -> Vec<FunctionSpec> {
    DEFAULT_TABLE
        .iter()
        .enumerate()
        .map(|(i, (class, exec))| function_spec(&format!("f{:02}", i + 1), *class, *exec))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policies: Vec<String>,
    /// Per-function durable counts for the static policy. Absent: one each.
    pub static_counts: Option<BTreeMap<FunctionId, u32>>,
    pub estimator: EstimatorMode,
    /// Oversubscription levels, as total task counts.
    pub levels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub transfer_range_s: (f64, f64),
    pub workload: WorkloadConfig,
    pub engine: EngineConfig,
    pub functions: Vec<FunctionSpec>,
    /// Free-form options for custom components; carried but not interpreted.
    pub extensions: toml::Table,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            policies: vec!["dynamic".into(), "ephemeral".into(), "static".into()],
            static_counts: None,
            estimator: EstimatorMode::Profile,
            levels: vec![400, 800, 1200],
            seeds: (0..10).collect(),
            transfer_range_s: DEFAULT_TRANSFER_RANGE,
            workload: WorkloadConfig::default(),
            engine: EngineConfig::default(),
            functions: default_functions(),
            extensions: toml::Table::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: std::path::PathBuf, message: String },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialized config.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn repository(&self) -> Result<Repository, ConfigError> {
        Repository::new(self.functions.clone()).map_err(ConfigError::Invalid)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let repo = self.repository()?;
        for f in repo.specs() {
            f.validate(self.transfer_range_s).map_err(ConfigError::Invalid)?;
        }
        self.workload
            .validate(repo.len())
            .map_err(|e| ConfigError::Invalid(format!("workload: {e}")))?;
        self.engine.validate().map_err(|e| ConfigError::Invalid(format!("engine: {e}")))?;
        if self.levels.is_empty() {
            return bad("levels must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        for name in &self.policies {
            self.policy(name, &repo)?;
        }
        let biggest = repo.specs().iter().map(|s| s.memory_mb).fold(0.0, f64::max);
        for (i, h) in self.engine.hosts.iter().enumerate() {
            if h.total_memory_mb < biggest {
                return bad(format!("engine.hosts[{i}].total_memory_mb is below the largest function footprint"));
            }
        }
        Ok(())
    }

    /// Resolves a policy name: `dynamic`, `static` or `ephemeral`.
    pub fn policy(&self, name: &str, repo: &Repository) -> Result<PolicyKind, ConfigError> {
        let kind = match name {
            "dynamic" => PolicyKind::DynamicDurable,
            "ephemeral" => PolicyKind::EphemeralOnly,
            "static" => match &self.static_counts {
                Some(counts) => PolicyKind::StaticDurable { counts: counts.clone() },
                None => PolicyKind::static_one_each(repo),
            },
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown policy `{other}` (expected dynamic, static or ephemeral)"
                )))
            }
        };
        for h in &self.engine.hosts {
            kind.validate(repo, h.total_memory_mb)
                .map_err(|e| ConfigError::Invalid(format!("policy {name}: {e}")))?;
        }
        Ok(kind)
    }

    pub fn estimator_matrix(&self, repo: &Repository) -> EstimationMatrix {
        match self.estimator {
            EstimatorMode::Profile => EstimationMatrix::profile_from_specs(repo.specs()),
            EstimatorMode::Learning => EstimationMatrix::learning(repo.specs()),
        }
    }

    /// Workload for one (level, seed) cell of an experiment.
    pub fn workload_for(&self, level: usize, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            total_tasks: level,
            rng_seed: mix_seed(self.workload.rng_seed, seed, level as u64),
            ..self.workload.clone()
        }
    }

    /// Engine config for one seed: host jitter streams shift with the seed.
    pub fn engine_for(&self, seed: u64) -> EngineConfig {
        let hosts = self
            .engine
            .hosts
            .iter()
            .map(|h| HostConfig {
                rng_seed: mix_seed(h.rng_seed, seed, 0x6a69),
                ..h.clone()
            })
            .collect();
        EngineConfig {
            hosts,
            ..self.engine.clone()
        }
    }
}

/// Deterministically combines a base seed with experiment coordinates.
pub fn mix_seed(base: u64, seed: u64, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(seed.to_le_bytes());
    h.update(salt.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

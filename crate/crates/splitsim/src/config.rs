//! Declarative experiment configuration.
//!
//! Experiments are described by TOML files with a strict schema (unknown
//! keys are rejected, the hardware profile is mandatory) plus single-key
//! `--set a.b.c=value` overrides, so experiment matrices stay diff-able.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::HardwareProfile;
use crate::domain::Request;
use crate::engine::{EngineConfig, PolicyConfig, TransferMode};
use crate::metrics::{CapacityOptions, SloOptions};
use crate::workload::{self, LengthPredictor, ShapeSpec, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("invalid override {0:?}: expected key.path=value")]
    BadOverride(String),
    #[error("override key {0:?} does not name a table entry")]
    BadOverrideKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
}

/// Cluster description.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub instances: usize,
}

/// Workload source: synthetic generator or trace replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadConfig {
    Synthetic {
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        shape: Option<ShapeSpec>,
        rate_qps: f64,
        duration_s: f64,
        seed: u64,
        #[serde(default)]
        predictor: LengthPredictor,
    },
    Trace {
        path: String,
        #[serde(default = "default_time_scale")]
        time_scale: f64,
        #[serde(default)]
        predictor: LengthPredictor,
        #[serde(default)]
        seed: u64,
    },
}

fn default_time_scale() -> f64 {
    1.0
}

/// Engine-level knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    /// Per-batch latency target for the SLO-aware composer; kept below the
    /// request-level token-gap SLO so batch-boundary joins still fit it.
    pub batch_slo_ms: f64,
    pub nmax: usize,
    pub transfer_chunk_tokens: u64,
    pub transfer_mode: TransferMode,
    pub seed_table_from_cost_model: bool,
    pub noise_sigma: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            batch_slo_ms: 50.0,
            nmax: 256,
            transfer_chunk_tokens: 256,
            transfer_mode: TransferMode::Chunked,
            seed_table_from_cost_model: false,
            noise_sigma: 0.0,
        }
    }
}

/// Capacity-search section: bisection options plus probe execution knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySection {
    pub lo_qps: f64,
    pub hi_qps: f64,
    pub resolution_qps: f64,
    pub target_attainment: f64,
    pub probe_duration_s: f64,
    pub probe_seeds: u32,
}

impl Default for CapacitySection {
    fn default() -> Self {
        Self {
            lo_qps: 0.25,
            hi_qps: 16.0,
            resolution_qps: 0.1,
            target_attainment: 0.99,
            probe_duration_s: 60.0,
            probe_seeds: 3,
        }
    }
}

impl CapacitySection {
    pub fn options(&self, slo_p99_ms: f64) -> CapacityOptions {
        CapacityOptions {
            lo_qps: self.lo_qps,
            hi_qps: self.hi_qps,
            resolution_qps: self.resolution_qps,
            target_attainment: self.target_attainment,
            slo_p99_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Number of forced split positions, endpoints included.
    pub points: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { points: 17 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Directory for result files; stdout only when unset.
    pub dir: Option<String>,
}

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed: engine noise and tie-breaking randomness.
    #[serde(default)]
    pub seed: u64,
    pub hardware: HardwareProfile,
    pub cluster: ClusterConfig,
    pub policy: PolicyConfig,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub metrics: SloOptions,
    #[serde(default)]
    pub capacity: CapacitySection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    /// Load with `key.path=value` overrides applied before validation.
    pub fn from_file_with_overrides(path: &Path, sets: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        for set in sets {
            apply_override(&mut value, set)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hardware
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.cluster.instances == 0 {
            return Err(ConfigError::Invalid("cluster.instances must be >= 1".into()));
        }
        if self.engine.batch_slo_ms <= 0.0 || self.metrics.slo_tbt_ms <= 0.0 {
            return Err(ConfigError::Invalid(
                "engine.batch_slo_ms and metrics.slo_tbt_ms must be positive".into(),
            ));
        }
        if let WorkloadConfig::Synthetic { rate_qps, duration_s, .. } = &self.workload {
            if *rate_qps <= 0.0 || *duration_s <= 0.0 {
                return Err(ConfigError::Invalid(
                    "workload rate_qps and duration_s must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Resolve the engine configuration for this experiment.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            hw: self.hardware.clone(),
            instances: self.cluster.instances,
            policy: self.policy.clone(),
            batch_slo_ms: self.engine.batch_slo_ms,
            nmax: self.engine.nmax,
            transfer_chunk_tokens: self.engine.transfer_chunk_tokens,
            transfer_mode: self.engine.transfer_mode,
            seed_table_from_cost_model: self.engine.seed_table_from_cost_model,
            noise_sigma: self.engine.noise_sigma,
            seed: self.seed,
        }
    }

    /// Build the request stream this experiment runs.
    pub fn build_workload(&self, base_dir: Option<&Path>) -> Result<Vec<Request>, ConfigError> {
        match &self.workload {
            WorkloadConfig::Synthetic {
                preset,
                shape,
                rate_qps,
                duration_s,
                seed,
                predictor,
            } => {
                let spec = WorkloadSpec {
                    preset: preset.clone(),
                    shape: shape.clone(),
                    rate_qps: *rate_qps,
                    duration_s: *duration_s,
                    seed: *seed,
                    predictor: *predictor,
                    slo_tbt_ms: self.metrics.slo_tbt_ms,
                };
                Ok(workload::generate(&spec)?)
            }
            WorkloadConfig::Trace {
                path,
                time_scale,
                predictor,
                seed,
            } => {
                let p = PathBuf::from(path);
                let resolved = if p.is_relative() {
                    base_dir.map(|b| b.join(&p)).unwrap_or(p)
                } else {
                    p
                };
                Ok(workload::load_trace(
                    &resolved,
                    predictor,
                    self.metrics.slo_tbt_ms,
                    *seed,
                    *time_scale,
                )?)
            }
        }
    }

    /// Human-readable workload label for report rows.
    pub fn workload_label(&self) -> String {
        match &self.workload {
            WorkloadConfig::Synthetic { preset, shape, rate_qps, .. } => match preset {
                Some(p) => format!("{p}@{rate_qps}qps"),
                None => match shape {
                    Some(_) => format!("custom@{rate_qps}qps"),
                    None => "unspecified".into(),
                },
            },
            WorkloadConfig::Trace { path, .. } => format!("trace:{path}"),
        }
    }
}

/// Apply one `key.path=value` override to a parsed TOML tree.
fn apply_override(root: &mut toml::Value, set: &str) -> Result<(), ConfigError> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(set.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(set.to_string()));
    }
    // parse value with TOML literal rules; fall back to a string
    let parsed: toml::Value = toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverrideKey(key.to_string()))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Err(ConfigError::BadOverrideKey(key.to_string()))
}

/// The default synthetic hardware profile as a documented TOML snippet,
/// used to scaffold config files.
pub fn default_config_toml() -> String {
    let cfg = ExperimentConfig {
        seed: 42,
        hardware: HardwareProfile::default(),
        cluster: ClusterConfig { instances: 2 },
        policy: PolicyConfig::aps_default(),
        workload: WorkloadConfig::Synthetic {
            preset: Some("balanced".into()),
            shape: None,
            rate_qps: 2.0,
            duration_s: 60.0,
            seed: 1,
            predictor: LengthPredictor::default(),
        },
        engine: EngineSection::default(),
        metrics: SloOptions::default(),
        capacity: CapacitySection::default(),
        sweep: SweepSection::default(),
        output: OutputSection::default(),
    };
    toml::to_string_pretty(&cfg).expect("default config serializes")
}

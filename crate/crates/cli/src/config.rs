//! The run configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::Path;

use drainage_core::coupling::{GridSpec, Rule3Reading, VerifyOptions};
use drainage_core::mc::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_experiment() -> ExperimentConfig {
    ExperimentConfig::new(0.5, 0, 10_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_experiment")]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub increment_check: IncrementCheckConfig,
    #[serde(default)]
    pub tau_tail: TauTailConfig,
    #[serde(default)]
    pub eta: EtaConfig,
    #[serde(default)]
    pub bw_compare: BwCompareConfig,
    #[serde(default)]
    pub coupling_verify: CouplingVerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: default_experiment(),
            increment_check: IncrementCheckConfig::default(),
            tau_tail: TauTailConfig::default(),
            eta: EtaConfig::default(),
            bw_compare: BwCompareConfig::default(),
            coupling_verify: CouplingVerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncrementCheckConfig {
    pub k_max: i64,
}

impl Default for IncrementCheckConfig {
    fn default() -> Self {
        Self { k_max: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauTailConfig {
    /// Initial horizontal separation of the two walks.
    pub separation: i64,
}

impl Default for TauTailConfig {
    fn default() -> Self {
        Self { separation: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtaConfig {
    /// Interval widths to sweep; empty means `experiment.epsilon` alone.
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BwCompareConfig {
    /// Euler step of the Brownian simulation; `None` uses `1e-4 t`.
    pub step: Option<f64>,
    /// Replicates of the Brownian simulation; `None` reuses `experiment.replicates`.
    pub replicates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingVerifyConfig {
    pub grids: Vec<GridSpec>,
    pub ps: Vec<f64>,
    pub reading: Rule3Reading,
    pub budget_bits: u32,
}

impl Default for CouplingVerifyConfig {
    fn default() -> Self {
        Self {
            grids: vec![GridSpec { width: 12, height: 1 }],
            ps: vec![0.3, 0.5, 0.7],
            reading: Rule3Reading::PathTieBit,
            budget_bits: 24,
        }
    }
}

impl CouplingVerifyConfig {
    pub fn options(&self, workers: usize) -> VerifyOptions {
        VerifyOptions {
            grids: self.grids.clone(),
            ps: self.ps.clone(),
            reading: self.reading,
            budget_bits: self.budget_bits,
            workers,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    /// Parses a config document; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            // unknown keys are reported by name, not by their parent
            let field = match msg.split('`').nth(1) {
                Some(key) if msg.starts_with("unknown field") => {
                    if path == "." || path.is_empty() {
                        key.to_string()
                    } else if path == key || path.ends_with(&format!(".{key}")) {
                        path
                    } else {
                        format!("{path}.{key}")
                    }
                }
                _ => path,
            };
            invalid(&field, msg)
        })
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, workers: Option<usize>) {
        if let Some(s) = seed {
            self.experiment.master_seed = s;
        }
        if let Some(w) = workers {
            self.experiment.workers = w;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment.validate().map_err(|e| match e {
            drainage_core::mc::McError::Config { field, reason } => invalid(&format!("experiment.{field}"), reason),
            other => invalid("experiment", other.to_string()),
        })?;
        if self.increment_check.k_max < 0 {
            return Err(invalid("increment_check.k_max", "must be nonnegative"));
        }
        if self.tau_tail.separation < 1 {
            return Err(invalid("tau_tail.separation", "must be at least 1"));
        }
        if self.eta.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(invalid("eta.epsilons", "must be positive"));
        }
        if self.bw_compare.step.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(invalid("bw_compare.step", "must be positive"));
        }
        if self.bw_compare.replicates == Some(0) {
            return Err(invalid("bw_compare.replicates", "must be at least 1"));
        }
        let cv = &self.coupling_verify;
        if cv.grids.is_empty() {
            return Err(invalid("coupling_verify.grids", "needs at least one grid"));
        }
        if cv.ps.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(invalid("coupling_verify.ps", "must lie in (0, 1)"));
        }
        if cv.budget_bits == 0 || cv.budget_bits > 40 {
            return Err(invalid("coupling_verify.budget_bits", "must lie in 1..=40"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding with the worker count cleared,
    /// so results hash the same under any parallelism.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.experiment.workers = 0;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

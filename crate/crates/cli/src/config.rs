use std::path::{Path, PathBuf};

use ilsa_core::io::load_json;
use ilsa_core::policy::{PolicyConfig, TrainConfig};
use ilsa_core::simuser::ExperimentConfig;
use ilsa_core::trajgen::GenConfig;
use ilsa_core::{IlsaError, Result, TaskSpec};
use serde::{Deserialize, Serialize};

/// Every numeric default, overridable from one JSON file. Missing sections
/// and fields keep their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub gen: GenConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub serve: ServeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Control-loop period, milliseconds.
    pub tick_ms: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { tick_ms: 100 }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let cfg: AppConfig = match path {
            Some(p) => load_json(p)?,
            None => AppConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.policy.validate()?;
        self.experiment.gate.validate()?;
        self.experiment.oracle.validate()?;
        self.experiment.finetune.validate()?;
        self.train.validate()?;
        if self.experiment.trials == 0 {
            return Err(IlsaError::config("experiment trials must be > 0"));
        }
        if self.serve.tick_ms == 0 {
            return Err(IlsaError::config("serve tick_ms must be > 0"));
        }
        Ok(())
    }
}

/// A built-in task name or the path of a task JSON file.
pub fn resolve_task(id: &str) -> Result<TaskSpec> {
    if TaskSpec::builtin_names().contains(&id) {
        return TaskSpec::builtin(id);
    }
    let path = Path::new(id);
    if path.is_file() {
        return TaskSpec::from_json(&std::fs::read_to_string(path)?);
    }
    Err(IlsaError::config(format!(
        "unknown task '{id}' (built-in: {})",
        TaskSpec::builtin_names().join(", ")
    )))
}

/// Persistence root for the live service: `ILSA_DATA_DIR` if set, else
/// `./ilsa_data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("ILSA_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ilsa_data"))
}

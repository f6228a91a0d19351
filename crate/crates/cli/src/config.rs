//! Run configuration: one TOML file covering dataset generation, training,
//! and direct fitting, with command-line flags taking precedence over file
//! values. Unknown keys are rejected so typos cannot silently fall back to
//! defaults. Every run writes its fully resolved config into the run
//! directory.

use ellipsedet::detector::TrainConfig;
use ellipsedet::fit::FitConfig;
use ellipsedet::synth::DatasetConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
}

/// Loads the config file if given, otherwise returns defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Data(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Writes the resolved config as TOML, creating parent directories.
pub fn write_resolved(config: &RunConfig, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Data(format!("cannot serialize config: {e}")))?;
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

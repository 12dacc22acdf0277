//! TOML training configurations.

use std::path::Path;

use resobj_core::train::TrainConfig;

use crate::error::{Error, Result};

pub fn parse_config(text: &str, origin: &Path) -> Result<TrainConfig> {
    let raw: TrainConfig = toml::from_str(text).map_err(|e| Error::Config {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })?;
    raw.normalized().map_err(|e| Error::Config {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Reads and validates a configuration; modes without refinement get
/// `steps = 0`.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn config_to_toml(config: &TrainConfig) -> String {
    toml::to_string(config).expect("TrainConfig serializes to TOML")
}

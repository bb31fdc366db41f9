//! Model configuration files: JSON with every field spelled out.

use std::fs;
use std::path::Path;

use smtc_core::model::ModelConfig;

use crate::error::{Error, Result};

pub fn parse_config(text: &str, path: &Path) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_str(text).map_err(Error::json(path))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_config(&text, path)
}

pub fn save_config(path: &Path, cfg: &ModelConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

/// A config file if given, otherwise a named preset.
pub fn resolve_config(path: Option<&Path>, preset: &str) -> Result<ModelConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ModelConfig::preset(preset)?),
    }
}

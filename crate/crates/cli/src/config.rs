//! TOML config files for topologies and model presets.

use anyhow::{Context, Result};
use fabsim_core::fabric::topology::FabricTopology;
use fabsim_core::model::ModelConfig;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Deserialize)]
struct TopologyFile {
    topology: FabricTopology,
}

pub fn load_topology(path: &Path) -> Result<FabricTopology> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading topology file {}", path.display()))?;
    let parsed: TopologyFile = toml::from_str(&text).context("parsing [topology] section")?;
    parsed
        .topology
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid topology: {e}"))?;
    Ok(parsed.topology)
}

#[derive(Debug, Deserialize)]
struct ModelFile {
    model: ModelConfig,
}

pub fn load_model(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading model file {}", path.display()))?;
    let parsed: ModelFile = toml::from_str(&text).context("parsing [model] section")?;
    parsed
        .model
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid model config: {e}"))?;
    Ok(parsed.model)
}

/// Resolve `--preset NAME` or `--model FILE` into a configuration.
pub fn resolve_model(preset: Option<&str>, file: Option<&Path>) -> Result<ModelConfig> {
    match (preset, file) {
        (Some(name), None) => ModelConfig::by_preset(name)
            .with_context(|| format!("unknown preset {name:?} (try zaya1-base or tiny)")),
        (None, Some(path)) => load_model(path),
        (None, None) => anyhow::bail!("pass --preset NAME or --model FILE"),
        (Some(_), Some(_)) => anyhow::bail!("--preset and --model are mutually exclusive"),
    }
}

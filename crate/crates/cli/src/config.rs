use std::path::{Path, PathBuf};

use anyhow::Context;
use nocrek_core::{DecodeConfig, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::Invalid;

/// File locations a config may pin. Command-line paths take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub knowledge: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Single JSON document holding every tunable. Missing sections fall back to
/// the desk defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub paths: Paths,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: CliConfig = serde_json::from_str(&text)
            .map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// The flag value, else the config value, checked to exist.
pub fn existing(flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Invalid(format!("--{name} is required")))?;
    if !p.exists() {
        return Err(Invalid(format!("--{name} {} does not exist", p.display())).into());
    }
    Ok(p)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

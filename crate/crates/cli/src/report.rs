use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::CliConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Envelope shared by every JSON report.
#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    /// Unix seconds, or 0 under `--deterministic`.
    pub generated_at: u64,
    pub config: &'a CliConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store_revision: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    pub result: T,
}

pub fn now(deterministic: bool) -> u64 {
    if deterministic {
        return 0;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

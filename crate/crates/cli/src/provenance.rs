//! Sidecar records tying every output to the configuration and the exact
//! bytes of its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use obbstack::PipelineConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: PipelineConfig,
    pub inputs: Vec<InputDigest>,
}

impl Provenance {
    pub fn new(command: &'static str, config: &PipelineConfig, inputs: &[&Path]) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: digest_path(p)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Provenance {
            tool: "obbstack",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: None,
            config: config.clone(),
            inputs,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("provenance serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's files (relative name and bytes,
/// in sorted order).
pub fn digest_path(path: &Path) -> CliResult<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            let bytes = fs::read(&f).map_err(|e| CliError::io(&f, e))?;
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
    } else {
        hasher.update(fs::read(path).map_err(|e| CliError::io(path, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory when the file lives inside it.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation: what was asked, with which resolved
/// config, and every file it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &RunConfig, seeds: Vec<u64>, output_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seeds,
            output_dir: output_dir.to_path_buf(),
            artifacts: Vec::new(),
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    /// Hashes `path` and lists it under `kind`.
    pub fn record(&mut self, kind: &str, path: &Path) -> Result<()> {
        let (sha256, bytes) = sha256_file(path)?;
        let path = path
            .strip_prefix(&self.output_dir)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| path.to_path_buf());
        self.artifacts.push(Artifact {
            kind: kind.to_string(),
            path,
            sha256,
            bytes,
        });
        Ok(())
    }

    /// Checks that every artifact still exists with the recorded hash.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            let full = self.resolve(&a.path);
            let (sha, _) = sha256_file(&full)
                .map_err(|_| CliError::Assertion(format!("artifact {} is missing", full.display())))?;
            if sha != a.sha256 {
                return Err(CliError::Assertion(format!("artifact {} changed after it was recorded", full.display())));
            }
        }
        Ok(())
    }

    /// Writes the manifest into the output directory and verifies it.
    pub fn finish(&self) -> Result<PathBuf> {
        self.verify()?;
        let path = self.output_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

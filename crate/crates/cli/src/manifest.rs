use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use authguard_core::io::write_json;
use authguard_core::Result;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_hash,
            seed,
            started_unix: now_unix(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.artifacts.push(path.into());
        self
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        write_json(&dir.join(MANIFEST_FILE), &self)
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: enough to replay a command exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the relative paths in `argv` resolve against.
    pub cwd: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

/// Manifest location for a primary output: `<output>.manifest.json`, or
/// `manifest.json` inside an output directory.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("manifest.json")
    } else {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }
}

//! Run manifests: everything needed to repeat a run.

use serde::{Deserialize, Serialize};

use crate::config::RawConfig;
use crate::experiments::Experiment;

pub const MANIFEST_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub experiment: String,
    pub seed: u64,
    /// The validated configuration as flat dotted-key TOML, defaults included.
    pub config: String,
    pub extended: bool,
    pub strict: bool,
    pub threads: Option<usize>,
    pub tool_version: String,
    pub git_describe: String,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid manifest: {0}")]
pub struct ManifestError(pub String);

impl Manifest {
    /// Parses and checks a manifest: known format and experiment, and a
    /// configuration that parses.
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| ManifestError(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(ManifestError(format!("unsupported format {}", m.format)));
        }
        m.experiment_kind()?;
        m.raw_config()?;
        if !(m.wall_time_seconds >= 0.0) {
            return Err(ManifestError("wall time must be non-negative".into()));
        }
        Ok(m)
    }

    pub fn experiment_kind(&self) -> Result<Experiment, ManifestError> {
        self.experiment.parse().map_err(|_| ManifestError(format!("unknown experiment `{}`", self.experiment)))
    }

    pub fn raw_config(&self) -> Result<RawConfig, ManifestError> {
        RawConfig::parse(&self.config).map_err(|e| ManifestError(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

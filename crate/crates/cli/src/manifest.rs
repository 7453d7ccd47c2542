use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use glr_core::config::PipelineConfig;
use serde::Serialize;

/// Sidecar JSON written next to every stage's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<&'static str, PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Extra stage-specific facts, e.g. sample counts.
    pub summary: serde_json::Value,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(subcommand: &'static str, config: &PipelineConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
            started_unix_s: unix_now(),
            finished_unix_s: 0.0,
        }
    }

    pub fn input(&mut self, name: &'static str, path: &Path) {
        self.inputs.insert(name, path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Checks every declared output exists, then writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        for out in &self.outputs {
            if !out.is_file() {
                bail!("declared output {} was not written", out.display());
            }
        }
        self.finished_unix_s = unix_now();
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, json + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<file>.manifest.json` beside a single-file output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

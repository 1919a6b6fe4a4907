use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration; no defaults or input files are consulted on rerun.
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("parse-error: {}: {e}", path.display())))
}

pub fn write_manifest(out: &Path, command: &str, config: &impl Serialize, seed: u64, outputs: Vec<PathBuf>, wall_time_s: f64) -> Result<(), Failure> {
    let m = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(config).expect("serializable"),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        wall_time_s,
    };
    write_text(&out.join(MANIFEST_FILE), &to_pretty(&m))
}

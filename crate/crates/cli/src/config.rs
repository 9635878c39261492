//! Run configuration: an optional JSON file whose sections are overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trodo_core::benchmark::protocol::{EvalMode, EvalProtocol};
use trodo_core::benchmark::zoo::ZooConfig;
use trodo_core::calibration::CalibrationOptions;

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub calibrate: Option<CalibrateSection>,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub zoo: Option<ZooConfig>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    #[serde(default)]
    pub surrogate: Option<PathBuf>,
    #[serde(default)]
    pub sources: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    #[serde(default)]
    pub options: CalibrationOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    #[serde(default)]
    pub sources: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    /// Defaults to the desk protocol for `mode`.
    #[serde(default)]
    pub protocol: Option<EvalProtocol>,
}

fn default_mode() -> EvalMode {
    EvalMode::Trodo
}

fn default_batch() -> usize {
    trodo_core::scanner::DEFAULT_SCAN_BATCH
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            surrogate: None,
            sources: None,
            mode: default_mode(),
            options: CalibrationOptions::default(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            manifest: None,
            mode: default_mode(),
            protocol: None,
        }
    }
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            model: None,
            calibration: None,
            sources: None,
            mode: default_mode(),
            batch_size: default_batch(),
            steps: None,
            epsilon: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let bytes = std::fs::read(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| UsageError(format!("malformed config {}: {e}", path.display())))
    }
}

/// Seed precedence: flag, then `TRODO_SEED`, then the config file.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<Option<u64>, UsageError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TRODO_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("TRODO_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(file),
    }
}

/// The path, after checking it exists.
pub fn existing(path: Option<PathBuf>, what: &str) -> Result<PathBuf, UsageError> {
    let p = path.ok_or_else(|| UsageError(format!("missing {what} path")))?;
    if !p.exists() {
        return Err(UsageError(format!("{what} not found: {}", p.display())));
    }
    Ok(p)
}

/// Written next to every artifact so that the run can be repeated exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho<T> {
    pub command: String,
    pub tool_version: String,
    pub model_format_version: u32,
    pub calibration_version: u32,
    pub report_version: u32,
    pub manifest_version: u32,
    pub seed: u64,
    pub config: T,
}

impl<T> ConfigEcho<T> {
    pub fn new(command: &str, seed: u64, config: T) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            model_format_version: trodo_core::model_io::FORMAT_VERSION,
            calibration_version: trodo_core::calibration::CALIBRATION_VERSION,
            report_version: trodo_core::scanner::REPORT_VERSION,
            manifest_version: trodo_core::benchmark::zoo::MANIFEST_VERSION,
            seed,
            config,
        }
    }
}

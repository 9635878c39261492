//! Calibrate-then-scan protocol used to score a zoo in either scanning mode.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::dataset::{generate_validation_set, Dataset};
use super::zoo::{evaluate_zoo, ZooEvaluation};
use crate::calibration::{calibrate, CalibrationOptions, CalibrationResult};
use crate::error::Result;
use crate::model_io::ModelBundle;
use crate::scanner::{ScanConfig, ScanMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Benign training samples feed the OOD generator.
    Trodo,
    /// Only an external set of validation textures is available.
    TrodoZero,
}

impl EvalMode {
    pub fn scan_mode(self, sources_path: PathBuf) -> ScanMode {
        match self {
            EvalMode::Trodo => ScanMode::Trodo {
                benign_samples_path: sources_path,
            },
            EvalMode::TrodoZero => ScanMode::TrodoZero {
                validation_set_path: sources_path,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub calibration: CalibrationOptions,
    pub scan_batch: usize,
    pub scan_seed: u64,
    /// Benign images per class taken from the training split in TRODO mode.
    pub benign_per_class: usize,
    pub validation_size: usize,
    pub validation_seed: u64,
}

/// OOD samples per scan and per baseline sub-batch in the desk protocol.
pub const DESK_SCAN_BATCH: usize = 256;

impl EvalProtocol {
    /// Settings for the desk-scale zoo. γ is set relative to the surrogate's
    /// own OOD confidence because toy classifiers are already far above 0.5
    /// on crafted OOD samples.
    pub fn desk(mode: EvalMode) -> Self {
        Self {
            mode,
            calibration: CalibrationOptions {
                samples_per_baseline: DESK_SCAN_BATCH,
                gamma_margin: Some(0.01),
                ..CalibrationOptions::default()
            },
            scan_batch: DESK_SCAN_BATCH,
            scan_seed: 11,
            benign_per_class: 10,
            validation_size: 200,
            validation_seed: 1,
        }
    }

    /// The source images this mode scans with.
    pub fn sources(&self, train: &Dataset) -> Result<Dataset> {
        match self.mode {
            EvalMode::Trodo => Ok(train.take_per_class(self.benign_per_class)),
            EvalMode::TrodoZero => generate_validation_set(
                self.validation_size,
                train.image_shape()[1],
                train.num_classes,
                self.validation_seed,
            ),
        }
    }

    pub fn scan_config(&self, calibration: CalibrationResult, sources_path: PathBuf) -> ScanConfig {
        let mut cfg = ScanConfig::new(self.mode.scan_mode(sources_path), calibration, self.scan_seed);
        cfg.batch_size = self.scan_batch;
        cfg.transforms = self.calibration.transforms.clone();
        cfg.k = self.calibration.k;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub calibration: CalibrationResult,
    pub evaluation: ZooEvaluation,
}

/// Calibrates on `surrogate` and scans every model with the same sources.
pub fn run_protocol(
    surrogate: &ModelBundle,
    models: &[(&str, &ModelBundle)],
    sources: &Dataset,
    protocol: &EvalProtocol,
) -> Result<ProtocolRun> {
    let calibration = calibrate(surrogate, &sources.images, &protocol.calibration)?;
    let scan = protocol.scan_config(calibration.clone(), PathBuf::new());
    let evaluation = evaluate_zoo(models, &scan, &sources.images)?;
    Ok(ProtocolRun {
        calibration,
        evaluation,
    })
}

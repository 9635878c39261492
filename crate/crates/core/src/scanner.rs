//! Signature computation and the trojaned/clean verdict.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_increase_id_score_batch, AttackConfig, AttackObjective};
use crate::augmentation::{craft_ood_cycle, default_transforms, OodBatch, TransformSpec, DEFAULT_K};
use crate::calibration::CalibrationResult;
use crate::error::{Error, Result};
use crate::model_io::ModelBundle;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_SCAN_BATCH: usize = 64;

/// Samples attacked together in one batched PGD run.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleShift {
    pub id_score_before: f64,
    pub id_score_after: f64,
    pub delta: f64,
}

/// ID-Score before and after the attack for every sample of `ood`.
///
/// Work is split into fixed chunks keyed by index, so results do not depend
/// on the thread schedule.
pub fn per_sample_shifts(
    model: &ModelBundle,
    ood: &OodBatch,
    attack: &AttackConfig,
) -> Result<Vec<SampleShift>> {
    if ood.is_empty() {
        return Err(Error::EmptyBatch("OOD batch"));
    }
    let indices: Vec<usize> = (0..ood.len()).collect();
    let chunks: Vec<Vec<SampleShift>> = indices
        .par_chunks(CHUNK)
        .map(|idx| {
            let xs = ood.gather(idx);
            let before = model.id_scores(&xs, idx.len())?;
            let adv = pgd_increase_id_score_batch(model, &xs, idx.len(), attack)?;
            let after = model.id_scores(&adv, idx.len())?;
            Ok(before
                .into_iter()
                .zip(after)
                .map(|(b, a)| SampleShift {
                    id_score_before: b,
                    id_score_after: a,
                    delta: a - b,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean ID-Score increase over the batch, with the per-sample shifts.
pub fn compute_signature(
    model: &ModelBundle,
    ood: &OodBatch,
    attack: &AttackConfig,
) -> Result<(f64, Vec<SampleShift>)> {
    if attack.objective != AttackObjective::MaximizeIdScore {
        return Err(Error::InvalidConfig(
            "signature needs the ID-Score attack objective".into(),
        ));
    }
    let shifts = per_sample_shifts(model, ood, attack)?;
    let s = shifts.iter().map(|v| v.delta).sum::<f64>() / shifts.len() as f64;
    Ok((s, shifts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanMode {
    /// A few benign training samples are available.
    Trodo { benign_samples_path: PathBuf },
    /// No training data: an external validation set is used instead.
    TrodoZero { validation_set_path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub mode: ScanMode,
    /// Overrides the calibrated attack when set.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub calibration: CalibrationResult,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<TransformSpec>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_batch() -> usize {
    DEFAULT_SCAN_BATCH
}

impl ScanConfig {
    pub fn new(mode: ScanMode, calibration: CalibrationResult, seed: u64) -> Self {
        Self {
            mode,
            attack: None,
            calibration,
            transforms: default_transforms(),
            k: DEFAULT_K,
            batch_size: DEFAULT_SCAN_BATCH,
            seed,
        }
    }

    pub fn effective_attack(&self) -> AttackConfig {
        self.attack
            .clone()
            .unwrap_or_else(|| self.calibration.attack.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Trojaned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub report_version: u32,
    pub model_fingerprint: String,
    pub per_sample: Vec<SampleShift>,
    pub signature_s: f64,
    pub z_statistic: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub verdict: Verdict,
    pub config_echo: ScanConfig,
    /// Non-deterministic fields live here and nowhere else.
    pub timing: Timing,
}

impl ScanReport {
    pub fn summary_line(&self) -> String {
        format!(
            "verdict={:?} S={:.6} z={:.6} tau={:.6} eps={:.6} n={}",
            self.verdict,
            self.signature_s,
            self.z_statistic,
            self.tau,
            self.epsilon,
            self.per_sample.len()
        )
    }
}

/// Scans a model using the sources named by `cfg.mode`.
pub fn scan(model: &ModelBundle, cfg: &ScanConfig) -> Result<ScanReport> {
    let path = match &cfg.mode {
        ScanMode::Trodo {
            benign_samples_path,
        } => benign_samples_path,
        ScanMode::TrodoZero {
            validation_set_path,
        } => validation_set_path,
    };
    let data = crate::benchmark::dataset::load_dataset(path)?;
    scan_with_sources(model, cfg, &data.images)
}

/// Scans a model with in-memory source images, crafting `cfg.batch_size`
/// OOD samples from them in turn.
pub fn scan_with_sources(model: &ModelBundle, cfg: &ScanConfig, sources: &[Tensor]) -> Result<ScanReport> {
    let start = Instant::now();
    if sources.is_empty() {
        return Err(match cfg.mode {
            ScanMode::Trodo { .. } => Error::EmptyBatch("TRODO mode needs benign samples"),
            ScanMode::TrodoZero { .. } => Error::EmptyBatch("TRODO-Zero mode needs a validation set"),
        });
    }
    let cal = &cfg.calibration;
    if cal.num_classes != model.num_classes() {
        return Err(Error::ClassMismatch {
            model: model.num_classes(),
            calibration: cal.num_classes,
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be > 0".into()));
    }
    let ood = craft_ood_cycle(sources, cfg.batch_size, &cfg.transforms, cfg.k, cfg.seed)?;
    let attack = cfg.effective_attack();
    let (s, per_sample) = compute_signature(model, &ood, &attack)?;
    let z = cal.statistic(s);
    let verdict = if z > cal.tau {
        Verdict::Trojaned
    } else {
        Verdict::Clean
    };
    Ok(ScanReport {
        report_version: REPORT_VERSION,
        model_fingerprint: model.fingerprint(),
        per_sample,
        signature_s: s,
        z_statistic: z,
        tau: cal.tau,
        epsilon: attack.epsilon,
        verdict,
        config_echo: cfg.clone(),
        timing: Timing {
            wall_time_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

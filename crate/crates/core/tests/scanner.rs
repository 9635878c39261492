mod common;

use std::path::PathBuf;

use trodo_core::benchmark::dataset::{save_dataset, Dataset};
use trodo_core::calibration::CompareSpace;
use trodo_core::scanner::{scan, scan_with_sources, ScanConfig, ScanMode, ScanReport, Verdict};
use trodo_core::{Error, Provenance};

const SHAPE: [usize; 3] = [3, 8, 8];

fn setup() -> (trodo_core::ModelBundle, Vec<trodo_core::Tensor>, ScanConfig) {
    let surrogate = common::random_mlp(&SHAPE, 4, 21);
    let sources = common::random_images(10, &SHAPE, 22);
    let cal = common::small_calibration(&surrogate, &sources);
    let mut cfg = ScanConfig::new(ScanMode::Trodo { benign_samples_path: PathBuf::new() }, cal, 3);
    cfg.batch_size = 24;
    (common::random_mlp(&SHAPE, 4, 23), sources, cfg)
}

fn without_timing(r: &ScanReport) -> ScanReport {
    let mut r = r.clone();
    r.timing.wall_time_seconds = 0.0;
    r
}

#[test]
fn zero_steps_give_zero_signature_and_clean_verdict() {
    let (model, sources, mut cfg) = setup();
    let mut attack = cfg.calibration.attack.clone();
    attack.steps = 0;
    cfg.attack = Some(attack);
    let r = scan_with_sources(&model, &cfg, &sources).unwrap();
    assert_eq!(r.signature_s, 0.0);
    assert_eq!(r.z_statistic, 0.0);
    assert_eq!(r.verdict, Verdict::Clean);
    assert!(r.per_sample.iter().all(|s| s.delta == 0.0));
}

#[test]
fn signature_is_mean_shift_and_verdict_follows_threshold() {
    let (model, sources, mut cfg) = setup();
    let r = scan_with_sources(&model, &cfg, &sources).unwrap();
    assert_eq!(r.per_sample.len(), 24);
    let mean = r.per_sample.iter().map(|s| s.delta).sum::<f64>() / 24.0;
    assert!((mean - r.signature_s).abs() < 1e-15);
    assert!((r.z_statistic + (1.0 - r.signature_s).ln()).abs() < 1e-12);

    cfg.calibration.tau = r.z_statistic;
    assert_eq!(scan_with_sources(&model, &cfg, &sources).unwrap().verdict, Verdict::Clean);
    cfg.calibration.tau = r.z_statistic - 1e-9;
    assert_eq!(scan_with_sources(&model, &cfg, &sources).unwrap().verdict, Verdict::Trojaned);
}

#[test]
fn raw_space_compares_signature_directly() {
    let (model, sources, mut cfg) = setup();
    cfg.calibration.compare_space = CompareSpace::Raw;
    let r = scan_with_sources(&model, &cfg, &sources).unwrap();
    assert_eq!(r.z_statistic, r.signature_s);
}

#[test]
fn scans_are_deterministic_per_seed() {
    let (model, sources, mut cfg) = setup();
    let a = scan_with_sources(&model, &cfg, &sources).unwrap();
    let b = scan_with_sources(&model, &cfg, &sources).unwrap();
    assert_eq!(without_timing(&a), without_timing(&b));
    cfg.seed += 1;
    let c = scan_with_sources(&model, &cfg, &sources).unwrap();
    assert_ne!(a.signature_s, c.signature_s);
}

#[test]
fn class_mismatch_and_empty_sources_rejected() {
    let (_, sources, cfg) = setup();
    let other = common::random_mlp(&SHAPE, 5, 1);
    assert!(matches!(
        scan_with_sources(&other, &cfg, &sources),
        Err(Error::ClassMismatch { model: 5, calibration: 4 })
    ));
    let (model, _, cfg) = setup();
    assert!(matches!(scan_with_sources(&model, &cfg, &[]), Err(Error::EmptyBatch(_))));
    let zero = ScanConfig { batch_size: 0, ..cfg };
    assert!(scan_with_sources(&model, &zero, &sources).is_err());
}

#[test]
fn scan_from_file_matches_in_memory_scan() {
    let (model, sources, mut cfg) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("benign.trodod");
    let ds = Dataset {
        labels: vec![0; sources.len()],
        images: sources,
        num_classes: 4,
        provenance: Provenance::Clean,
    };
    save_dataset(&ds, &path).unwrap();
    // The file round trip quantizes pixels, so compare against the reloaded set.
    let reloaded = trodo_core::benchmark::dataset::load_dataset(&path).unwrap();
    cfg.mode = ScanMode::TrodoZero { validation_set_path: path };
    let a = scan(&model, &cfg).unwrap();
    let b = scan_with_sources(&model, &cfg, &reloaded.images).unwrap();
    assert_eq!(without_timing(&a), without_timing(&b));
}

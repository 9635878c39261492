mod common;

use trodo_core::benchmark::dataset::DatasetConfig;
use trodo_core::benchmark::poison::{LabelMapping, PatchPattern, Corner, TriggerSpec};
use trodo_core::benchmark::protocol::{run_protocol, EvalMode, EvalProtocol};
use trodo_core::benchmark::train::TrainConfig;
use trodo_core::benchmark::zoo::{build_zoo, evaluate_zoo, load_zoo_models, save_zoo, Architecture, ZooConfig};
use trodo_core::calibration::CalibrationOptions;
use trodo_core::scanner::Verdict;
use trodo_core::{Error, ModelBundle};

fn tiny() -> ZooConfig {
    ZooConfig {
        dataset: DatasetConfig {
            num_classes: 4,
            train_per_class: 40,
            test_per_class: 15,
            image_size: 8,
            hue_jitter: 0.03,
            seed: 0,
        },
        architecture: Architecture::Mlp { hidden: vec![16] },
        train: TrainConfig { epochs: 6, ..common::tiny_train() },
        adaptive: None,
        n_clean: 2,
        n_trojaned_per_attack: 1,
        triggers: vec![TriggerSpec::Patch { size_px: 3, location: Corner::BottomRight, pattern: PatchPattern::Solid { value: 1.0 } }],
        mappings: vec![LabelMapping::AllToOne { target: 0 }],
        poison_rate: 0.2,
        asr_gate: 0.5,
        seed: 1,
    }
}

fn tiny_protocol(mode: EvalMode) -> EvalProtocol {
    EvalProtocol {
        calibration: CalibrationOptions { n_baseline: 5, ..common::small_options() },
        scan_batch: 16,
        ..EvalProtocol::desk(mode)
    }
}

#[test]
fn builds_admits_and_evaluates() {
    let zoo = build_zoo(&tiny(), 1).unwrap();
    let m = &zoo.manifest;
    assert_eq!(m.entries.len(), 3);
    assert_eq!(zoo.models.len(), 3);
    let troj = &m.entries[2];
    assert!(troj.provenance.is_trojaned());
    assert!(troj.asr.unwrap() >= 0.5 && troj.admitted);
    assert!(m.entries[..2].iter().all(|e| e.asr.is_none() && e.admitted));
    assert!(m.surrogate.clean_accuracy > 0.8);

    let admitted: Vec<(&str, &ModelBundle)> = zoo.admitted().into_iter().map(|(e, b)| (e.id.as_str(), b)).collect();
    for mode in [EvalMode::Trodo, EvalMode::TrodoZero] {
        let p = tiny_protocol(mode);
        let sources = p.sources(&zoo.data.train).unwrap();
        let run = run_protocol(&zoo.surrogate, &admitted, &sources, &p).unwrap();
        assert_eq!(run.evaluation.confusion.total(), 3);
        assert_eq!(run.evaluation.groups["clean"].count, 2);
    }
}

#[test]
fn zero_step_scans_flag_nothing() {
    let zoo = build_zoo(&tiny(), 1).unwrap();
    let p = tiny_protocol(EvalMode::Trodo);
    let sources = p.sources(&zoo.data.train).unwrap();
    let mut cal = trodo_core::calibration::calibrate(&zoo.surrogate, &sources.images, &p.calibration).unwrap();
    cal.attack.steps = 0;
    let cfg = p.scan_config(cal, Default::default());
    let models: Vec<(&str, &ModelBundle)> = zoo.admitted().into_iter().map(|(e, b)| (e.id.as_str(), b)).collect();
    let eval = evaluate_zoo(&models, &cfg, &sources.images).unwrap();
    assert!(eval.models.iter().all(|v| v.verdict == Verdict::Clean && v.signature_s == 0.0));
    assert!((eval.accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(eval.confusion.false_positive, 0);
}

#[test]
fn surrogate_in_zoo_is_rejected() {
    let zoo = build_zoo(&tiny(), 1).unwrap();
    let p = tiny_protocol(EvalMode::Trodo);
    let sources = p.sources(&zoo.data.train).unwrap();
    let models = vec![("clean_000", &zoo.models[0]), ("sneaky", &zoo.surrogate)];
    let err = run_protocol(&zoo.surrogate, &models, &sources, &p).unwrap_err();
    assert!(matches!(err, Error::SurrogateInZoo(ref id) if id == "sneaky"), "{err}");
}

#[test]
fn gate_excludes_weak_trojans_and_save_load_round_trips() {
    // A faint blend at a low rate does not implant a working trigger.
    let cfg = ZooConfig {
        triggers: vec![TriggerSpec::Blended { trigger_image_seed: 1, alpha: 0.02 }],
        poison_rate: 0.02,
        asr_gate: 0.9,
        ..tiny()
    };
    let mut zoo = build_zoo(&cfg, 2).unwrap();
    assert!(!zoo.manifest.entries[2].admitted, "asr {:?}", zoo.manifest.entries[2].asr);
    assert_eq!(zoo.admitted().len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let manifest = save_zoo(&mut zoo, dir.path()).unwrap();
    let (m, models) = load_zoo_models(&manifest).unwrap();
    assert_eq!(m, zoo.manifest);
    assert_eq!(models.len(), 2);
    for (entry, model) in &models {
        assert_eq!(entry.fingerprint, model.fingerprint());
    }
}

#[test]
fn builds_do_not_depend_on_worker_count() {
    let a = build_zoo(&tiny(), 1).unwrap();
    let b = build_zoo(&tiny(), 3).unwrap();
    assert_eq!(a.manifest, b.manifest);
}

#[test]
fn empty_zoo_rejected() {
    let cfg = ZooConfig { n_clean: 0, n_trojaned_per_attack: 0, ..tiny() };
    assert!(matches!(build_zoo(&cfg, 1), Err(Error::InvalidConfig(_))));
}

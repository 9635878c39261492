mod common;

use trodo_core::augmentation::{craft_ood_set, default_transforms};
use trodo_core::benchmark::dataset::Dataset;
use trodo_core::benchmark::train::{
    accuracy, mlp, train_adaptive, train_classifier, train_with_log, AdaptiveLoss, TrainConfig, TrainMode,
};
use trodo_core::attack::AttackConfig;
use trodo_core::{Error, Provenance, Tensor, TrainingMode};

fn separable() -> Dataset {
    // Two Gaussian-free clusters in 2D, label = x₀ > x₁.
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let a = (i as f64 * 0.618).fract();
        let b = (i as f64 * 0.382 + 0.1).fract();
        if (a - b).abs() < 0.1 {
            continue;
        }
        images.push(Tensor::new(vec![2], vec![a, b]).unwrap());
        labels.push(usize::from(a > b));
    }
    Dataset { images, labels, num_classes: 2, provenance: Provenance::Clean }
}

#[test]
fn learns_a_separable_problem() {
    let ds = separable();
    let cfg = TrainConfig { epochs: 40, batch_size: 16, learning_rate: 0.1, ..TrainConfig::default() };
    let out = train_with_log(&ds, &mlp(&[2], &[8], 2), &cfg, None).unwrap();
    assert!(accuracy(&out.model, &ds).unwrap() >= 0.99);
    let n = out.batch_losses.len();
    let head: f64 = out.batch_losses[..10].iter().sum();
    let tail: f64 = out.batch_losses[n - 10..].iter().sum();
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn synthetic_images_are_learnable() {
    let data = common::tiny_data(0);
    let model = common::trained_mlp(&data, 1);
    assert!(accuracy(&model, &data.test).unwrap() >= 0.9);
}

#[test]
fn training_is_bit_deterministic() {
    let data = common::tiny_data(0);
    let a = common::trained_mlp(&data, 4);
    let b = common::trained_mlp(&data, 4);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = common::trained_mlp(&data, 5);
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn zero_weight_adaptive_losses_reduce_to_standard_training() {
    let data = common::tiny_data(1);
    let arch = mlp(data.train.image_shape(), &[12], 4);
    let cfg = TrainConfig { epochs: 2, ..common::tiny_train() };
    let ood = craft_ood_set(&data.train.images[..16], &default_transforms(), 3, 0).unwrap();
    let plain = train_classifier(&data.train, &arch, &cfg).unwrap();
    let losses = [
        AdaptiveLoss::ConfidenceEqualizing { lambda1: 0.0, lambda2: 0.0 },
        AdaptiveLoss::ShiftSuppressing { lambda3: 0.0, attack: AttackConfig::id_score(0.1) },
    ];
    let plain_log = train_with_log(&data.train, &arch, &cfg, None).unwrap();
    for loss in losses {
        let adaptive = train_adaptive(&data.train, &ood, &loss, &arch, &cfg).unwrap();
        assert_eq!(adaptive.network().params(), plain.network().params());
        assert!(matches!(adaptive.meta().training_mode, TrainingMode::Adaptive { .. }));
        let log = train_with_log(&data.train, &arch, &cfg, Some((&ood, &loss))).unwrap();
        assert_eq!(log.batch_losses.len(), plain_log.batch_losses.len());
        for (a, b) in log.batch_losses.iter().zip(&plain_log.batch_losses) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
    let nonzero = train_adaptive(&data.train, &ood, &AdaptiveLoss::variant1(), &arch, &cfg).unwrap();
    assert_ne!(nonzero.network().params(), plain.network().params());
}

#[test]
fn adversarial_training_records_its_mode() {
    let data = common::tiny_data(2);
    let arch = mlp(data.train.image_shape(), &[8], 4);
    let cfg = TrainConfig { epochs: 1, mode: TrainMode::adversarial_default(), ..common::tiny_train() };
    let model = train_classifier(&data.train, &arch, &cfg).unwrap();
    assert!(matches!(model.meta().training_mode, TrainingMode::Adversarial { pgd_steps: 10, .. }));
}

#[test]
fn divergence_is_detected() {
    let data = common::tiny_data(3);
    let arch = mlp(data.train.image_shape(), &[16], 4);
    let cfg = TrainConfig { learning_rate: 1e200, momentum: 0.0, ..common::tiny_train() };
    let err = train_classifier(&data.train, &arch, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn bad_configs_rejected() {
    let data = common::tiny_data(3);
    let arch = mlp(data.train.image_shape(), &[8], 4);
    let zero = TrainConfig { epochs: 0, ..common::tiny_train() };
    assert!(matches!(train_classifier(&data.train, &arch, &zero), Err(Error::InvalidConfig(_))));
    let wrong_head = mlp(data.train.image_shape(), &[8], 3);
    assert!(train_classifier(&data.train, &wrong_head, &common::tiny_train()).is_err());
}

#[test]
fn confidence_equalizing_shrinks_the_id_ood_gap() {
    let data = common::tiny_data(4);
    let arch = mlp(data.train.image_shape(), &[16], 4);
    let cfg = common::tiny_train();
    let ood = craft_ood_set(&data.train.images, &default_transforms(), 3, 1).unwrap();
    let held_out = craft_ood_set(&data.test.images, &default_transforms(), 3, 2).unwrap();
    let gap = |m: &trodo_core::ModelBundle| {
        let mean = |xs: &[Tensor]| xs.iter().map(|x| m.id_score(x).unwrap()).sum::<f64>() / xs.len() as f64;
        mean(&data.test.images) - mean(&held_out.images)
    };
    let plain = train_classifier(&data.train, &arch, &cfg).unwrap();
    let adaptive = train_adaptive(&data.train, &ood, &AdaptiveLoss::variant1(), &arch, &cfg).unwrap();
    assert!(gap(&adaptive) < gap(&plain), "{} vs {}", gap(&adaptive), gap(&plain));
}

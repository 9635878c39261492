#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trodo_core::benchmark::dataset::{generate, DatasetConfig, SyntheticSplit};
use trodo_core::benchmark::train::{mlp, train_classifier, TrainConfig};
use trodo_core::calibration::{calibrate, CalibrationOptions, CalibrationResult};
use trodo_core::{ModelBundle, Network, Tensor};

pub fn tiny_data(seed: u64) -> SyntheticSplit {
    generate(&DatasetConfig {
        num_classes: 4,
        train_per_class: 40,
        test_per_class: 20,
        image_size: 8,
        hue_jitter: 0.03,
        seed,
    })
    .unwrap()
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

pub fn trained_mlp(data: &SyntheticSplit, seed: u64) -> ModelBundle {
    let arch = mlp(data.train.image_shape(), &[16], data.train.num_classes);
    train_classifier(&data.train, &arch, &TrainConfig { seed, ..tiny_train() }).unwrap()
}

pub fn random_mlp(shape: &[usize], classes: usize, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::random(shape.to_vec(), mlp(shape, &[12], classes), &mut rng).unwrap();
    ModelBundle::clean(net, seed).unwrap()
}

pub fn random_images(n: usize, shape: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: usize = shape.iter().product();
    (0..n)
        .map(|_| Tensor::new(shape.to_vec(), (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

/// Small calibration budget: 6 baselines of 16 samples.
pub fn small_options() -> CalibrationOptions {
    CalibrationOptions {
        n_baseline: 6,
        samples_per_baseline: 16,
        epsilon_samples: 16,
        gamma_margin: Some(0.02),
        ..CalibrationOptions::default()
    }
}

pub fn small_calibration(surrogate: &ModelBundle, sources: &[Tensor]) -> CalibrationResult {
    calibrate(surrogate, sources, &small_options()).unwrap()
}

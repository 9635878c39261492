//! Fixtures shared by the criterion benches: untrained desk-shaped models
//! and crafted OOD batches, so benches measure compute and not training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trodo_core::augmentation::{craft_ood_cycle, default_transforms, OodBatch, DEFAULT_K};
use trodo_core::benchmark::zoo::ZooConfig;
use trodo_core::{ModelBundle, Network, Tensor};

/// Input shape of the desk preset.
pub fn desk_shape() -> Vec<usize> {
    let s = ZooConfig::desk().dataset.image_size;
    vec![3, s, s]
}

/// A randomly initialised model with the desk architecture.
pub fn desk_model(seed: u64) -> ModelBundle {
    let cfg = ZooConfig::desk();
    let shape = desk_shape();
    let layers = cfg.architecture.layers(&shape, cfg.dataset.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::random(shape, layers, &mut rng).expect("desk architecture is valid");
    ModelBundle::clean(net, seed).expect("fresh model is valid")
}

pub fn source_images(n: usize, seed: u64) -> Vec<Tensor> {
    let shape = desk_shape();
    let d: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(shape.clone(), (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

pub fn ood_batch(n: usize, seed: u64) -> OodBatch {
    craft_ood_cycle(&source_images(16, seed), n, &default_transforms(), DEFAULT_K, seed)
        .expect("sources share a shape")
}

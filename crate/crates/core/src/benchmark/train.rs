//! Minibatch SGD with momentum for the toy classifiers.
//!
//! Three regimes share one loop:
//! * standard cross-entropy training;
//! * adversarial training on PGD-perturbed (ℓ∞, cross-entropy) inputs;
//! * the two adaptive losses that try to blunt the scanner signature.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::attack::{pgd_cross_entropy_batch, run_pgd, AttackConfig};
use crate::augmentation::OodBatch;
use crate::error::{Error, Result};
use crate::model_io::{ModelBundle, ModelMeta, TrainingMode};
use crate::nn::{objective_grad, Gradients, LayerSpec, Network, Objective};
use crate::tensor::{argmax, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    Adversarial { steps: usize, eps_linf: f64 },
}

impl TrainMode {
    /// PGD-10 at ℓ∞ radius 2/255.
    pub fn adversarial_default() -> Self {
        TrainMode::Adversarial {
            steps: 10,
            eps_linf: 2.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub mode: TrainMode,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 64,
            momentum: 0.9,
            mode: TrainMode::Standard,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {}", self.momentum)));
        }
        if let TrainMode::Adversarial { eps_linf, .. } = self.mode {
            if !(eps_linf >= 0.0) {
                return Err(Error::InvalidConfig(format!("eps_linf {eps_linf}")));
            }
        }
        Ok(())
    }
}

/// Composite-loss parameters of the adaptive attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AdaptiveLoss {
    /// `CE(x) − λ1·H(U; f(z)) + λ2·H(U; f(x))`, z drawn from the OOD batch.
    ConfidenceEqualizing { lambda1: f64, lambda2: f64 },
    /// `CE(x) − λ3·H(f(z); f(z*))`, z* the ID-Score attack on z.
    ShiftSuppressing { lambda3: f64, attack: AttackConfig },
}

impl AdaptiveLoss {
    pub fn variant1() -> Self {
        AdaptiveLoss::ConfidenceEqualizing {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }

    pub fn variant2(attack: AttackConfig) -> Self {
        AdaptiveLoss::ShiftSuppressing {
            lambda3: 0.5,
            attack,
        }
    }

    fn training_mode(&self) -> TrainingMode {
        match self {
            AdaptiveLoss::ConfidenceEqualizing { lambda1, lambda2 } => TrainingMode::Adaptive {
                variant: 1,
                lambdas: vec![*lambda1, *lambda2],
            },
            AdaptiveLoss::ShiftSuppressing { lambda3, .. } => TrainingMode::Adaptive {
                variant: 2,
                lambdas: vec![*lambda3],
            },
        }
    }
}

/// Multi-layer perceptron: flatten, then dense layers with ReLU between.
pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Flatten];
    let mut width = input_shape.iter().product();
    for &h in hidden {
        layers.push(LayerSpec::Dense { input: width, output: h });
        layers.push(LayerSpec::Relu);
        width = h;
    }
    layers.push(LayerSpec::Dense {
        input: width,
        output: num_classes,
    });
    layers
}

/// conv(C→c1, 3×3) – ReLU – pool – conv(c1→c2, 3×3) – ReLU – pool – flatten,
/// then optional hidden dense layers with ReLU, then the dense head.
pub fn cnn(input_shape: &[usize], channels: (usize, usize), hidden: &[usize], num_classes: usize) -> Vec<LayerSpec> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (c1, c2) = channels;
    let mut layers = vec![
        LayerSpec::Conv2d { in_channels: c, out_channels: c1, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Conv2d { in_channels: c1, out_channels: c2, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
    ];
    let mut width = c2 * (h / 4) * (w / 4);
    for &n in hidden {
        layers.push(LayerSpec::Dense { input: width, output: n });
        layers.push(LayerSpec::Relu);
        width = n;
    }
    layers.push(LayerSpec::Dense { input: width, output: num_classes });
    layers
}

/// Result of a training run with the mean loss of every minibatch.
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub batch_losses: Vec<f64>,
}

pub fn train_classifier(ds: &Dataset, arch: &[LayerSpec], cfg: &TrainConfig) -> Result<ModelBundle> {
    Ok(train_with_log(ds, arch, cfg, None)?.model)
}

pub fn train_adaptive(
    ds: &Dataset,
    ood: &OodBatch,
    loss: &AdaptiveLoss,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
) -> Result<ModelBundle> {
    Ok(train_with_log(ds, arch, cfg, Some((ood, loss)))?.model)
}

/// The shared loop; `adaptive` switches on one of the composite losses.
pub fn train_with_log(
    ds: &Dataset,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
    adaptive: Option<(&OodBatch, &AdaptiveLoss)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyBatch("training set"));
    }
    if let Some((ood, _)) = adaptive {
        if ood.is_empty() {
            return Err(Error::EmptyBatch("adaptive OOD batch"));
        }
        if ood.image_shape() != ds.image_shape() {
            return Err(Error::Shape("OOD batch and training images differ in shape".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::random(ds.image_shape().to_vec(), arch.to_vec(), &mut rng)?;
    let c = net.num_outputs();
    if c != ds.num_classes {
        return Err(Error::InvalidConfig(format!(
            "architecture has {c} outputs for {} classes",
            ds.num_classes
        )));
    }
    let mut grads = Gradients::zeros_like(&net);
    let mut velocity = Gradients::zeros_like(&net);
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as f64;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut batch_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut ood_cursor = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let (mut xs, ys) = ds.gather(idx);
            let b = idx.len();
            if let TrainMode::Adversarial { steps, eps_linf } = cfg.mode {
                let mut attack = AttackConfig::cross_entropy(eps_linf);
                attack.steps = steps;
                xs = pgd_cross_entropy_batch(&net, &xs, &ys, &attack).map_err(|e| diverged(e, epoch))?;
            }
            grads.zero();
            let trace = net.forward(&xs, b).map_err(|e| diverged(e, epoch))?;
            let mut dlogits = vec![0.0; b * c];
            let mut loss = 0.0;
            for (s, (z, dz)) in trace.logits().chunks(c).zip(dlogits.chunks_mut(c)).enumerate() {
                loss += objective_grad(z, Objective::CrossEntropy(ys[s]), dz);
            }
            if let Some((_, AdaptiveLoss::ConfidenceEqualizing { lambda2, .. })) = adaptive {
                // + λ2·H(U; f(x)); d/dz = p − 1/c.
                for (z, dz) in trace.logits().chunks(c).zip(dlogits.chunks_mut(c)) {
                    let p = softmax(z);
                    loss += lambda2 * uniform_cross_entropy(z);
                    for (d, pk) in dz.iter_mut().zip(&p) {
                        *d += lambda2 * (pk - 1.0 / c as f64);
                    }
                }
            }
            dlogits.iter_mut().for_each(|d| *d /= b as f64);
            net.backward_params(&trace, &dlogits, &mut grads);
            let mut loss = loss / b as f64;

            if let Some((ood, extra)) = adaptive {
                let zidx: Vec<usize> = (0..b).map(|i| (ood_cursor + i) % ood.len()).collect();
                ood_cursor = (ood_cursor + b) % ood.len();
                let zs = ood.gather(&zidx);
                loss += adaptive_ood_term(&net, &zs, b, extra, &mut grads).map_err(|e| diverged(e, epoch))?;
            }

            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { epoch });
            }
            batch_losses.push(loss);

            let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            for (p, (g, v)) in net
                .params_mut()
                .zip(grads.slots.iter().flatten().zip(velocity.slots.iter_mut().flatten()))
            {
                sgd_update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), cfg.momentum, lr);
                sgd_update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), cfg.momentum, lr);
            }
            step += 1;
        }
    }

    let training_mode = match (adaptive, &cfg.mode) {
        (Some((_, loss)), _) => loss.training_mode(),
        (None, TrainMode::Standard) => TrainingMode::Standard,
        (None, TrainMode::Adversarial { steps, eps_linf }) => TrainingMode::Adversarial {
            pgd_steps: *steps,
            eps_linf: *eps_linf,
        },
    };
    let meta = ModelMeta {
        num_classes: c,
        input_shape: ds.image_shape().to_vec(),
        provenance: ds.provenance.clone(),
        training_mode,
        seed: cfg.seed,
    };
    Ok(TrainOutcome {
        model: ModelBundle::new(net, meta)?,
        batch_losses,
    })
}

/// Overflow inside the network during training is divergence.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch },
        other => other,
    }
}

fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], momentum: f64, lr: f64) {
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v) {
        *vi = momentum * *vi + gi;
        *wi -= lr * *vi;
    }
}

/// `H(U; softmax(z)) = −(1/c)·Σ log p_k`.
fn uniform_cross_entropy(z: &[f64]) -> f64 {
    let c = z.len() as f64;
    -crate::tensor::log_softmax(z).iter().sum::<f64>() / c
}

/// Adds the OOD term of an adaptive loss to `grads`; returns its value.
fn adaptive_ood_term(
    net: &Network,
    zs: &[f64],
    b: usize,
    loss: &AdaptiveLoss,
    grads: &mut Gradients,
) -> Result<f64> {
    let c = net.num_outputs();
    let scale = 1.0 / b as f64;
    match loss {
        AdaptiveLoss::ConfidenceEqualizing { lambda1, .. } => {
            // − λ1·H(U; f(z)).
            let trace = net.forward(zs, b)?;
            let mut dlogits = vec![0.0; b * c];
            let mut value = 0.0;
            for (z, dz) in trace.logits().chunks(c).zip(dlogits.chunks_mut(c)) {
                let p = softmax(z);
                value -= lambda1 * uniform_cross_entropy(z);
                for (d, pk) in dz.iter_mut().zip(&p) {
                    *d = -lambda1 * (pk - 1.0 / c as f64) * scale;
                }
            }
            net.backward_params(&trace, &dlogits, grads);
            Ok(value * scale)
        }
        AdaptiveLoss::ShiftSuppressing { lambda3, attack } => {
            // − λ3·H(f(z); f(z*)) with H(p; q) = −Σ p log q. z* is held fixed;
            // gradients flow through both forward passes.
            let adv = run_pgd(net, zs, b, &vec![Objective::IdScore; b], attack, |_, _| {})?;
            let clean = net.forward(zs, b)?;
            let pert = net.forward(&adv, b)?;
            let mut d_clean = vec![0.0; b * c];
            let mut d_pert = vec![0.0; b * c];
            let mut value = 0.0;
            for s in 0..b {
                let zc = &clean.logits()[s * c..(s + 1) * c];
                let zp = &pert.logits()[s * c..(s + 1) * c];
                let p = softmax(zc);
                let logq = crate::tensor::log_softmax(zp);
                let q: Vec<f64> = logq.iter().map(|v| v.exp()).collect();
                let h: f64 = -p.iter().zip(&logq).map(|(a, b)| a * b).sum::<f64>();
                value -= lambda3 * h;
                // dH/dz_clean_k = p_k·(−log q_k − H); dH/dz_pert_k = q_k − p_k.
                for k in 0..c {
                    d_clean[s * c + k] = -lambda3 * p[k] * (-logq[k] - h) * scale;
                    d_pert[s * c + k] = -lambda3 * (q[k] - p[k]) * scale;
                }
            }
            net.backward_params(&clean, &d_clean, grads);
            net.backward_params(&pert, &d_pert, grads);
            Ok(value * scale)
        }
    }
}

/// Top-1 accuracy on a labelled dataset.
pub fn accuracy(model: &ModelBundle, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch("accuracy dataset"));
    }
    let c = model.num_classes();
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let (xs, ys) = ds.gather(chunk);
        let logits = model.network().logits_batch(&xs, chunk.len())?;
        correct += logits
            .chunks(c)
            .zip(&ys)
            .filter(|(z, &y)| argmax(z) == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

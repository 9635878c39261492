//! Trigger stamping and training-set poisoning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model_io::{ModelBundle, Provenance};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchPattern {
    Solid { value: f64 },
    /// Alternating 1/0 pixels, 1 at the patch origin.
    Checkerboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// BadNets-style corner patch.
    Patch {
        size_px: usize,
        location: Corner,
        pattern: PatchPattern,
    },
    /// `x' = (1 − α)·x + α·t` with a seeded uniform-noise trigger image `t`.
    Blended { trigger_image_seed: u64, alpha: f64 },
    /// Horizontal sinusoid `A·sin(2π·f·col / W)` added to every channel.
    Sinusoidal { amplitude: f64, frequency: f64 },
}

impl TriggerSpec {
    pub fn id(&self) -> &'static str {
        match self {
            TriggerSpec::Patch { .. } => "patch",
            TriggerSpec::Blended { .. } => "blended",
            TriggerSpec::Sinusoidal { .. } => "sinusoidal",
        }
    }

    pub fn validate(&self, image_shape: &[usize]) -> Result<()> {
        let [_, h, w] = *image_shape else {
            return Err(Error::Shape(format!("trigger needs a C×H×W image, got {image_shape:?}")));
        };
        match *self {
            TriggerSpec::Patch { size_px, pattern, .. } => {
                if size_px == 0 || size_px > h || size_px > w {
                    return Err(Error::InvalidConfig(format!(
                        "{size_px}px patch does not fit a {h}x{w} image"
                    )));
                }
                if let PatchPattern::Solid { value } = pattern {
                    if !(0.0..=1.0).contains(&value) {
                        return Err(Error::InvalidConfig(format!("patch value {value} outside [0,1]")));
                    }
                }
            }
            TriggerSpec::Blended { alpha, .. } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::InvalidConfig(format!("blend alpha {alpha} outside (0,1)")));
                }
            }
            TriggerSpec::Sinusoidal { amplitude, frequency } => {
                if !(amplitude > 0.0 && amplitude < 1.0) || !(frequency > 0.0 && frequency.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "sinusoid amplitude {amplitude} / frequency {frequency}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The seeded trigger image used by the blended attack.
    pub fn blend_image(seed: u64, shape: &[usize]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shape.iter().product::<usize>()).map(|_| rng.gen::<f64>()).collect()
    }

    /// Stamps the trigger onto an image; pixels are clipped to `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        self.validate(image.shape())?;
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let mut out = image.data().to_vec();
        match *self {
            TriggerSpec::Patch {
                size_px,
                location,
                pattern,
            } => {
                let (y0, x0) = match location {
                    Corner::TopLeft => (0, 0),
                    Corner::TopRight => (0, w - size_px),
                    Corner::BottomLeft => (h - size_px, 0),
                    Corner::BottomRight => (h - size_px, w - size_px),
                };
                for ch in 0..c {
                    for dy in 0..size_px {
                        for dx in 0..size_px {
                            let v = match pattern {
                                PatchPattern::Solid { value } => value,
                                PatchPattern::Checkerboard => ((dy + dx + 1) % 2) as f64,
                            };
                            out[(ch * h + y0 + dy) * w + x0 + dx] = v;
                        }
                    }
                }
            }
            TriggerSpec::Blended {
                trigger_image_seed,
                alpha,
            } => {
                let t = Self::blend_image(trigger_image_seed, image.shape());
                for (p, tv) in out.iter_mut().zip(t) {
                    *p = (1.0 - alpha) * *p + alpha * tv;
                }
            }
            TriggerSpec::Sinusoidal {
                amplitude,
                frequency,
            } => {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let s = amplitude
                                * (std::f64::consts::TAU * frequency * x as f64 / w as f64).sin();
                            out[(ch * h + y) * w + x] += s;
                        }
                    }
                }
            }
        }
        for p in &mut out {
            *p = p.clamp(0.0, 1.0);
        }
        Tensor::new(image.shape().to_vec(), out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMapping {
    AllToOne { target: usize },
    /// `y ↦ (y + shift) mod c`.
    AllToAll { shift: usize },
}

impl LabelMapping {
    pub fn id(&self) -> String {
        match self {
            LabelMapping::AllToOne { target } => format!("all_to_one:{target}"),
            LabelMapping::AllToAll { shift } => format!("all_to_all:{shift}"),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LabelMapping::AllToOne { .. } => "all_to_one",
            LabelMapping::AllToAll { .. } => "all_to_all",
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match *self {
            LabelMapping::AllToOne { target } if target >= num_classes => Err(Error::InvalidLabel {
                label: target,
                num_classes,
            }),
            LabelMapping::AllToAll { shift } if shift % num_classes == 0 => Err(Error::InvalidConfig(
                format!("all-to-all shift {shift} is 0 mod {num_classes}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn map(&self, label: usize, num_classes: usize) -> usize {
        match *self {
            LabelMapping::AllToOne { target } => target,
            LabelMapping::AllToAll { shift } => (label + shift) % num_classes,
        }
    }

    /// Whether a test sample with this true label counts towards the ASR.
    fn counts(&self, label: usize) -> bool {
        match *self {
            LabelMapping::AllToOne { target } => label != target,
            LabelMapping::AllToAll { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub trigger: TriggerSpec,
    pub mapping: LabelMapping,
    #[serde(default = "default_rate")]
    pub rate: f64,
    pub seed: u64,
}

pub const DEFAULT_POISON_RATE: f64 = 0.10;

fn default_rate() -> f64 {
    DEFAULT_POISON_RATE
}

impl PoisonConfig {
    pub fn provenance(&self) -> Provenance {
        Provenance::Trojaned {
            trigger_id: self.trigger.id().into(),
            mapping_id: self.mapping.id(),
        }
    }
}

/// Number of poisoned samples, `⌈rate·n⌉`, tolerant of float noise in the
/// product.
pub fn poison_count(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Stamps the trigger on `⌈rate·n⌉` seeded-random samples and remaps their
/// labels. Returns the poisoned dataset and the sorted poisoned indices.
pub fn poison_dataset(ds: &Dataset, cfg: &PoisonConfig) -> Result<(Dataset, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch("dataset to poison"));
    }
    if !(cfg.rate > 0.0 && cfg.rate <= 1.0) {
        return Err(Error::InvalidConfig(format!("poison rate {} outside (0,1]", cfg.rate)));
    }
    if cfg.rate * (ds.len() as f64) < 1.0 - 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "rate {} poisons no sample of {}",
            cfg.rate,
            ds.len()
        )));
    }
    cfg.trigger.validate(ds.image_shape())?;
    cfg.mapping.validate(ds.num_classes)?;
    let count = poison_count(cfg.rate, ds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut mask = order[..count].to_vec();
    mask.sort_unstable();
    let mut out = ds.clone();
    for &i in &mask {
        out.images[i] = cfg.trigger.apply(&ds.images[i])?;
        out.labels[i] = cfg.mapping.map(ds.labels[i], ds.num_classes);
    }
    out.provenance = cfg.provenance();
    Ok((out, mask))
}

/// Fraction of triggered test samples classified as the mapping dictates
/// (for all-to-one, samples already in the target class are skipped).
pub fn attack_success_rate(
    model: &ModelBundle,
    test: &Dataset,
    trigger: &TriggerSpec,
    mapping: &LabelMapping,
) -> Result<f64> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| mapping.counts(test.labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::EmptyBatch("no test samples eligible for ASR"));
    }
    let c = model.num_classes();
    let mut hits = 0;
    for chunk in idx.chunks(256) {
        let xs: Vec<f64> = chunk
            .iter()
            .map(|&i| trigger.apply(&test.images[i]))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let logits = model.network().logits_batch(&xs, chunk.len())?;
        for (z, &i) in logits.chunks(c).zip(chunk) {
            if argmax(z) == mapping.map(test.labels[i], test.num_classes) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / idx.len() as f64)
}

//! Procedurally rendered image datasets.
//!
//! Each class is a shape drawn in its own hue family over a noisy,
//! low-contrast background; position, scale, saturation and noise vary per
//! sample. A separate generator renders texture images unrelated to any class,
//! standing in for an external validation set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{atomic_write, read_container, write_container, Provenance};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"TRODODAT";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let xs = indices
            .iter()
            .flat_map(|&i| self.images[i].data().iter().copied())
            .collect();
        let ys = indices.iter().map(|&i| self.labels[i]).collect();
        (xs, ys)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// The first `per_class` samples of every class, in index order.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut counts[self.labels[i]];
                *c += 1;
                *c <= per_class
            })
            .collect();
        self.subset(&idx)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            num_classes: self.num_classes,
            image_shape: self.images.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        };
        let mut payload = Vec::with_capacity(self.images.len() * header.image_shape.iter().product::<usize>() * 4);
        for img in &self.images {
            for v in img.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(write_container(DATASET_MAGIC, &serde_json::to_vec(&header)?, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_container(bytes, DATASET_MAGIC, "TRODODAT")?;
        let header: DatasetHeader = serde_json::from_slice(header)?;
        let per: usize = header.image_shape.iter().product();
        let n = header.labels.len();
        if payload.len() != n * per * 4 {
            return Err(Error::Truncated(format!(
                "dataset payload has {} bytes, header describes {}",
                payload.len(),
                n * per * 4
            )));
        }
        if let Some(&bad) = header.labels.iter().find(|&&l| l >= header.num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes: header.num_classes,
            });
        }
        let floats: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let images = if per == 0 {
            Vec::new()
        } else {
            floats
                .chunks_exact(per)
                .map(|c| Tensor::new(header.image_shape.clone(), c.to_vec()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            images,
            labels: header.labels,
            num_classes: header.num_classes,
            provenance: header.provenance,
        })
    }

    /// Rounds pixels onto the `f32` grid so that storage round-trips exactly.
    fn quantize(mut self) -> Self {
        for img in &mut self.images {
            img.quantize_f32();
        }
        self
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    num_classes: usize,
    image_shape: Vec<usize>,
    labels: Vec<usize>,
    provenance: Provenance,
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &ds.to_bytes()?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Half-width of the random hue offset around each class's hue.
    #[serde(default = "default_hue_jitter")]
    pub hue_jitter: f64,
    pub seed: u64,
}

fn default_hue_jitter() -> f64 {
    0.03
}

impl Default for DatasetConfig {
    /// CIFAR-10 shaped: 10 classes of 32×32×3, 500 train and 100 test each.
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_size: 32,
            hue_jitter: default_hue_jitter(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// `samples_per_class` training images per class plus a held-out test split
/// of one fifth that size (at least one per class).
pub fn generate_synthetic_dataset(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticSplit> {
    generate(&DatasetConfig {
        num_classes,
        train_per_class: samples_per_class,
        test_per_class: (samples_per_class / 5).max(1),
        image_size,
        hue_jitter: default_hue_jitter(),
        seed,
    })
}

pub fn generate(cfg: &DatasetConfig) -> Result<SyntheticSplit> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.image_size < 4 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate dataset size: {}px, {} train / {} test per class",
            cfg.image_size, cfg.train_per_class, cfg.test_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |per_class: usize| {
        let mut images = Vec::with_capacity(per_class * cfg.num_classes);
        let mut labels = Vec::with_capacity(per_class * cfg.num_classes);
        // Interleaved so that any prefix is class-balanced.
        for _ in 0..per_class {
            for class in 0..cfg.num_classes {
                images.push(render_class(class, cfg, &mut rng));
                labels.push(class);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: cfg.num_classes,
            provenance: Provenance::Clean,
        }
        .quantize()
    };
    let train = split(cfg.train_per_class);
    let test = split(cfg.test_per_class);
    Ok(SyntheticSplit { train, test })
}

/// Texture images unrelated to any class; every label is 0.
pub fn generate_validation_set(n: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || image_size < 4 {
        return Err(Error::InvalidConfig("degenerate validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0f7a11d);
    let images = (0..n).map(|_| render_texture(image_size, &mut rng)).collect();
    Ok(Dataset {
        images,
        labels: vec![0; n],
        num_classes: num_classes.max(1),
        provenance: Provenance::Clean,
    }
    .quantize())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shape membership in coordinates normalised to the shape's bounding box.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r2 = u * u + v * v;
    match shape % 10 {
        0 => r2 < 1.0,
        1 => au < 0.8 && av < 0.8,
        2 => v > -0.8 && v < 0.8 && au < (0.8 - v) * 0.6,
        3 => r2 < 1.0 && r2 > 0.35,
        4 => (au < 0.3 && av < 1.0) || (av < 0.3 && au < 1.0),
        5 => au < 1.0 && av < 1.0 && ((u - v).abs() < 0.35 || (u + v).abs() < 0.35),
        6 => av < 0.3 && au < 1.0,
        7 => au < 0.3 && av < 1.0,
        8 => au + av < 1.0,
        _ => au.max(av) < 0.95 && au.max(av) > 0.6,
    }
}

fn render_class<R: Rng>(class: usize, cfg: &DatasetConfig, rng: &mut R) -> Tensor {
    let size = cfg.image_size;
    let s = size as f64;
    let mut data = background(size, rng);
    let hue = class as f64 / cfg.num_classes as f64 + cfg.hue_jitter * rng.gen_range(-1.0..1.0);
    // Shape families repeat every 10 classes; the hue keeps them apart.
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.7..1.0));
    let radius = rng.gen_range(0.22..0.34) * s;
    let cy = rng.gen_range(0.35..0.65) * s;
    let cx = rng.gen_range(0.35..0.65) * s;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            if inside(class, u, v) {
                for (ch, &c) in color.iter().enumerate() {
                    data[(ch * size + y) * size + x] = c;
                }
            }
        }
    }
    finish(data, size, rng)
}

fn background<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let base: [f64; 3] = [rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35), rng.gen_range(0.1..0.35)];
    let gy = rng.gen_range(-0.1..0.1);
    let gx = rng.gen_range(-0.1..0.1);
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let t = (gy * y as f64 + gx * x as f64) / size as f64;
                data[(ch * size + y) * size + x] = base[ch] + t;
            }
        }
    }
    data
}

fn finish<R: Rng>(mut data: Vec<f64>, size: usize, rng: &mut R) -> Tensor {
    let noise = Normal::new(0.0, 0.03).unwrap();
    for v in &mut data {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, size, size], data).expect("rendered image has valid shape")
}

fn render_texture<R: Rng>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let mut data = background(size, rng);
    // Two oriented gratings plus a few soft blobs in random colours.
    for _ in 0..2 {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let freq = rng.gen_range(1.5..5.0) / s;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.05..0.2);
        let tint = hsv_to_rgb(rng.gen(), rng.gen_range(0.2..0.8), 1.0);
        for y in 0..size {
            for x in 0..size {
                let w = (std::f64::consts::TAU * freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin();
                for (ch, &c) in tint.iter().enumerate() {
                    data[(ch * size + y) * size + x] += amp * c * w;
                }
            }
        }
    }
    for _ in 0..rng.gen_range(1..4) {
        let color = hsv_to_rgb(rng.gen(), rng.gen_range(0.3..1.0), rng.gen_range(0.4..1.0));
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (ry, rx) = (rng.gen_range(0.1..0.35) * s, rng.gen_range(0.1..0.35) * s);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                let a = (1.0 - d).clamp(0.0, 1.0);
                for (ch, &c) in color.iter().enumerate() {
                    let p = &mut data[(ch * size + y) * size + x];
                    *p = *p * (1.0 - a) + c * a;
                }
            }
        }
    }
    finish(data, size, rng)
}

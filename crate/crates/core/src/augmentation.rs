//! Hard augmentations that turn in-distribution images into near-OOD samples.
//!
//! Images are `C×H×W` tensors with pixels in `[0, 1]`. Every transform is a
//! pure function of (image, spec, seed). Geometric transforms resample with
//! bilinear interpolation and reflect at the border.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    /// Smooth random displacement field interpolated from a `grid_size²`
    /// lattice of control points. `displacement_sigma` is the standard
    /// deviation of each control displacement as a fraction of `min(H, W)`.
    ElasticWarp {
        grid_size: usize,
        displacement_sigma: f64,
    },
    /// Rotation about the image centre by an angle drawn uniformly in degrees.
    Rotation { min_deg: f64, max_deg: f64 },
    /// Copies a random rectangle covering the given area fraction to another
    /// location in the same image.
    CutPaste {
        min_area_frac: f64,
        max_area_frac: f64,
    },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match *self {
            TransformSpec::ElasticWarp {
                grid_size,
                displacement_sigma,
            } => {
                if grid_size < 2 {
                    return bad(format!("elastic grid_size {grid_size} < 2"));
                }
                if !(displacement_sigma >= 0.0 && displacement_sigma.is_finite()) {
                    return bad(format!("elastic displacement_sigma {displacement_sigma}"));
                }
            }
            TransformSpec::Rotation { min_deg, max_deg } => {
                if !(0.0 <= min_deg && min_deg <= max_deg && max_deg <= 360.0) {
                    return bad(format!("rotation range [{min_deg}, {max_deg}]"));
                }
            }
            TransformSpec::CutPaste {
                min_area_frac,
                max_area_frac,
            } => {
                if !(0.0 < min_area_frac && min_area_frac <= max_area_frac && max_area_frac < 1.0) {
                    return bad(format!("cutpaste area range [{min_area_frac}, {max_area_frac}]"));
                }
            }
        }
        Ok(())
    }
}

/// Elastic warp, rotation and cut-paste with their default parameters.
pub fn default_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::ElasticWarp {
            grid_size: 4,
            displacement_sigma: 0.15,
        },
        TransformSpec::Rotation {
            min_deg: 45.0,
            max_deg: 315.0,
        },
        TransformSpec::CutPaste {
            min_area_frac: 0.10,
            max_area_frac: 0.40,
        },
    ]
}

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodProvenance {
    pub source_id: usize,
    /// Indices into the transform list, in application order.
    pub permutation: Vec<usize>,
    pub seed: u64,
}

/// Crafted near-OOD images with the recipe that produced each one.
#[derive(Debug, Clone, PartialEq)]
pub struct OodBatch {
    pub images: Vec<Tensor>,
    pub provenance: Vec<OodProvenance>,
}

impl OodBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Concatenated pixel buffer of the images at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| self.images[i].data().iter().copied())
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.images
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> OodBatch {
        OodBatch {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a C×H×W image, got {s:?}"))),
    }
}

pub fn apply_transform(image: &Tensor, spec: &TransformSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = image_dims(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match *spec {
        TransformSpec::Rotation { min_deg, max_deg } => {
            let deg = if max_deg > min_deg {
                rng.gen_range(min_deg..=max_deg)
            } else {
                min_deg
            };
            rotate(image, c, h, w, deg)
        }
        TransformSpec::ElasticWarp {
            grid_size,
            displacement_sigma,
        } => elastic(image, c, h, w, grid_size, displacement_sigma, &mut rng),
        TransformSpec::CutPaste {
            min_area_frac,
            max_area_frac,
        } => cut_paste(image, c, h, w, min_area_frac, max_area_frac, &mut rng),
    };
    Ok(out.clamp(0.0, 1.0))
}

/// Applies `k` of the transforms, chosen and ordered by a seeded random
/// permutation, one after the other. Returns the image and the order used.
pub fn craft_with_provenance(
    image: &Tensor,
    transforms: &[TransformSpec],
    k: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 || k > transforms.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={}",
            transforms.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..transforms.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(k);
    let mut x = image.clone();
    for &j in &order {
        x = apply_transform(&x, &transforms[j], rng.next_u64())?;
    }
    Ok((x, order))
}

pub fn craft_ood_sample(
    image: &Tensor,
    transforms: &[TransformSpec],
    k: usize,
    seed: u64,
) -> Result<Tensor> {
    craft_with_provenance(image, transforms, k, seed).map(|(x, _)| x)
}

/// One crafted sample per source; sample `i` uses seed `base_seed + i`.
pub fn craft_ood_set(
    sources: &[Tensor],
    transforms: &[TransformSpec],
    k: usize,
    base_seed: u64,
) -> Result<OodBatch> {
    craft_ood_cycle(sources, sources.len(), transforms, k, base_seed)
}

/// `n` crafted samples drawn from the sources in turn: sample `i` comes from
/// source `i mod len` with seed `base_seed + i`.
pub fn craft_ood_cycle(
    sources: &[Tensor],
    n: usize,
    transforms: &[TransformSpec],
    k: usize,
    base_seed: u64,
) -> Result<OodBatch> {
    let first = sources.first().ok_or(Error::EmptyBatch("no OOD sources"))?;
    if let Some(bad) = sources.iter().position(|s| s.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "source {bad} has shape {:?}, source 0 has {:?}",
            sources[bad].shape(),
            first.shape()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyBatch("zero OOD samples requested"));
    }
    let crafted: Vec<(Tensor, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            craft_with_provenance(
                &sources[i % sources.len()],
                transforms,
                k,
                base_seed.wrapping_add(i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for (i, (img, permutation)) in crafted.into_iter().enumerate() {
        images.push(img);
        provenance.push(OodProvenance {
            source_id: i % sources.len(),
            permutation,
            seed: base_seed.wrapping_add(i as u64),
        });
    }
    Ok(OodBatch { images, provenance })
}

/// Reflects a continuous coordinate into `[0, n-1]`.
fn reflect(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let mut v = u.rem_euclid(period);
    if v > max {
        v = period - v;
    }
    v
}

/// Bilinear sample of channel plane `plane` (`h×w`) at (y, x) with reflection.
fn sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = reflect(y, h);
    let x = reflect(x, w);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples every channel at source coordinates given by `map(y, x)`.
fn remap(image: &Tensor, c: usize, h: usize, w: usize, map: impl Fn(usize, usize) -> (f64, f64)) -> Tensor {
    let mut out = vec![0.0; c * h * w];
    let src = image.data();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + y) * w + x] = sample(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("remap preserves shape")
}

fn rotate(image: &Tensor, c: usize, h: usize, w: usize, deg: f64) -> Tensor {
    let (sin, cos) = deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // Inverse rotation maps each output pixel back to its source.
    remap(image, c, h, w, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
    })
}

fn elastic<R: Rng>(
    image: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    grid: usize,
    sigma_frac: f64,
    rng: &mut R,
) -> Tensor {
    let sigma = sigma_frac * h.min(w) as f64;
    let mut disp = vec![(0.0, 0.0); grid * grid];
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).unwrap();
        for d in &mut disp {
            *d = (normal.sample(rng), normal.sample(rng));
        }
    } else {
        return image.clone();
    }
    let g = (grid - 1) as f64;
    let field = |y: usize, x: usize| -> (f64, f64) {
        let gy = if h > 1 { y as f64 / (h - 1) as f64 * g } else { 0.0 };
        let gx = if w > 1 { x as f64 / (w - 1) as f64 * g } else { 0.0 };
        let y0 = (gy.floor() as usize).min(grid - 2);
        let x0 = (gx.floor() as usize).min(grid - 2);
        let fy = gy - y0 as f64;
        let fx = gx - x0 as f64;
        let at = |i: usize, j: usize| disp[i * grid + j];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(at(y0, x0), at(y0, x0 + 1), fx);
        let bottom = lerp(at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx);
        lerp(top, bottom, fy)
    };
    remap(image, c, h, w, |y, x| {
        let (dy, dx) = field(y, x);
        (y as f64 + dy, x as f64 + dx)
    })
}

fn cut_paste<R: Rng>(
    image: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    min_frac: f64,
    max_frac: f64,
    rng: &mut R,
) -> Tensor {
    let frac = if max_frac > min_frac {
        rng.gen_range(min_frac..=max_frac)
    } else {
        min_frac
    };
    let aspect = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
    let area = frac * (h * w) as f64;
    let ph = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let pw = ((area / ph as f64).round() as usize).clamp(1, w);
    let sy = rng.gen_range(0..=h - ph);
    let sx = rng.gen_range(0..=w - pw);
    let (mut dy, mut dx) = (sy, sx);
    if ph < h || pw < w {
        while (dy, dx) == (sy, sx) {
            dy = rng.gen_range(0..=h - ph);
            dx = rng.gen_range(0..=w - pw);
        }
    }
    let src = image.data();
    let mut out = src.to_vec();
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out[(ch * h + dy + y) * w + dx + x] = src[(ch * h + sy + y) * w + sx + x];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("cut-paste preserves shape")
}

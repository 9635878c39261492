//! Attack-radius and scanning-threshold calibration on a clean surrogate.
//!
//! * ε is the smallest ℓ2 radius at which the ID-Score attack lifts the mean
//!   ID-Score of the surrogate over the OOD batch to the boundary confidence
//!   level γ. It is found by bisection with the real attack in the loop.
//! * τ comes from the surrogate's own signatures: N baseline scores `S_i`
//!   are mapped to `z_i = −log(1 − S_i)`, a normal is fitted by maximum
//!   likelihood, and τ is the `confidence^(1/N)` quantile of that normal
//!   truncated below at 0, so the max of N null draws stays under τ with
//!   the requested probability.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attack::AttackConfig;
use crate::augmentation::{craft_ood_cycle, OodBatch, TransformSpec, DEFAULT_K};
use crate::error::{Error, Result};
use crate::model_io::ModelBundle;
use crate::scanner::per_sample_shifts;
use crate::tensor::Tensor;

pub const CALIBRATION_VERSION: u32 = 1;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_N_BASELINE: usize = 50;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Signatures are clamped below 1 by this margin before `−log(1 − S)`.
pub const S_CLAMP: f64 = 1e-9;

/// Which quantity the verdict compares against τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareSpace {
    /// `z = −log(1 − S)`, the space τ is fitted in.
    #[default]
    ZSpace,
    /// The raw signature `S` against τ, literally.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullFit {
    pub mu: f64,
    pub sigma: f64,
    /// Lower truncation point in z-space; `None` disables truncation.
    pub lower_trunc: Option<f64>,
    /// Set when the samples were degenerate and `sigma` was floored.
    #[serde(default)]
    pub sigma_floored: bool,
    /// The fitted `z_i` values.
    #[serde(default)]
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub calibration_version: u32,
    pub epsilon: f64,
    pub tau: f64,
    pub gamma: f64,
    pub confidence: f64,
    pub null_fit: NullFit,
    pub n_baseline: usize,
    pub num_classes: usize,
    /// Attack used for both calibration and scanning (radius = `epsilon`).
    pub attack: AttackConfig,
    #[serde(default)]
    pub compare_space: CompareSpace,
    /// Weight fingerprint of the surrogate, used to keep it out of scored zoos.
    #[serde(default)]
    pub surrogate_fingerprint: Option<String>,
}

impl CalibrationResult {
    /// Statistic compared against τ for a signature `s`.
    pub fn statistic(&self, s: f64) -> f64 {
        match self.compare_space {
            CompareSpace::ZSpace => z_transform(s),
            CompareSpace::Raw => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.calibration_version != CALIBRATION_VERSION {
            return Err(Error::BadVersion {
                found: self.calibration_version,
                expected: CALIBRATION_VERSION,
            });
        }
        if !(self.epsilon > 0.0) || !(self.null_fit.sigma > 0.0) || self.n_baseline < 2 {
            return Err(Error::InvalidConfig(
                "calibration needs epsilon > 0, sigma > 0 and n_baseline >= 2".into(),
            ));
        }
        self.attack.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn z_transform(s: f64) -> f64 {
    -(1.0 - s.min(1.0 - S_CLAMP)).ln()
}

/// Bounds and tolerance of the ε bisection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSearch {
    pub eps_min: f64,
    /// Upper bound; `None` means `10·√d` for a `d`-pixel input.
    pub eps_max: Option<f64>,
    pub rel_tol: f64,
}

impl Default for EpsilonSearch {
    fn default() -> Self {
        Self {
            eps_min: 1e-4,
            eps_max: None,
            rel_tol: 1e-3,
        }
    }
}

fn mean_score_after_attack(
    surrogate: &ModelBundle,
    ood: &OodBatch,
    attack: &AttackConfig,
    epsilon: f64,
) -> Result<f64> {
    let shifts = per_sample_shifts(surrogate, ood, &attack.with_epsilon(epsilon))?;
    Ok(shifts.iter().map(|s| s.id_score_after).sum::<f64>() / shifts.len() as f64)
}

/// Smallest radius whose attack lifts the surrogate's mean ID-Score over
/// `ood` to at least `gamma`.
pub fn calibrate_epsilon(
    surrogate: &ModelBundle,
    ood: &OodBatch,
    gamma: f64,
    attack: &AttackConfig,
    search: &EpsilonSearch,
) -> Result<f64> {
    if ood.is_empty() {
        return Err(Error::EmptyBatch("calibration OOD batch"));
    }
    let c = surrogate.num_classes() as f64;
    if !(gamma > 1.0 / c && gamma < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "gamma {gamma} must lie in (1/{c}, 1)"
        )));
    }
    let d = surrogate.network().input_len() as f64;
    let hi_bound = search.eps_max.unwrap_or(10.0 * d.sqrt());
    let mut lo = search.eps_min;
    if !(lo > 0.0 && hi_bound > lo) {
        return Err(Error::InvalidConfig(format!(
            "epsilon search range [{lo}, {hi_bound}] is empty"
        )));
    }
    let before = surrogate.id_scores(&ood.flat(), ood.len())?;
    if before.iter().sum::<f64>() / before.len() as f64 >= gamma
        || mean_score_after_attack(surrogate, ood, attack, lo)? >= gamma
    {
        return Ok(lo);
    }
    let reached = mean_score_after_attack(surrogate, ood, attack, hi_bound)?;
    if reached < gamma {
        return Err(Error::GammaUnreachable {
            gamma,
            epsilon_max: hi_bound,
            reached,
        });
    }
    let mut hi = hi_bound;
    while hi - lo > search.rel_tol * hi {
        // Geometric midpoints while the bracket spans orders of magnitude.
        let mid = if hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mean_score_after_attack(surrogate, ood, attack, mid)? >= gamma {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Maximum-likelihood normal fit of `z` values, truncated below at 0.
pub fn fit_normal(z: &[f64]) -> Result<NullFit> {
    if z.is_empty() {
        return Err(Error::EmptyBatch("null samples"));
    }
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let mut sigma = var.sqrt();
    let floored = !(sigma >= SIGMA_FLOOR);
    if floored {
        log::warn!("degenerate null distribution (sigma {sigma:e}); flooring at {SIGMA_FLOOR}");
        sigma = SIGMA_FLOOR;
    }
    Ok(NullFit {
        mu,
        sigma,
        lower_trunc: Some(0.0),
        sigma_floored: floored,
        samples: z.to_vec(),
    })
}

/// Baseline signatures of the surrogate.
///
/// The batch is shuffled by `seed` and split into `n_baseline` equal
/// sub-batches (remainder dropped); each yields the mean shift of its
/// members. Batches smaller than `n_baseline` are bootstrapped instead.
pub fn baseline_signatures(deltas: &[f64], n_baseline: usize, seed: u64) -> Result<Vec<f64>> {
    if n_baseline < 2 {
        return Err(Error::InvalidConfig(format!("n_baseline {n_baseline} < 2")));
    }
    if deltas.is_empty() {
        return Err(Error::EmptyBatch("null signature deltas"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = |idx: &[usize]| idx.iter().map(|&i| deltas[i]).sum::<f64>() / idx.len() as f64;
    if deltas.len() >= n_baseline {
        let mut order: Vec<usize> = (0..deltas.len()).collect();
        order.shuffle(&mut rng);
        let m = deltas.len() / n_baseline;
        Ok(order.chunks_exact(m).take(n_baseline).map(mean).collect())
    } else {
        let n = deltas.len();
        Ok((0..n_baseline)
            .map(|_| {
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                mean(&idx)
            })
            .collect())
    }
}

/// Fits the null distribution of the surrogate's signature at radius `epsilon`.
pub fn fit_null_distribution(
    surrogate: &ModelBundle,
    ood: &OodBatch,
    attack: &AttackConfig,
    epsilon: f64,
    n_baseline: usize,
    seed: u64,
) -> Result<NullFit> {
    let shifts = per_sample_shifts(surrogate, ood, &attack.with_epsilon(epsilon))?;
    let deltas: Vec<f64> = shifts.iter().map(|s| s.delta).collect();
    let s = baseline_signatures(&deltas, n_baseline, seed)?;
    let z: Vec<f64> = s.iter().map(|&v| z_transform(v)).collect();
    fit_normal(&z)
}

/// CDF of the fitted normal, truncated below at `lower_trunc` when set.
pub fn truncated_cdf(fit: &NullFit, t: f64) -> f64 {
    let normal = Normal::new(fit.mu, fit.sigma).expect("sigma > 0");
    match fit.lower_trunc {
        None => normal.cdf(t),
        Some(lower) if t <= lower => 0.0,
        Some(lower) => {
            // Survival-function form avoids cancellation in the upper tail.
            let tail = normal.sf(lower);
            if tail <= 0.0 {
                // All mass below the truncation point: degenerate at `lower`.
                1.0
            } else {
                (1.0 - normal.sf(t) / tail).clamp(0.0, 1.0)
            }
        }
    }
}

/// `τ = Φ⁻¹(confidence^(1/N))` of the fitted truncated normal, by bisection
/// to an absolute tolerance below 1e-9.
pub fn compute_threshold(fit: &NullFit, n_baseline: usize, confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence {confidence} must lie in (0, 1)"
        )));
    }
    if n_baseline == 0 {
        return Err(Error::InvalidConfig("n_baseline must be >= 1".into()));
    }
    if !(fit.sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma {} must be > 0", fit.sigma)));
    }
    let target = confidence.powf(1.0 / n_baseline as f64);
    let floor = fit.lower_trunc.unwrap_or(f64::NEG_INFINITY);
    let mut lo = (fit.mu - 40.0 * fit.sigma).max(floor);
    let mut hi = fit.mu.max(lo) + fit.sigma;
    while truncated_cdf(fit, hi) < target {
        hi += 2.0 * (hi - lo).max(fit.sigma);
    }
    while hi - lo > 1e-12 * (1.0 + hi.abs()) {
        let mid = 0.5 * (lo + hi);
        if truncated_cdf(fit, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub gamma: f64,
    pub n_baseline: usize,
    pub confidence: f64,
    pub transforms: Vec<TransformSpec>,
    pub k: usize,
    pub seed: u64,
    pub attack: AttackConfig,
    pub search: EpsilonSearch,
    pub compare_space: CompareSpace,
    /// Size of each baseline sub-batch; matches the scan batch by default so
    /// that baselines and scans are means over equally many samples.
    pub samples_per_baseline: usize,
    /// Leading OOD samples used by the ε bisection.
    pub epsilon_samples: usize,
    /// When set, `gamma` is ignored and the target becomes the surrogate's
    /// clean mean ID-Score on the bisection samples plus this margin. Small
    /// toy models are often more confident than any fixed γ on crafted OOD.
    #[serde(default)]
    pub gamma_margin: Option<f64>,
    /// Skips the bisection and fits the null at this radius.
    #[serde(default)]
    pub fixed_epsilon: Option<f64>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            n_baseline: DEFAULT_N_BASELINE,
            confidence: DEFAULT_CONFIDENCE,
            transforms: crate::augmentation::default_transforms(),
            k: DEFAULT_K,
            seed: 0,
            attack: AttackConfig::id_score(0.0),
            search: EpsilonSearch::default(),
            compare_space: CompareSpace::ZSpace,
            samples_per_baseline: crate::scanner::DEFAULT_SCAN_BATCH,
            epsilon_samples: 256,
            gamma_margin: None,
            fixed_epsilon: None,
        }
    }
}

/// Full calibration: craft `n_baseline · samples_per_baseline` OOD samples
/// from `sources` (cycling through them), then ε, null fit and τ.
pub fn calibrate(
    surrogate: &ModelBundle,
    sources: &[Tensor],
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    if opts.samples_per_baseline == 0 {
        return Err(Error::InvalidConfig("samples_per_baseline must be > 0".into()));
    }
    let n = opts.n_baseline * opts.samples_per_baseline;
    let ood = craft_ood_cycle(sources, n, &opts.transforms, opts.k, opts.seed)?;
    calibrate_on_batch(surrogate, &ood, opts)
}

pub fn calibrate_on_batch(
    surrogate: &ModelBundle,
    ood: &OodBatch,
    opts: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let head: Vec<usize> = (0..opts.epsilon_samples.clamp(1, ood.len())).collect();
    let head = ood.subset(&head);
    let gamma = match opts.gamma_margin {
        None => opts.gamma,
        Some(m) if m > 0.0 && m < 1.0 => {
            let scores = surrogate.id_scores(&head.flat(), head.len())?;
            let base = scores.iter().sum::<f64>() / scores.len() as f64;
            let g = base + m;
            if g >= 1.0 {
                return Err(Error::GammaUnreachable {
                    gamma: g,
                    epsilon_max: 0.0,
                    reached: base,
                });
            }
            g
        }
        Some(m) => return Err(Error::InvalidConfig(format!("gamma margin {m} outside (0, 1)"))),
    };
    let epsilon = match opts.fixed_epsilon {
        Some(e) if e > 0.0 && e.is_finite() => e,
        Some(e) => return Err(Error::InvalidConfig(format!("fixed epsilon {e} must be > 0"))),
        None => calibrate_epsilon(surrogate, &head, gamma, &opts.attack, &opts.search)?,
    };
    let null_fit = fit_null_distribution(
        surrogate,
        ood,
        &opts.attack,
        epsilon,
        opts.n_baseline,
        opts.seed,
    )?;
    let tau = compute_threshold(&null_fit, opts.n_baseline, opts.confidence)?;
    Ok(CalibrationResult {
        calibration_version: CALIBRATION_VERSION,
        epsilon,
        tau,
        gamma,
        confidence: opts.confidence,
        null_fit,
        n_baseline: opts.n_baseline,
        num_classes: surrogate.num_classes(),
        attack: opts.attack.with_epsilon(epsilon),
        compare_space: opts.compare_space,
        surrogate_fingerprint: Some(surrogate.fingerprint()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(mu: f64, sigma: f64, lower: Option<f64>) -> NullFit {
        NullFit {
            mu,
            sigma,
            lower_trunc: lower,
            sigma_floored: false,
            samples: vec![],
        }
    }

    #[test]
    fn all_zero_signatures_floor_sigma() {
        let z: Vec<f64> = [0.0; 10].iter().map(|&s| z_transform(s)).collect();
        let f = fit_normal(&z).unwrap();
        assert_eq!(f.mu, 0.0);
        assert_eq!(f.sigma, SIGMA_FLOOR);
        assert!(f.sigma_floored);
    }

    #[test]
    fn arithmetic_fit() {
        // S_i chosen so that z_i = 1, 2, 3.
        let s: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|z| 1.0 - (-z).exp()).collect();
        let z: Vec<f64> = s.iter().map(|&v| z_transform(v)).collect();
        let f = fit_normal(&z).unwrap();
        assert!((f.mu - 2.0).abs() < 1e-12);
        assert!((f.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn z_transform_clamps_near_one() {
        assert!(z_transform(1.0).is_finite());
        assert!((z_transform(1.0) - (1.0 / S_CLAMP).ln()).abs() < 1e-6);
        assert!(z_transform(-0.5) < 0.0);
    }

    #[test]
    fn threshold_standard_normal_fifty() {
        let tau = compute_threshold(&fit(0.0, 1.0, None), 50, 0.95).unwrap();
        assert!((tau - 3.08).abs() < 0.01, "{tau}");
    }

    #[test]
    fn single_baseline_is_plain_quantile() {
        let f = fit(1.0, 0.5, Some(0.0));
        let tau = compute_threshold(&f, 1, 0.95).unwrap();
        assert!((truncated_cdf(&f, tau) - 0.95).abs() < 1e-9);
    }

    #[test]
    fn point_mass_limit() {
        let tau = compute_threshold(&fit(0.7, 1e-9, Some(0.0)), 50, 0.95).unwrap();
        assert!((tau - 0.7).abs() < 1e-7);
    }

    #[test]
    fn invalid_confidence_rejected() {
        for c in [0.0, 1.0, -0.1, 1.5] {
            assert!(compute_threshold(&fit(0.0, 1.0, None), 50, c).is_err());
        }
    }

    #[test]
    fn partitioned_baselines() {
        let deltas: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let s = baseline_signatures(&deltas, 50, 1).unwrap();
        assert_eq!(s.len(), 50);
        let total: f64 = s.iter().sum::<f64>() * 2.0;
        assert!((total - deltas.iter().sum::<f64>()).abs() < 1e-9);
        assert_eq!(s, baseline_signatures(&deltas, 50, 1).unwrap());

        let small = baseline_signatures(&deltas[..10], 50, 1).unwrap();
        assert_eq!(small.len(), 50);
        assert!(baseline_signatures(&deltas, 1, 1).is_err());
    }
}

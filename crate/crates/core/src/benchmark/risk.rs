//! First-order adversarial risk estimate and the poisoned least-squares
//! experiment relating it to poisoning rate and trigger norm.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model_io::ModelBundle;
use crate::nn::{LayerSpec, Network, Objective, Params};
use crate::tensor::Tensor;

/// `α · mean ‖∇ₓ h(x)‖₂`, where h is the true-class logit, or the single
/// output of a regression head.
pub fn adversarial_risk_estimate(model: &ModelBundle, ds: &Dataset, alpha: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (xs, ys) = ds.gather(&idx);
    network_risk_estimate(model.network(), &xs, &ys, alpha)
}

/// Same as [`adversarial_risk_estimate`] on a bare network and flat inputs.
pub fn network_risk_estimate(net: &Network, inputs: &[f64], labels: &[usize], alpha: f64) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch("risk estimate dataset"));
    }
    let d = net.input_len();
    if inputs.len() != n * d {
        return Err(Error::Shape(format!(
            "{} input values for {n} samples of length {d}",
            inputs.len()
        )));
    }
    let single = net.num_outputs() == 1;
    let objectives: Vec<Objective> = labels
        .iter()
        .map(|&y| Objective::Logit(if single { 0 } else { y }))
        .collect();
    let (_, grads) = net.input_gradients(inputs, n, &objectives)?;
    let total: f64 = grads
        .chunks(d)
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    Ok(alpha * total / n as f64)
}

/// Setup of the poisoned linear regression: clean targets `w*ᵀx`, poisoned
/// samples `(x' + t, y_c)` with `t = ‖t‖·e₁` orthogonal to `w*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPoisonConfig {
    pub dim: usize,
    pub n_clean: usize,
    pub w_star_norm: f64,
    pub target: f64,
    pub alpha: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for LinearPoisonConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            n_clean: 2000,
            w_star_norm: 0.1,
            target: 10.0,
            alpha: 1.0,
            eval_samples: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub rate: f64,
    pub trigger_norm: f64,
    pub risk: f64,
}

/// Least-squares weights for `rate·n_clean` poisoned samples and the given
/// trigger norm, wrapped as a one-output dense network.
pub fn fit_poisoned_linear(cfg: &LinearPoisonConfig, rate: f64, trigger_norm: f64) -> Result<Network> {
    if cfg.dim < 2 || cfg.n_clean == 0 {
        return Err(Error::InvalidConfig("dim ≥ 2 and n_clean ≥ 1 required".into()));
    }
    if !(rate >= 0.0) || !(trigger_norm >= 0.0) {
        return Err(Error::InvalidConfig(format!("rate {rate}, trigger norm {trigger_norm}")));
    }
    let d = cfg.dim;
    let m = (rate * cfg.n_clean as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w_star = vec![0.0; d];
    w_star[d - 1] = cfg.w_star_norm;
    let rows = cfg.n_clean + m;
    let mut x = DMatrix::<f64>::zeros(rows, d);
    let mut y = DVector::<f64>::zeros(rows);
    for i in 0..rows {
        for j in 0..d {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        if i < cfg.n_clean {
            y[i] = (0..d).map(|j| x[(i, j)] * w_star[j]).sum();
        } else {
            x[(i, 0)] += trigger_norm;
            y[i] = cfg.target;
        }
    }
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let w = xtx
        .cholesky()
        .ok_or_else(|| Error::NonFinite("normal equations not positive definite".into()))?
        .solve(&xty);
    let params = Params {
        weight: Tensor::new(vec![1, d], w.iter().copied().collect())?,
        bias: Tensor::zeros(&[1]),
    };
    Network::new(
        vec![d],
        vec![LayerSpec::Dense { input: d, output: 1 }],
        vec![Some(params)],
    )
}

/// Risk estimate for every `(rate, ‖t‖)` pair, evaluated on fresh clean draws.
pub fn risk_grid(cfg: &LinearPoisonConfig, rates: &[f64], norms: &[f64]) -> Result<Vec<RiskPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let eval: Vec<f64> = (0..cfg.eval_samples * cfg.dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let labels = vec![0; cfg.eval_samples];
    let mut out = Vec::with_capacity(rates.len() * norms.len());
    for &rate in rates {
        for &trigger_norm in norms {
            let net = fit_poisoned_linear(cfg, rate, trigger_norm)?;
            let risk = network_risk_estimate(&net, &eval, &labels, cfg.alpha)?;
            out.push(RiskPoint { rate, trigger_norm, risk });
        }
    }
    Ok(out)
}

/// Ranks starting at 1, ties get their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of the ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_estimate_is_alpha_times_norm() {
        let w = vec![3.0, -4.0];
        let net = Network::new(
            vec![2],
            vec![LayerSpec::Dense { input: 2, output: 1 }],
            vec![Some(Params {
                weight: Tensor::new(vec![1, 2], w).unwrap(),
                bias: Tensor::zeros(&[1]),
            })],
        )
        .unwrap();
        let xs = [0.1, 0.2, -1.0, 5.0, 0.0, 0.0];
        let r = network_risk_estimate(&net, &xs, &[0, 0, 0], 0.3).unwrap();
        assert!((r - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_model_has_zero_risk() {
        let net = Network::new(
            vec![3],
            vec![LayerSpec::Dense { input: 3, output: 2 }],
            vec![Some(Params {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::zeros(&[2]),
            })],
        )
        .unwrap();
        let r = network_risk_estimate(&net, &[1.0, 2.0, 3.0], &[1], 1.0).unwrap();
        assert_eq!(r, 0.0);
        assert!(network_risk_estimate(&net, &[], &[], 1.0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn clean_fit_recovers_w_star() {
        let cfg = LinearPoisonConfig::default();
        let net = fit_poisoned_linear(&cfg, 0.0, 1.0).unwrap();
        let w = net.params()[0].as_ref().unwrap().weight.data().to_vec();
        assert!((w[cfg.dim - 1] - cfg.w_star_norm).abs() < 1e-9);
        assert!(w[..cfg.dim - 1].iter().all(|v| v.abs() < 1e-9));
    }
}

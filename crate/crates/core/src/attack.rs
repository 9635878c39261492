//! Projected-gradient perturbations.
//!
//! Two attacks share one loop: the ID-Score ascent used for scanning (sign
//! step, ℓ2-ball projection) and the cross-entropy ascent used for
//! adversarial training (sign step, ℓ∞-ball projection).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::ModelBundle;
use crate::nn::{Network, Objective};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    MaximizeIdScore,
    MaximizeCrossEntropy,
}

/// Direction of each ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `α · sign(∇)`.
    #[default]
    Sign,
    /// `α · ∇ / ‖∇‖₂`, the ℓ2 steepest-ascent step.
    L2Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Radius: ℓ2 for the ID-Score attack, ℓ∞ for the cross-entropy attack.
    pub epsilon: f64,
    /// Step size; `None` means `2.5 · epsilon / steps`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub steps: usize,
    pub objective: AttackObjective,
    #[serde(default = "default_true")]
    pub clip_to_unit_box: bool,
    #[serde(default)]
    pub step_rule: StepRule,
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    pub fn id_score(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: None,
            steps: DEFAULT_STEPS,
            objective: AttackObjective::MaximizeIdScore,
            clip_to_unit_box: true,
            step_rule: StepRule::Sign,
        }
    }

    /// PGD-10 at ℓ∞ radius `epsilon`.
    pub fn cross_entropy(epsilon: f64) -> Self {
        Self {
            objective: AttackObjective::MaximizeCrossEntropy,
            ..Self::id_score(epsilon)
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn step_size(&self) -> f64 {
        match self.alpha {
            Some(a) => a,
            None if self.steps == 0 => 0.0,
            None => 2.5 * self.epsilon / self.steps as f64,
        }
    }

    pub fn norm(&self) -> Norm {
        match self.objective {
            AttackObjective::MaximizeIdScore => Norm::L2,
            AttackObjective::MaximizeCrossEntropy => Norm::Linf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("alpha {a} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Scales `delta` back onto the ℓ2 ball of radius `epsilon` if it lies outside.
pub fn project_l2(delta: &Tensor, epsilon: f64) -> Tensor {
    let mut d = delta.clone();
    project_l2_in_place(d.data_mut(), epsilon);
    d
}

pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.clamp(-epsilon, epsilon)
}

fn project_l2_in_place(delta: &mut [f64], epsilon: f64) {
    if epsilon <= 0.0 {
        delta.fill(0.0);
        return;
    }
    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > epsilon {
        let k = epsilon / norm;
        delta.iter_mut().for_each(|v| *v *= k);
    }
}

/// ID-Score ascent: `x ← Π(x + α·sign(∇ MSP))` on the ℓ2 ball, `steps` times.
/// Returns the last iterate.
pub fn pgd_increase_id_score(model: &ModelBundle, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    check_shape(model, x)?;
    let cfg = AttackConfig {
        objective: AttackObjective::MaximizeIdScore,
        ..cfg.clone()
    };
    let out = run_pgd(model.network(), x.data(), 1, &[Objective::IdScore], &cfg, |_, _| {})?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Batched form of [`pgd_increase_id_score`] over a flat buffer of `n` inputs.
pub fn pgd_increase_id_score_batch(
    model: &ModelBundle,
    xs: &[f64],
    n: usize,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let cfg = AttackConfig {
        objective: AttackObjective::MaximizeIdScore,
        ..cfg.clone()
    };
    run_pgd(model.network(), xs, n, &vec![Objective::IdScore; n], &cfg, |_, _| {})
}

/// Untargeted cross-entropy ascent on the ℓ∞ ball.
pub fn pgd_cross_entropy(
    model: &ModelBundle,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    check_shape(model, x)?;
    let out = pgd_cross_entropy_batch(model.network(), x.data(), &[label], cfg)?;
    Tensor::new(x.shape().to_vec(), out)
}

pub fn pgd_cross_entropy_batch(
    net: &Network,
    xs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let c = net.num_outputs();
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidLabel {
            label,
            num_classes: c,
        });
    }
    let cfg = AttackConfig {
        objective: AttackObjective::MaximizeCrossEntropy,
        ..cfg.clone()
    };
    let objectives: Vec<Objective> = labels.iter().map(|&l| Objective::CrossEntropy(l)).collect();
    run_pgd(net, xs, labels.len(), &objectives, &cfg, |_, _| {})
}

/// The PGD loop. `on_step(t, iterate)` observes every iterate after projection,
/// which lets tests check the ball constraint at each step.
pub fn run_pgd(
    net: &Network,
    xs: &[f64],
    n: usize,
    objectives: &[Objective],
    cfg: &AttackConfig,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = net.input_len();
    if xs.len() != n * d {
        return Err(Error::Shape(format!(
            "attack batch holds {} values, expected {n} inputs of {d}",
            xs.len()
        )));
    }
    let alpha = cfg.step_size();
    let norm = cfg.norm();
    let mut cur = xs.to_vec();
    if cfg.epsilon == 0.0 {
        return Ok(cur);
    }
    for t in 0..cfg.steps {
        let (_, grad) = net.input_gradients(&cur, n, objectives)?;
        for s in 0..n {
            let range = s * d..(s + 1) * d;
            let g = &grad[range.clone()];
            let x0 = &xs[range.clone()];
            let xt = &mut cur[range];
            match cfg.step_rule {
                StepRule::Sign => {
                    for (v, &gi) in xt.iter_mut().zip(g) {
                        *v += alpha * sign(gi);
                    }
                }
                StepRule::L2Normalized => {
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn > 0.0 {
                        for (v, &gi) in xt.iter_mut().zip(g) {
                            *v += alpha * gi / gn;
                        }
                    }
                }
            }
            if cfg.clip_to_unit_box {
                xt.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            // Projection after clipping: the result is a convex combination of
            // the clipped point and x, so it stays in the box when x does.
            let mut delta: Vec<f64> = xt.iter().zip(x0).map(|(a, b)| a - b).collect();
            match norm {
                Norm::L2 => project_l2_in_place(&mut delta, cfg.epsilon),
                Norm::Linf => delta
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(-cfg.epsilon, cfg.epsilon)),
            }
            for ((v, &b), dv) in xt.iter_mut().zip(x0).zip(&delta) {
                *v = b + dv;
            }
        }
        on_step(t, &cur);
    }
    Ok(cur)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_shape(model: &ModelBundle, x: &Tensor) -> Result<()> {
    if x.shape() != model.network().input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?}, model expects {:?}",
            x.shape(),
            model.network().input_shape()
        )));
    }
    Ok(())
}

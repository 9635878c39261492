//! Quick invariant suite behind `trodo selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trodo_core::attack::{run_pgd, AttackConfig};
use trodo_core::benchmark::train::{cnn, mlp};
use trodo_core::calibration::{compute_threshold, NullFit};
use trodo_core::model_io::max_softmax;
use trodo_core::{softmax, Network, Objective, Tensor};

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn softmax_invariants(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    let mut below = 0;
    for _ in 0..2000 {
        let c = rng.gen_range(2..20);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.5));
        let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let p = softmax(&z);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        if max_softmax(&z) < 1.0 / c as f64 {
            below += 1;
        }
    }
    Check {
        name: "softmax",
        passed: worst <= 1e-9 && below == 0,
        detail: format!("max |sum - 1| = {worst:.2e}, id-score below 1/c: {below}"),
    }
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for m in 0..4 {
        let (shape, layers) = if m % 2 == 0 {
            (vec![12], mlp(&[12], &[9, 7], 4))
        } else {
            (vec![2, 6, 6], cnn(&[2, 6, 6], (3, 4), &[], 3))
        };
        let net = Network::random(shape.clone(), layers, rng).expect("valid architecture");
        let d: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let obj = Objective::CrossEntropy(0);
        let g = net.input_gradient(&x, obj).expect("gradient");
        let f = |v: &Tensor| {
            let z = net.logits(v).unwrap();
            let z = z.data();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - z[0]
        };
        let h = 1e-6;
        for i in 0..d.min(20) {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Check {
        name: "input gradient",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.2e}"),
    }
}

fn projection_check(rng: &mut ChaCha8Rng) -> Check {
    let net = Network::random(vec![16], mlp(&[16], &[8], 3), rng).unwrap();
    let n = 5;
    let xs: Vec<f64> = (0..n * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut worst = f64::NEG_INFINITY;
    for eps in [0.01, 0.3, 2.0] {
        let cfg = AttackConfig::id_score(eps);
        let objs = vec![Objective::IdScore; n];
        run_pgd(&net, &xs, n, &objs, &cfg, |_, cur| {
            for s in 0..n {
                let norm = cur[s * 16..(s + 1) * 16]
                    .iter()
                    .zip(&xs[s * 16..(s + 1) * 16])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(norm - eps);
            }
        })
        .unwrap();
    }
    Check {
        name: "pgd projection",
        passed: worst <= 1e-6,
        detail: format!("max excess over epsilon {worst:.2e}"),
    }
}

/// Standard normal CDF by composite Simpson integration of the density.
fn simpson_cdf(t: f64) -> f64 {
    let lo = -12.0;
    let n = 20_000;
    let h = (t - lo) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(lo) + pdf(t);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pdf(lo + i as f64 * h);
    }
    acc * h / 3.0
}

fn threshold_check() -> Check {
    let fit = NullFit {
        mu: 0.0,
        sigma: 1.0,
        lower_trunc: None,
        sigma_floored: false,
        samples: vec![],
    };
    let tau = compute_threshold(&fit, 50, 0.95).unwrap();
    let target = 0.95f64.powf(1.0 / 50.0);
    let (mut lo, mut hi) = (0.0, 6.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if simpson_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    Check {
        name: "threshold",
        passed: (tau - oracle).abs() <= 1e-6,
        detail: format!("tau {tau:.8}, oracle {oracle:.8}"),
    }
}

/// Runs every check, prints one line each and returns the exit status.
pub fn run(json: bool) -> u8 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let checks = vec![
        softmax_invariants(&mut rng),
        gradient_check(&mut rng),
        projection_check(&mut rng),
        threshold_check(),
    ];
    if json {
        println!("{}", serde_json::to_string_pretty(&checks).unwrap());
    } else {
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    if checks.iter().all(|c| c.passed) {
        0
    } else {
        2
    }
}

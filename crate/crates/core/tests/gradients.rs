use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trodo_core::benchmark::train::{cnn, mlp};
use trodo_core::nn::{objective_grad, Gradients};
use trodo_core::{Network, Objective, Tensor};

fn nets(rng: &mut ChaCha8Rng) -> Vec<Network> {
    vec![
        Network::random(vec![10], mlp(&[10], &[7, 5], 3), rng).unwrap(),
        Network::random(vec![2, 8, 8], cnn(&[2, 8, 8], (3, 4), &[6], 4), rng).unwrap(),
        Network::random(vec![1, 12, 12], cnn(&[1, 12, 12], (2, 3), &[], 2), rng).unwrap(),
    ]
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn objective_value(net: &Network, xs: &[f64], n: usize, obj: &[Objective]) -> f64 {
    let c = net.num_outputs();
    let z = net.logits_batch(xs, n).unwrap();
    let mut dz = vec![0.0; c];
    z.chunks(c).zip(obj).map(|(z, &o)| objective_grad(z, o, &mut dz)).sum()
}

#[test]
fn input_gradients_match_finite_differences_for_every_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for net in nets(&mut rng) {
        let d = net.input_len();
        let x = Tensor::new(net.input_shape().to_vec(), (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        for obj in [Objective::IdScore, Objective::CrossEntropy(1), Objective::Logit(0)] {
            let g = net.input_gradient(&x, obj).unwrap();
            for i in (0..d).step_by(7) {
                let h = 1e-6;
                let mut a = x.data().to_vec();
                let mut b = a.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (objective_value(&net, &a, 1, &[obj]) - objective_value(&net, &b, 1, &[obj])) / (2.0 * h);
                assert!(rel(g.data()[i], fd) < 1e-4, "{obj:?} coord {i}: {} vs {fd}", g.data()[i]);
            }
        }
    }
}

#[test]
fn batched_gradients_equal_per_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for net in nets(&mut rng) {
        let d = net.input_len();
        let n = 5;
        let xs: Vec<f64> = (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let objs: Vec<Objective> = (0..n).map(|i| Objective::CrossEntropy(i % net.num_outputs())).collect();
        let (values, grads) = net.input_gradients(&xs, n, &objs).unwrap();
        for s in 0..n {
            let x = Tensor::new(net.input_shape().to_vec(), xs[s * d..(s + 1) * d].to_vec()).unwrap();
            let g = net.input_gradient(&x, objs[s]).unwrap();
            assert_eq!(g.data(), &grads[s * d..(s + 1) * d]);
            let v = objective_value(&net, x.data(), 1, &objs[s..=s]);
            assert!((values[s] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mut net in nets(&mut rng) {
        let d = net.input_len();
        let c = net.num_outputs();
        let n = 3;
        let xs: Vec<f64> = (0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let objs: Vec<Objective> = (0..n).map(|i| Objective::CrossEntropy(i % c)).collect();
        let trace = net.forward(&xs, n).unwrap();
        let mut dlogits = vec![0.0; n * c];
        for ((z, dz), &o) in trace.logits().chunks(c).zip(dlogits.chunks_mut(c)).zip(&objs) {
            objective_grad(z, o, dz);
        }
        let mut grads = Gradients::zeros_like(&net);
        net.backward_params(&trace, &dlogits, &mut grads);
        let analytic: Vec<(Vec<f64>, Vec<f64>)> = grads
            .slots
            .iter()
            .flatten()
            .map(|p| (p.weight.data().to_vec(), p.bias.data().to_vec()))
            .collect();
        let h = 1e-6;
        for (layer, (gw, gb)) in analytic.iter().enumerate() {
            for (which, g) in [(0, gw), (1, gb)] {
                for i in (0..g.len()).step_by(5) {
                    let bump = |net: &mut Network, delta: f64| {
                        let p = net.params_mut().nth(layer).unwrap();
                        let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                        t.data_mut()[i] += delta;
                    };
                    bump(&mut net, h);
                    let up = objective_value(&net, &xs, n, &objs);
                    bump(&mut net, -2.0 * h);
                    let down = objective_value(&net, &xs, n, &objs);
                    bump(&mut net, h);
                    let fd = (up - down) / (2.0 * h);
                    assert!(rel(g[i], fd) < 1e-4, "layer {layer} {which} {i}: {} vs {fd}", g[i]);
                }
            }
        }
    }
}

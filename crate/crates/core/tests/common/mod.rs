//! Helpers shared by integration tests.
#![allow(dead_code)]

use fewstep::autodiff::{Graph, GraphBuilder, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

/// A random MLP whose weights are graph inputs, so both modes differentiate
/// through data and parameters alike.
pub fn random_net(rng: &mut ChaCha8Rng) -> (Graph<f64>, Vec<Tensor<f64>>) {
    let b = rng.gen_range(1..4);
    let d_in = rng.gen_range(1..4);
    let layers = rng.gen_range(1..4);
    let mut g = GraphBuilder::new();
    let mut inputs = Vec::new();
    let x = g.input(&[b, d_in]);
    inputs.push(randn(rng, &[b, d_in], 1.0));
    let mut h: NodeId = x;
    let mut width = d_in;
    for _ in 0..layers {
        let out = rng.gen_range(2..6);
        let w = g.input(&[width, out]);
        let bias = g.input(&[out]);
        inputs.push(randn(rng, &[width, out], (1.0 / width as f64).sqrt()));
        inputs.push(randn(rng, &[out], 0.1));
        let a = g.affine(h, w, bias).unwrap();
        h = match rng.gen_range(0..4) {
            0 => g.tanh(a).unwrap(),
            1 => g.silu(a).unwrap(),
            2 => {
                let s = g.scale(a, 0.3).unwrap();
                g.exp(s).unwrap()
            }
            _ => {
                let t = g.tanh(a).unwrap();
                g.mul(t, a).unwrap()
            }
        };
        width = out;
    }
    (g.finish(h).unwrap(), inputs)
}

/// Worst reverse- and forward-mode finite-difference errors over `n` random
/// nets drawn from `seed`.
pub fn random_net_errors(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..n {
        let (g, inputs) = random_net(&mut rng);
        let rev = fewstep::autodiff::grad_check(&g, &inputs, fewstep::autodiff::GradMode::Reverse);
        let fwd = fewstep::autodiff::grad_check(&g, &inputs, fewstep::autodiff::GradMode::Forward);
        worst = (worst.0.max(rev), worst.1.max(fwd));
    }
    worst
}

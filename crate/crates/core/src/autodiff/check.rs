//! Finite-difference oracles for both differentiation modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

use super::graph::Graph;
use super::tensor::Tensor;

/// Step for central differences of the reverse-mode check.
pub const REVERSE_STEP: f64 = 1e-5;
/// Step for central differences of the forward-mode check.
pub const FORWARD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Reverse,
    Forward,
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish and
/// infinite when anything is non-finite.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn random_like<S: Scalar>(t: &Tensor<S>, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(t.shape(), |_| {
        let x: f64 = StandardNormal.sample(rng);
        S::lit(x)
    })
}

/// Worst-case relative error of the graph's derivatives against central
/// finite differences.
///
/// Reverse mode contracts the output with a fixed pseudo-random cotangent and
/// differentiates every input element; forward mode compares the JVP along a
/// pseudo-random direction in all inputs at once. Never fails: evaluation
/// errors and non-finite values are reported as `f64::INFINITY`.
pub fn grad_check<S: Scalar>(graph: &Graph<S>, inputs: &[Tensor<S>], mode: GradMode) -> f64 {
    if inputs.iter().any(|t| !t.all_finite()) {
        return f64::INFINITY;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let eval = |xs: &[Tensor<S>]| -> Option<Tensor<S>> {
        let refs: Vec<&Tensor<S>> = xs.iter().collect();
        graph.forward(&refs).ok()
    };
    let Some(base) = eval(inputs) else {
        return f64::INFINITY;
    };

    match mode {
        GradMode::Reverse => {
            let seed = random_like(&base, &mut rng);
            let refs: Vec<&Tensor<S>> = inputs.iter().collect();
            let Ok(grads) = graph.backward(&refs, &seed) else {
                return f64::INFINITY;
            };
            let h = S::lit(REVERSE_STEP);
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            let mut work = inputs.to_vec();
            for (slot, g) in grads.iter().enumerate() {
                for i in 0..g.len() {
                    let x0 = work[slot].data()[i];
                    work[slot].data_mut()[i] = x0 + h;
                    let plus = eval(&work);
                    work[slot].data_mut()[i] = x0 - h;
                    let minus = eval(&work);
                    work[slot].data_mut()[i] = x0;
                    let (Some(p), Some(m)) = (plus, minus) else {
                        return f64::INFINITY;
                    };
                    let fd = (seed.dot(&p) - seed.dot(&m)).as_f64() / (2.0 * REVERSE_STEP);
                    numeric.push(fd);
                    analytic.push(g.data()[i].as_f64());
                }
            }
            relative_error(&analytic, &numeric)
        }
        GradMode::Forward => {
            let dirs: Vec<Tensor<S>> = inputs.iter().map(|t| random_like(t, &mut rng)).collect();
            let refs: Vec<&Tensor<S>> = inputs.iter().collect();
            let tans: Vec<Option<&Tensor<S>>> = dirs.iter().map(Some).collect();
            let Ok(dual) = graph.jvp(&refs, &tans) else {
                return f64::INFINITY;
            };
            let h = S::lit(FORWARD_STEP);
            let shift = |sign: S| -> Vec<Tensor<S>> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(x, d)| x.zip_map(d, |a, b| a + sign * h * b))
                    .collect()
            };
            let (Some(p), Some(m)) = (eval(&shift(S::one())), eval(&shift(-S::one()))) else {
                return f64::INFINITY;
            };
            let numeric: Vec<f64> = p
                .data()
                .iter()
                .zip(m.data())
                .map(|(a, b)| (*a - *b).as_f64() / (2.0 * FORWARD_STEP))
                .collect();
            let analytic: Vec<f64> = dual.tangent.data().iter().map(|x| x.as_f64()).collect();
            relative_error(&analytic, &numeric)
        }
    }
}

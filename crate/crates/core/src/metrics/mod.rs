//! Sample-based quality metrics, identity verification and NFE sweeps.

mod assignment;
mod identities;
mod sweep;

pub use assignment::{solve_assignment, MAX_ASSIGNMENT};
pub use identities::{identity_report, IdentityReport, SuiteResult};
pub use sweep::{nfe_sweep, write_csv, ModelEntry, SamplerKind, SweepConfig, CSV_HEADER, REFERENCE_METHOD};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::objectives::KernelSpec;
use crate::scalar::Scalar;

/// Points per set used by the median-heuristic bandwidth.
pub const MEDIAN_SUBSAMPLE: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub nfe: usize,
    pub mmd2: f64,
    pub w2: f64,
    pub n_samples: usize,
    pub seed: u64,
}

fn check_sets<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(invalid("sample sets must be non-empty"));
    }
    if x.cols() != y.cols() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", x.cols(), y.cols())));
    }
    Ok(())
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (*p - *q).as_f64().powi(2)).sum()
}

/// Median pairwise distance over the first [`MEDIAN_SUBSAMPLE`] points of
/// each set, pooled; falls back to 1 for degenerate pools.
pub fn median_bandwidth<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    check_sets(x, y)?;
    let pool: Vec<&[S]> = (0..x.rows().min(MEDIAN_SUBSAMPLE))
        .map(|i| x.row(i))
        .chain((0..y.rows().min(MEDIAN_SUBSAMPLE)).map(|i| y.row(i)))
        .collect();
    let mut d: Vec<f64> = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            d.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Ok(if *m > 0.0 { *m } else { 1.0 })
}

fn mean_kernel<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, k: &KernelSpec, skip_diag: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            if skip_diag && i == j {
                continue;
            }
            total += k.eval_sq(sq_dist(ai, b.row(j)));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Biased (V-statistic) MMD^2: `mean k(x, x') + mean k(y, y') - 2 mean
/// k(x, y)`. With `kernel = None`, an RBF with median-heuristic bandwidth.
pub fn mmd2<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, kernel: Option<KernelSpec>) -> Result<f64> {
    check_sets(x, y)?;
    let k = match kernel {
        Some(k) => k,
        None => KernelSpec::Rbf {
            bandwidth: median_bandwidth(x, y)?,
        },
    };
    let v = mean_kernel(x, x, &k, false) + mean_kernel(y, y, &k, false) - 2.0 * mean_kernel(x, y, &k, false);
    // the V-statistic is a squared RKHS norm; clamp rounding below zero
    Ok(v.max(0.0))
}

/// Unbiased (U-statistic) MMD^2; may be negative.
pub fn mmd2_unbiased<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, kernel: Option<KernelSpec>) -> Result<f64> {
    check_sets(x, y)?;
    if x.rows() < 2 || y.rows() < 2 {
        return Err(invalid("unbiased MMD needs at least two points per set"));
    }
    let k = match kernel {
        Some(k) => k,
        None => KernelSpec::Rbf {
            bandwidth: median_bandwidth(x, y)?,
        },
    };
    Ok(mean_kernel(x, x, &k, true) + mean_kernel(y, y, &k, true) - 2.0 * mean_kernel(x, y, &k, false))
}

/// Exact 2-Wasserstein distance between equal-size empirical sets of at most
/// [`MAX_ASSIGNMENT`] points.
pub fn wasserstein2_exact<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    check_sets(x, y)?;
    let n = x.rows();
    if y.rows() != n {
        return Err(invalid(format!("set sizes differ: {n} vs {}", y.rows())));
    }
    if n > MAX_ASSIGNMENT {
        return Err(invalid(format!("{n} points exceeds the exact-solver cap of {MAX_ASSIGNMENT}")));
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(x.row(i), y.row(j)));
        }
    }
    let (total, _) = solve_assignment(&cost, n)?;
    Ok((total / n as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, mean: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 2], |_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            mean + e
        })
    }

    #[test]
    fn identical_sets_give_zero() {
        let x = gauss(50, 0.0, 1);
        assert_eq!(mmd2(&x, &x, None).unwrap(), 0.0);
        assert_eq!(wasserstein2_exact(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn singleton_formulas() {
        let a = Tensor::from_rows(&[[0.0, 0.0]]);
        let b = Tensor::from_rows(&[[1.0, 2.0]]);
        let k = KernelSpec::Rbf { bandwidth: 1.0 };
        let want = 2.0 - 2.0 * (-5.0f64 / 2.0).exp();
        assert!((mmd2(&a, &b, Some(k)).unwrap() - want).abs() < 1e-15);
        assert!((wasserstein2_exact(&a, &b).unwrap() - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn separated_gaussians_are_far() {
        let x = gauss(500, -5.0, 2);
        let y = gauss(500, 5.0, 3);
        let m = mmd2(&x, &y, None).unwrap();
        assert!(m > 0.5, "{m}");
    }

    #[test]
    fn mmd_is_symmetric() {
        let x = gauss(40, 0.0, 4);
        let y = gauss(60, 0.5, 5);
        let a = mmd2(&x, &y, None).unwrap();
        let b = mmd2(&y, &x, None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn w2_rejects_bad_sizes() {
        let x = gauss(3, 0.0, 1);
        let y = gauss(4, 0.0, 1);
        assert!(wasserstein2_exact(&x, &y).is_err());
        let big = gauss(513, 0.0, 1);
        assert!(wasserstein2_exact(&big, &big).is_err());
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(mmd2(&x, &z, None).is_err());
    }
}

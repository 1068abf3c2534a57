//! Timestep-rescaling distillation: fit a `t_scale = 1` student to a teacher
//! that reads time in `[0, 1000]`, under a smooth-L1 penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, Tensor};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

use super::{OptimConfig, Optimizer, VelocityNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescaleConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Smooth-L1 transition width.
    pub beta: f64,
    pub seed: u64,
    /// Std of Gaussian noise added to every student parameter before
    /// training; zero keeps the student's initialization untouched.
    #[serde(default)]
    pub perturb: f64,
}

#[derive(Clone, Debug)]
pub struct RescaleOutcome<S> {
    pub student: VelocityNet<S>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

fn random_conds<R: Rng>(n: usize, n_classes: usize, rng: &mut R) -> Vec<Option<usize>> {
    (0..n)
        .map(|_| {
            if n_classes == 0 || rng.gen::<f64>() < 0.5 {
                None
            } else {
                Some(rng.gen_range(0..n_classes))
            }
        })
        .collect()
}

fn noisy_batch<S: Scalar, R: Rng>(pool: &Tensor<S>, n: usize, rng: &mut R) -> (Tensor<S>, Tensor<S>) {
    let d = pool.cols();
    let mut z = Tensor::zeros(&[n, d]);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let x = pool.row(rng.gen_range(0..pool.rows()));
        let ti: f64 = rng.gen();
        for (zj, &xj) in z.row_mut(i).iter_mut().zip(x) {
            let e: f64 = StandardNormal.sample(rng);
            *zj = S::lit(1.0 - ti) * xj + S::lit(ti * e);
        }
        t.push(S::lit(ti));
    }
    (z, Tensor::column(t))
}

/// Distills `teacher` into `student` on FM states built from `pool`.
///
/// Both networks must share every architectural setting except `t_scale`.
/// Training queries use `r = t` (the teacher is a single-time velocity
/// model) and a 50/50 mix of null and labelled conditions.
pub fn rescale_distill<S: Scalar>(
    teacher: &VelocityNet<S>,
    student: VelocityNet<S>,
    pool: &Tensor<S>,
    cfg: &RescaleConfig,
) -> Result<RescaleOutcome<S>> {
    let (tc, sc) = (teacher.config(), student.config());
    if (tc.dim, tc.hidden, tc.depth, tc.n_classes, tc.dual_time)
        != (sc.dim, sc.hidden, sc.depth, sc.n_classes, sc.dual_time)
    {
        return Err(invalid("teacher and student architectures differ beyond t_scale"));
    }
    if pool.rows() == 0 || pool.cols() != tc.dim {
        return Err(invalid(format!("data pool {:?} for dim {}", pool.shape(), tc.dim)));
    }
    if cfg.batch == 0 || !(cfg.beta > 0.0) {
        return Err(invalid("batch and beta must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = student;
    if cfg.perturb > 0.0 {
        let noise = Normal::new(0.0, cfg.perturb).map_err(|e| invalid(e.to_string()))?;
        for p in student.params_mut() {
            for x in p.data_mut() {
                *x += S::lit(noise.sample(&mut rng));
            }
        }
    }

    let b = cfg.batch;
    let graph = student.graph(b)?;
    let head = {
        let mut g = GraphBuilder::new();
        let d = g.input(&[b, tc.dim]);
        let l = g.smooth_l1(d, S::lit(cfg.beta))?;
        let s = g.sum_all(l)?;
        let m = g.scale(s, S::lit(1.0 / (b * tc.dim) as f64))?;
        g.finish(m)?
    };
    let mut opt = Optimizer::new(OptimConfig::new(cfg.lr), student.params(), cfg.steps)?;
    let mut losses = Vec::with_capacity(cfg.steps + 1);

    let mut step = 0;
    loop {
        let (z, t) = noisy_batch(pool, b, &mut rng);
        let conds = random_conds(b, tc.n_classes, &mut rng);
        let target = teacher.forward_rows(&z, &t, &t, &conds)?;
        let x = student.inputs(z, t.clone(), t, &conds)?;
        let slots = student.slots(&x);
        let trace = graph.trace(&slots)?;
        let delta = trace.output() - &target;
        let loss_trace = head.trace(&[&delta])?;
        let loss = loss_trace.output().data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("rescale loss {loss}; max |delta| = {}", delta.max_abs()),
            });
        }
        losses.push(loss);
        if step == cfg.steps {
            break;
        }
        let seed = head.backward_trace(&loss_trace, &Tensor::scalar(S::one()), None)?;
        let grads = student.param_grads(&graph, &trace, &seed[0])?;
        drop(trace);
        opt.step(student.params_mut(), &grads)?;
        step += 1;
    }
    Ok(RescaleOutcome {
        student,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("at least one evaluation"),
        losses,
    })
}

/// Largest `|student(z, t) - teacher(z, t)|` over `n_times` evenly spaced
/// times in `[0, 1]`, FM states built from the first `n_points` pool rows
/// with seeded noise, and every condition including the null class.
pub fn max_grid_discrepancy<S: Scalar>(
    teacher: &VelocityNet<S>,
    student: &VelocityNet<S>,
    pool: &Tensor<S>,
    n_points: usize,
    n_times: usize,
    seed: u64,
) -> Result<S> {
    let n = n_points.min(pool.rows());
    if n == 0 || n_times < 2 {
        return Err(invalid("grid needs at least one point and two times"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = pool.cols();
    let noise = Tensor::<S>::from_fn(&[n, d], |_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        S::lit(e)
    });
    let x = Tensor::from_fn(&[n, d], |i| pool.data()[i]);
    let classes: Vec<Option<usize>> = std::iter::once(None)
        .chain((0..teacher.config().n_classes).map(Some))
        .collect();
    let mut worst = S::zero();
    for k in 0..n_times {
        let t = S::lit(k as f64 / (n_times - 1) as f64);
        let (z, _) = crate::schedules::fm_interpolate(&x, &noise, t)?;
        for &c in &classes {
            let a = teacher.forward_velocity(&z, t, t, c)?;
            let b = student.forward_velocity(&z, t, t, c)?;
            let m = a.max_abs_diff(&b);
            if m > worst || m.is_nan() {
                worst = m;
            }
        }
    }
    Ok(worst)
}

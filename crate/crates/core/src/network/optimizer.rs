use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `final_frac * lr` over the run.
    Cosine { final_frac: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
}

impl OptimConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            schedule: LrSchedule::Constant,
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { final_frac } => {
                let p = if total <= 1 {
                    0.0
                } else {
                    step as f64 / (total - 1) as f64
                };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos());
                self.lr * (final_frac + (1.0 - final_frac) * c)
            }
        }
    }
}

/// Momentum-free adaptive optimizer: per-parameter step
/// `lr * g / (sqrt(v_hat) + eps)` with `v` an EMA of `g^2` and the usual
/// bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
    second: Vec<Tensor<S>>,
    frozen: Vec<bool>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimConfig, params: &[Tensor<S>], total_steps: usize) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(invalid(format!("lr = {} must be positive", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta2) {
            return Err(invalid(format!("beta2 = {} outside [0, 1)", cfg.beta2)));
        }
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            frozen: vec![false; params.len()],
        })
    }

    /// Excludes the listed parameter tensors from updates.
    pub fn freeze(&mut self, indices: impl IntoIterator<Item = usize>) {
        for i in indices {
            self.frozen[i] = true;
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step, self.total_steps)
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.second.len() || grads.len() != params.len() {
            return Err(invalid(format!(
                "{} params, {} grads, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.second.len()
            )));
        }
        let lr = S::lit(self.current_lr());
        self.step += 1;
        let b2 = S::lit(self.cfg.beta2);
        let corr = S::one() - b2.powi(self.step as i32);
        let eps = S::lit(self.cfg.eps);

        let clip = match self.cfg.grad_clip {
            Some(max) => {
                let norm = grads
                    .iter()
                    .zip(&self.frozen)
                    .filter(|(_, f)| !**f)
                    .map(|(g, _)| g.dot(g))
                    .sum::<S>()
                    .sqrt();
                let max = S::lit(max);
                if norm > max {
                    max / norm
                } else {
                    S::one()
                }
            }
            None => S::one(),
        };

        for ((p, g), (v, frozen)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.second.iter_mut().zip(&self.frozen))
        {
            if *frozen {
                continue;
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gi = gi * clip;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let vhat = *vi / corr;
                *pi -= lr * gi / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_scaled_by_lr() {
        let mut p = vec![Tensor::from_rows(&[[1.0f64, -1.0]])];
        let g = vec![Tensor::from_rows(&[[0.5, -2.0]])];
        let mut opt = Optimizer::new(OptimConfig::new(0.1), &p, 10).unwrap();
        opt.step(&mut p, &g).unwrap();
        // bias-corrected v_hat = g^2, so the step is lr * sign(g)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = vec![Tensor::scalar(1.0f64), Tensor::scalar(2.0)];
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut opt = Optimizer::new(OptimConfig::new(0.1), &p, 10).unwrap();
        opt.freeze([1]);
        opt.step(&mut p, &g).unwrap();
        assert!(p[0].data()[0] < 1.0);
        assert_eq!(p[1].data()[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_rows(&[[3.0f64, -2.0]])];
        let mut cfg = OptimConfig::new(0.05);
        cfg.schedule = LrSchedule::Cosine { final_frac: 0.01 };
        let mut opt = Optimizer::new(cfg, &p, 2000).unwrap();
        for _ in 0..2000 {
            let g = vec![p[0].scale(2.0)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p[0].max_abs() < 1e-2, "{:?}", p[0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut cfg = OptimConfig::new(1.0);
        cfg.schedule = LrSchedule::Cosine { final_frac: 0.1 };
        assert!((cfg.lr_at(0, 11) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10, 11) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_lr() {
        let p = vec![Tensor::scalar(0.0f64)];
        assert!(Optimizer::new(OptimConfig::new(0.0), &p, 1).is_err());
    }
}

//! Training objectives.
//!
//! Every loss is assembled the same way: the network produces its output
//! through a recorded trace, a small "head" graph maps that output (plus
//! stop-gradient targets fed in as plain inputs) to a scalar, and the head's
//! cotangent seeds the network's reverse sweep. Targets that need time
//! derivatives come from one forward-mode sweep of the network along
//! `(dz/dt, dr/dt, dt/dt) = (v, 0, 1)`.

mod consistency;
mod flow;

pub use consistency::{
    cm_loss, imm_loss, scm_loss, scm_vs_meanflow_gradient_relation, CmBatch, GradientRelation, ImmBatch,
};
pub use flow::{
    cfg_teacher_velocity, fm_loss, improved_cfg_target, meanflow_distill_loss, meanflow_train_loss, teacher_target,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, Tensor};
use crate::error::{invalid, range_err, Error, Result};
use crate::network::{NetConfig, N_FREQS};
use crate::scalar::Scalar;
use crate::schedules::fm_interpolate_rows;

/// Keeps `gamma = 0.5` differentiable at `delta = 0`.
pub const POWER_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Fm,
    MeanflowTrain,
    MeanflowDistill,
    Scm,
    Imm,
    Cm,
}

/// Per-sample weight `w(t)` (or `w(s, t)`, which ignores `s`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    Unit,
    /// `w(t) = t`.
    Linear,
}

impl WeightFn {
    pub fn column<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        match self {
            WeightFn::Unit => Tensor::full(t.shape(), S::one()),
            WeightFn::Linear => t.clone(),
        }
    }
}

/// Which direction the MeanFlow-distillation JVP differentiates along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JvpTangent {
    /// The interpolant velocity `e - x`.
    #[default]
    Interpolant,
    /// The (guided) teacher velocity.
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `-|a - b|^2`.
    NegSqEuclid,
    /// `exp(-|a - b|^2 / (2 h^2))`.
    Rbf { bandwidth: f64 },
    /// `exp(-|a - b| / h)`.
    Laplace { bandwidth: f64 },
}

impl KernelSpec {
    /// Kernel value from a squared distance.
    pub fn eval_sq(&self, d2: f64) -> f64 {
        match *self {
            KernelSpec::NegSqEuclid => -d2,
            KernelSpec::Rbf { bandwidth } => (-d2 / (2.0 * bandwidth * bandwidth)).exp(),
            KernelSpec::Laplace { bandwidth } => (-d2.sqrt() / bandwidth).exp(),
        }
    }

    pub fn eval<S: Scalar>(&self, a: &[S], b: &[S]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum();
        self.eval_sq(d2)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::NegSqEuclid => Ok(()),
            KernelSpec::Rbf { bandwidth } | KernelSpec::Laplace { bandwidth } => {
                if bandwidth > 0.0 && bandwidth.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(format!("kernel bandwidth {bandwidth} must be positive")))
                }
            }
        }
    }
}

fn default_gamma() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Exponent in `(|delta|^2 + eps)^gamma`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Guidance scale; zero disables guidance in distillation targets.
    #[serde(default)]
    pub omega: f64,
    /// Improved-guidance mixing scale.
    #[serde(default)]
    pub kappa: f64,
    /// Learned per-sample log-variance weighting (experimental).
    #[serde(default)]
    pub adaptive_variance: bool,
    #[serde(default)]
    pub weight_fn: WeightFn,
    #[serde(default)]
    pub tangent: JvpTangent,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: 1.0,
            omega: 0.0,
            kappa: 0.0,
            adaptive_variance: false,
            weight_fn: WeightFn::Unit,
            tangent: JvpTangent::Interpolant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.5 && self.gamma.is_finite()) {
            return Err(range_err(format!("gamma = {} must be at least 0.5", self.gamma)));
        }
        if ![0.5, 1.0, 2.0].contains(&self.gamma) {
            log::warn!("gamma = {} is outside the tested set {{0.5, 1, 2}}", self.gamma);
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(range_err(format!("omega = {} must be non-negative", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(range_err(format!("kappa = {} outside [0, 1]", self.kappa)));
        }
        Ok(())
    }
}

/// One training batch under the FM interpolant.
#[derive(Clone, Debug)]
pub struct InterpolantBatch<S> {
    pub x: Tensor<S>,
    pub noise: Tensor<S>,
    /// `(1 - t) x + t noise`.
    pub z: Tensor<S>,
    /// `noise - x`.
    pub v: Tensor<S>,
    pub t: Tensor<S>,
    pub r: Tensor<S>,
    pub conds: Vec<Option<usize>>,
}

impl<S: Scalar> InterpolantBatch<S> {
    pub fn new(x: Tensor<S>, noise: Tensor<S>, t: Tensor<S>, r: Tensor<S>, conds: Vec<Option<usize>>) -> Result<Self> {
        let (z, v) = fm_interpolate_rows(&x, &noise, &t)?;
        if r.shape() != t.shape() || conds.len() != x.rows() {
            return Err(invalid(format!(
                "r {:?} vs t {:?}; {} conditions for {} rows",
                r.shape(),
                t.shape(),
                conds.len(),
                x.rows()
            )));
        }
        for (i, (&ri, &ti)) in r.data().iter().zip(t.data()).enumerate() {
            if !(ri >= S::zero() && ri <= ti) {
                return Err(range_err(format!("row {i}: r = {ri}, t = {ti}")));
            }
        }
        Ok(Self {
            x,
            noise,
            z,
            v,
            t,
            r,
            conds,
        })
    }

    /// Draws fresh Gaussian noise for `x`.
    pub fn sample<R: Rng + ?Sized>(
        x: Tensor<S>,
        t: Tensor<S>,
        r: Tensor<S>,
        conds: Vec<Option<usize>>,
        rng: &mut R,
    ) -> Result<Self> {
        let noise = Tensor::from_fn(x.shape(), |_| {
            let e: f64 = StandardNormal.sample(rng);
            S::lit(e)
        });
        Self::new(x, noise, t, r, conds)
    }

    pub fn batch(&self) -> usize {
        self.x.rows()
    }

    /// Same batch with `r` replaced by `t`.
    pub fn with_r_equal_t(&self) -> Self {
        let mut b = self.clone();
        b.r = b.t.clone();
        b
    }
}

/// Scalar loss plus gradients for the online network's parameters (in
/// parameter order) and, when adaptive weighting is on, for the log-variance
/// head.
#[derive(Clone, Debug)]
pub struct LossOutput<S> {
    pub loss: S,
    pub grads: Vec<Tensor<S>>,
    pub aux_grads: Option<Vec<Tensor<S>>>,
    /// Per-sample regression error (`u - u_tgt` for MeanFlow-style losses,
    /// `v - F^- - t dF^-/dt` for sCM).
    pub error_signal: Option<Tensor<S>>,
}

/// `(|delta|^2 + eps)^gamma`, optionally `base / exp(w) + w`.
pub fn power_metric<S: Scalar>(delta: &Tensor<S>, gamma: S, adaptive_logvar: Option<S>) -> S {
    let base = (delta.dot(delta) + S::lit(POWER_EPS)).powf(gamma);
    match adaptive_logvar {
        Some(w) => base / w.exp() + w,
        None => base,
    }
}

/// Learned per-sample log-variance `w(t)`: a linear map of sinusoidal
/// features of `t`, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct LogVarHead<S> {
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> LogVarHead<S> {
    pub fn new() -> Self {
        Self {
            params: vec![Tensor::zeros(&[2 * N_FREQS, 1]), Tensor::zeros(&[1])],
        }
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    fn graph(&self, batch: usize) -> Result<Graph<S>> {
        let feat_cfg = NetConfig {
            dim: 1,
            hidden: 1,
            depth: 2,
            n_classes: 0,
            t_scale: 1.0,
            dual_time: false,
        };
        let (freqs, active) = feat_cfg.features();
        let mut g = GraphBuilder::new();
        let t = g.input(&[batch, 1]);
        let w = g.input(&[2 * N_FREQS, 1]);
        let b = g.input(&[1]);
        let f = g.sinusoid(t, freqs.into_iter().map(S::lit).collect(), active)?;
        let out = g.affine(f, w, b)?;
        g.finish(out)
    }

    /// `w(t)` as a `[B, 1]` column.
    pub fn forward(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.graph(t.rows())?.forward(&[t, &self.params[0], &self.params[1]])
    }

    fn param_grads(&self, t: &Tensor<S>, seed: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let g = self.graph(t.rows())?;
        let mut grads = g.backward(&[t, &self.params[0], &self.params[1]], seed)?;
        Ok(grads.split_off(1))
    }
}

impl<S: Scalar> Default for LogVarHead<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean over the batch of `weight * power(delta)`, as a graph whose inputs
/// are `delta [B, d]`, `weight [B, 1]` and optionally `logvar [B, 1]`.
fn power_head<S: Scalar>(b: usize, d: usize, gamma: f64, adaptive: bool) -> Result<Graph<S>> {
    let mut g = GraphBuilder::new();
    let delta = g.input(&[b, d]);
    let w = g.input(&[b, 1]);
    let sq = g.mul(delta, delta)?;
    let n = g.sum_rows(sq)?;
    let n = g.add_scalar(n, S::lit(POWER_EPS))?;
    let mut per = g.powf(n, S::lit(gamma))?;
    if adaptive {
        let lv = g.input(&[b, 1]);
        let neg = g.scale(lv, -S::one())?;
        let inv = g.exp(neg)?;
        let scaled = g.mul(per, inv)?;
        per = g.add(scaled, lv)?;
    }
    let weighted = g.mul(per, w)?;
    let total = g.sum_all(weighted)?;
    let mean = g.scale(total, S::lit(1.0 / b as f64))?;
    g.finish(mean)
}

/// Evaluates the power head on `delta` and returns `(loss, d loss / d delta,
/// logvar-head gradients)`.
fn power_loss<S: Scalar>(
    delta: &Tensor<S>,
    t: &Tensor<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<(S, Tensor<S>, Option<Vec<Tensor<S>>>)> {
    let (b, d) = (delta.rows(), delta.cols());
    let weights = spec.weight_fn.column(t);
    let head = power_head::<S>(b, d, spec.gamma, spec.adaptive_variance)?;
    let lv = if spec.adaptive_variance {
        let h = logvar.ok_or_else(|| invalid("adaptive weighting needs a log-variance head"))?;
        Some(h.forward(t)?)
    } else {
        None
    };
    let mut inputs = vec![delta, &weights];
    if let Some(lv) = &lv {
        inputs.push(lv);
    }
    let trace = head.trace(&inputs)?;
    let loss = trace.output().data()[0];
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite loss {loss}"),
        });
    }
    let mask = [true, false, true];
    let grads = head.backward_trace(&trace, &Tensor::scalar(S::one()), Some(&mask[..inputs.len()]))?;
    let aux = match (&lv, logvar) {
        (Some(_), Some(h)) => Some(h.param_grads(t, &grads[2])?),
        _ => None,
    };
    Ok((loss, grads[0].clone(), aux))
}

/// Rows of `x` scaled by the matching entries of a `[B, 1]` column.
pub(crate) fn row_scale<S: Scalar>(x: &Tensor<S>, col: &Tensor<S>) -> Tensor<S> {
    x.scale_rows(col)
}

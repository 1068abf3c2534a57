//! Interpolants and the FM <-> TrigFlow change of variables.
//!
//! With `S(t) = sqrt(t^2 + (1-t)^2)` the two parameterizations are related by
//! `cos(t_trig) = (1 - t_fm) / S`, `sin(t_trig) = t_fm / S` and
//! `x_trig = x_fm / S`. `S` never drops below `1/sqrt(2)` on `[0, 1]`, so no
//! singularity guard is needed anywhere in this module.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, range_err, Result};
use crate::scalar::Scalar;

fn check_unit<S: Scalar>(t: S, what: &str) -> Result<()> {
    if !(t >= S::zero() && t <= S::one()) {
        return Err(range_err(format!("{what} = {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_trig<S: Scalar>(t: S) -> Result<()> {
    if !(t >= S::zero() && t <= S::lit(FRAC_PI_2)) {
        return Err(range_err(format!("t_trig = {t} outside [0, pi/2]")));
    }
    Ok(())
}

/// `sqrt(t^2 + (1-t)^2)`: the FM state scale relative to TrigFlow.
pub fn fm_state_scale<S: Scalar>(t_fm: S) -> S {
    let u = S::one() - t_fm;
    (t_fm * t_fm + u * u).sqrt()
}

/// `z = (1-t) x + t e` and `v = e - x`.
pub fn fm_interpolate<S: Scalar>(x: &Tensor<S>, e: &Tensor<S>, t: S) -> Result<(Tensor<S>, Tensor<S>)> {
    check_unit(t, "t")?;
    if x.shape() != e.shape() {
        return Err(invalid(format!("x {:?} vs noise {:?}", x.shape(), e.shape())));
    }
    let u = S::one() - t;
    Ok((x.zip_map(e, |a, b| u * a + t * b), e - x))
}

/// Per-row variant of [`fm_interpolate`]: `t` is a `[B, 1]` column.
pub fn fm_interpolate_rows<S: Scalar>(
    x: &Tensor<S>,
    e: &Tensor<S>,
    t: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if x.shape() != e.shape() || t.len() != x.rows() {
        return Err(invalid(format!(
            "x {:?}, noise {:?}, t {:?}",
            x.shape(),
            e.shape(),
            t.shape()
        )));
    }
    for &ti in t.data() {
        check_unit(ti, "t")?;
    }
    let c = x.cols();
    let td = t.data();
    let z = Tensor::from_fn(x.shape(), |i| {
        let ti = td[i / c];
        (S::one() - ti) * x.data()[i] + ti * e.data()[i]
    });
    Ok((z, e - x))
}

/// `cos(t) x0 + sin(t) noise`.
pub fn trig_interpolate<S: Scalar>(x0: &Tensor<S>, noise: &Tensor<S>, t_trig: S) -> Result<Tensor<S>> {
    check_trig(t_trig)?;
    if x0.shape() != noise.shape() {
        return Err(invalid(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let (s, c) = t_trig.sin_cos();
    Ok(x0.zip_map(noise, |a, b| c * a + s * b))
}

/// `sin t / (cos t + sin t)`; matches signal-to-noise ratios.
pub fn time_trig_to_fm<S: Scalar>(t_trig: S) -> S {
    let (s, c) = t_trig.sin_cos();
    s / (c + s)
}

/// `atan(t / (1 - t))`, continuous up to `pi/2` at `t = 1`.
pub fn time_fm_to_trig<S: Scalar>(t_fm: S) -> S {
    t_fm.atan2(S::one() - t_fm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmState<S> {
    pub z: Tensor<S>,
    pub t_fm: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrigState<S> {
    pub x: Tensor<S>,
    pub t_trig: S,
}

impl<S: Scalar> FmState<S> {
    pub fn new(z: Tensor<S>, t_fm: S) -> Result<Self> {
        check_unit(t_fm, "t_fm")?;
        Ok(Self { z, t_fm })
    }
}

impl<S: Scalar> TrigState<S> {
    pub fn new(x: Tensor<S>, t_trig: S) -> Result<Self> {
        check_trig(t_trig)?;
        Ok(Self { x, t_trig })
    }
}

pub fn state_trig_to_fm<S: Scalar>(s: &TrigState<S>) -> FmState<S> {
    let (sn, cs) = s.t_trig.sin_cos();
    let k = cs + sn;
    FmState {
        z: s.x.map(|v| v / k),
        t_fm: sn / k,
    }
}

pub fn state_fm_to_trig<S: Scalar>(s: &FmState<S>) -> TrigState<S> {
    let k = fm_state_scale(s.t_fm);
    TrigState {
        x: s.z.map(|v| v / k),
        t_trig: time_fm_to_trig(s.t_fm),
    }
}

/// Velocity model in FM coordinates: `v(z, t_fm, cond)`.
pub trait FmModel<S: Scalar> {
    fn velocity(&self, z: &Tensor<S>, t_fm: S, cond: Option<usize>) -> Result<Tensor<S>>;
}

/// Model in TrigFlow coordinates: `F(x, t_trig, cond)`.
pub trait TrigModel<S: Scalar> {
    fn trig_output(&self, x: &Tensor<S>, t_trig: S, cond: Option<usize>) -> Result<Tensor<S>>;
}

impl<S: Scalar, M: FmModel<S> + ?Sized> FmModel<S> for &M {
    fn velocity(&self, z: &Tensor<S>, t_fm: S, cond: Option<usize>) -> Result<Tensor<S>> {
        (**self).velocity(z, t_fm, cond)
    }
}

impl<S: Scalar, M: TrigModel<S> + ?Sized> TrigModel<S> for &M {
    fn trig_output(&self, x: &Tensor<S>, t_trig: S, cond: Option<usize>) -> Result<Tensor<S>> {
        (**self).trig_output(x, t_trig, cond)
    }
}

/// Adapts a closure `(z, t_fm, cond) -> v` into an [`FmModel`].
pub struct FmFn<F>(pub F);

impl<S: Scalar, F: Fn(&Tensor<S>, S, Option<usize>) -> Result<Tensor<S>>> FmModel<S> for FmFn<F> {
    fn velocity(&self, z: &Tensor<S>, t_fm: S, cond: Option<usize>) -> Result<Tensor<S>> {
        (self.0)(z, t_fm, cond)
    }
}

/// Adapts a closure `(x, t_trig, cond) -> F` into a [`TrigModel`].
pub struct TrigFn<F>(pub F);

impl<S: Scalar, F: Fn(&Tensor<S>, S, Option<usize>) -> Result<Tensor<S>>> TrigModel<S> for TrigFn<F> {
    fn trig_output(&self, x: &Tensor<S>, t_trig: S, cond: Option<usize>) -> Result<Tensor<S>> {
        (self.0)(x, t_trig, cond)
    }
}

#[cfg(test)]
thread_local! {
    /// Test-only fault injection: perturbs the state coefficient of
    /// [`FmAsTrig`].
    pub(crate) static CORRUPT_FM_TO_TRIG: std::cell::Cell<bool> =
        const { std::cell::Cell::new(false) };
}

/// An FM velocity model seen as a TrigFlow estimator.
pub struct FmAsTrig<M>(pub M);

/// A TrigFlow estimator seen as an FM velocity model.
pub struct TrigAsFm<M>(pub M);

/// `F(x, t) = (cos - sin)/(cos + sin) x + v(x/(cos + sin), t_fm)/(cos + sin)`;
/// one inner model call per evaluation.
pub fn wrap_fm_model_as_trigflow<M>(model: M) -> FmAsTrig<M> {
    FmAsTrig(model)
}

/// `v(z, t) = F(z/S, t_trig)/S - (1 - 2t)/S^2 z`; inverse of
/// [`wrap_fm_model_as_trigflow`].
pub fn wrap_trig_model_as_fm<M>(model: M) -> TrigAsFm<M> {
    TrigAsFm(model)
}

impl<S: Scalar, M: FmModel<S>> TrigModel<S> for FmAsTrig<M> {
    fn trig_output(&self, x: &Tensor<S>, t_trig: S, cond: Option<usize>) -> Result<Tensor<S>> {
        check_trig(t_trig)?;
        let (sn, cs) = t_trig.sin_cos();
        let k = cs + sn;
        let t_fm = sn / k;
        let z = x.map(|v| v / k);
        let v = self.0.velocity(&z, t_fm, cond)?;
        #[allow(unused_mut)]
        let mut a = (cs - sn) / k;
        #[cfg(test)]
        if CORRUPT_FM_TO_TRIG.with(|c| c.get()) {
            a = a * S::lit(1.01) + S::lit(1e-3);
        }
        Ok(x.zip_map(&v, |xi, vi| a * xi + vi / k))
    }
}

impl<S: Scalar, M: TrigModel<S>> FmModel<S> for TrigAsFm<M> {
    fn velocity(&self, z: &Tensor<S>, t_fm: S, cond: Option<usize>) -> Result<Tensor<S>> {
        check_unit(t_fm, "t_fm")?;
        let k = fm_state_scale(t_fm);
        let x = z.map(|v| v / k);
        let f = self.0.trig_output(&x, time_fm_to_trig(t_fm), cond)?;
        let b = (S::one() - S::lit(2.0) * t_fm) / (k * k);
        Ok(f.zip_map(z, |fi, zi| fi / k - b * zi))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDistribution {
    Uniform,
    /// `logistic(N(mu, sigma^2))`.
    Lognormal { mu: f64, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSamplerConfig {
    pub distribution: TimeDistribution,
    /// Probability of forcing `r == t`.
    pub p_equal: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self {
            distribution: TimeDistribution::Uniform,
            p_equal: 0.25,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_equal) {
            return Err(range_err(format!("p_equal = {} outside [0, 1]", self.p_equal)));
        }
        if let TimeDistribution::Lognormal { sigma, mu } = self.distribution {
            if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
                return Err(invalid(format!("lognormal(mu={mu}, sigma={sigma})")));
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.distribution {
            TimeDistribution::Uniform => rng.gen::<f64>(),
            TimeDistribution::Lognormal { mu, sigma } => {
                let n: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-(mu + sigma * n)).exp())
            }
        }
    }
}

/// Draws `(t, r)` with `0 <= r <= t <= 1`: two independent draws sorted, or
/// with probability `p_equal` a single draw used for both.
pub fn sample_t_r<S: Scalar, R: Rng + ?Sized>(cfg: &TimeSamplerConfig, rng: &mut R) -> (S, S) {
    let equal = rng.gen::<f64>() < cfg.p_equal;
    let a = cfg.draw(rng);
    if equal {
        return (S::lit(a), S::lit(a));
    }
    let b = cfg.draw(rng);
    let (t, r) = if a >= b { (a, b) } else { (b, a) };
    (S::lit(t), S::lit(r))
}

/// Batched [`sample_t_r`]: returns `[n, 1]` columns `(t, r)`.
pub fn sample_t_r_batch<S: Scalar, R: Rng + ?Sized>(
    cfg: &TimeSamplerConfig,
    n: usize,
    rng: &mut R,
) -> (Tensor<S>, Tensor<S>) {
    let (t, r): (Vec<S>, Vec<S>) = (0..n).map(|_| sample_t_r::<S, R>(cfg, rng)).unzip();
    (Tensor::column(t), Tensor::column(r))
}

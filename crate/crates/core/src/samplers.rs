//! Few-step and multi-step generation.
//!
//! Every sampler walks a strictly decreasing time schedule `1 = t_0 > ... >
//! t_k = 0` and spends one network call per segment (two under sample-time
//! guidance).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::network::VelocityNet;
use crate::scalar::Scalar;
use crate::schedules::{
    fm_interpolate, time_fm_to_trig, wrap_fm_model_as_trigflow, wrap_trig_model_as_fm, FmModel, TrigModel,
};

/// Model queried with an explicit `(r, t)` pair.
pub trait VelocityModel<S: Scalar> {
    fn predict(&self, z: &Tensor<S>, r: S, t: S, cond: Option<usize>) -> Result<Tensor<S>>;
}

impl<S: Scalar> VelocityModel<S> for VelocityNet<S> {
    fn predict(&self, z: &Tensor<S>, r: S, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        self.forward_velocity(z, r, t, cond)
    }
}

impl<S: Scalar> FmModel<S> for VelocityNet<S> {
    fn velocity(&self, z: &Tensor<S>, t_fm: S, cond: Option<usize>) -> Result<Tensor<S>> {
        self.forward_velocity(z, t_fm, t_fm, cond)
    }
}

impl<S: Scalar, M: VelocityModel<S> + ?Sized> VelocityModel<S> for &M {
    fn predict(&self, z: &Tensor<S>, r: S, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        (**self).predict(z, r, t, cond)
    }
}

/// Wraps a model and counts its evaluations.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<S: Scalar, M: VelocityModel<S>> VelocityModel<S> for CountingModel<M> {
    fn predict(&self, z: &Tensor<S>, r: S, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        self.tick();
        self.inner.predict(z, r, t, cond)
    }
}

impl<S: Scalar, M: FmModel<S>> FmModel<S> for CountingModel<M> {
    fn velocity(&self, z: &Tensor<S>, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        self.tick();
        self.inner.velocity(z, t, cond)
    }
}

impl<S: Scalar, M: TrigModel<S>> TrigModel<S> for CountingModel<M> {
    fn trig_output(&self, x: &Tensor<S>, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        self.tick();
        self.inner.trig_output(x, t, cond)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub n: usize,
    pub dim: usize,
    pub nfe: usize,
    /// Explicit schedule; uniform in FM time when absent.
    pub schedule: Option<Vec<f64>>,
    pub cond: Option<usize>,
    /// Sample-time guidance scale. `1` queries the conditional model only,
    /// `0` the unconditional one; anything else costs two calls per step.
    pub omega: f64,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(n: usize, dim: usize, nfe: usize, seed: u64) -> Self {
        Self {
            n,
            dim,
            nfe,
            schedule: None,
            cond: None,
            omega: 1.0,
            seed,
        }
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        if self.nfe == 0 {
            return Err(invalid("nfe must be at least 1"));
        }
        let s = match &self.schedule {
            Some(s) => s.clone(),
            None => uniform_schedule(self.nfe),
        };
        validate_schedule(&s)?;
        if s.len() != self.nfe + 1 {
            return Err(invalid(format!(
                "schedule has {} segments but nfe = {}",
                s.len() - 1,
                self.nfe
            )));
        }
        Ok(s)
    }

    fn guided(&self) -> bool {
        self.cond.is_some() && self.omega != 1.0 && self.omega != 0.0
    }

    /// Network calls this request costs with a single-call-per-step sampler.
    pub fn expected_calls(&self) -> usize {
        self.nfe * if self.guided() { 2 } else { 1 }
    }

    pub fn initial_noise<S: Scalar>(&self) -> Tensor<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Tensor::from_fn(&[self.n, self.dim], |_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            S::lit(e)
        })
    }
}

/// `[1, (k-1)/k, ..., 0]`.
pub fn uniform_schedule(nfe: usize) -> Vec<f64> {
    (0..=nfe).map(|i| 1.0 - i as f64 / nfe as f64).collect()
}

pub fn validate_schedule(s: &[f64]) -> Result<()> {
    if s.len() < 2 || s[0] != 1.0 || *s.last().expect("non-empty") != 0.0 {
        return Err(invalid(format!("schedule must run from 1 to 0, got {s:?}")));
    }
    if s.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(invalid(format!("schedule must be strictly decreasing, got {s:?}")));
    }
    Ok(())
}

fn check_state<S: Scalar>(z: &Tensor<S>, step: usize, t: f64) -> Result<()> {
    if z.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("non-finite sampler state after segment ending at t = {t}"),
        })
    }
}

fn guided_velocity<S: Scalar, M: FmModel<S> + ?Sized>(model: &M, z: &Tensor<S>, t: S, req: &SampleRequest) -> Result<Tensor<S>> {
    if !req.guided() {
        let cond = if req.omega == 0.0 { None } else { req.cond };
        return model.velocity(z, t, cond);
    }
    let v_u = model.velocity(z, t, None)?;
    let v_c = model.velocity(z, t, req.cond)?;
    let w = S::lit(req.omega);
    Ok(v_u.zip_map(&v_c, |u, c| u + w * (c - u)))
}

fn guided_predict<S: Scalar, M: VelocityModel<S> + ?Sized>(
    model: &M,
    z: &Tensor<S>,
    r: S,
    t: S,
    req: &SampleRequest,
) -> Result<Tensor<S>> {
    if !req.guided() {
        let cond = if req.omega == 0.0 { None } else { req.cond };
        return model.predict(z, r, t, cond);
    }
    let u_u = model.predict(z, r, t, None)?;
    let u_c = model.predict(z, r, t, req.cond)?;
    let w = S::lit(req.omega);
    Ok(u_u.zip_map(&u_c, |u, c| u + w * (c - u)))
}

fn euler_from<S: Scalar, M: FmModel<S> + ?Sized>(model: &M, mut z: Tensor<S>, times: &[f64], req: &SampleRequest) -> Result<Tensor<S>> {
    for (i, w) in times.windows(2).enumerate() {
        let v = guided_velocity(model, &z, S::lit(w[0]), req)?;
        z.axpy(-S::lit(w[0] - w[1]), &v);
        check_state(&z, i, w[1])?;
    }
    Ok(z)
}

/// FM Euler: `z <- z - (t_i - t_{i+1}) v(z, t_i)`.
pub fn euler_fm_sample<S: Scalar, M: FmModel<S> + ?Sized>(model: &M, req: &SampleRequest) -> Result<Tensor<S>> {
    let times = req.times()?;
    euler_from(model, req.initial_noise(), &times, req)
}

/// Average-velocity sampling: `z_r = z_t - (t - r) u(z_t, r, t)` per segment.
pub fn meanflow_sample<S: Scalar, M: VelocityModel<S> + ?Sized>(model: &M, req: &SampleRequest) -> Result<Tensor<S>> {
    let times = req.times()?;
    let mut z = req.initial_noise::<S>();
    for (i, w) in times.windows(2).enumerate() {
        let (t, r) = (S::lit(w[0]), S::lit(w[1]));
        let u = guided_predict(model, &z, r, t, req)?;
        z.axpy(-(t - r), &u);
        check_state(&z, i, w[1])?;
    }
    Ok(z)
}

/// Consistency sampling: predict `x_0 = z - t u(z, 0, t)`, then re-noise to
/// the next scheduled time with fresh noise (a no-op at `t = 0`).
pub fn consistency_sample<S: Scalar, M: VelocityModel<S> + ?Sized>(model: &M, req: &SampleRequest) -> Result<Tensor<S>> {
    let times = req.times()?;
    let mut z = req.initial_noise::<S>();
    // independent stream for re-noising so NFE=1 sees the same start noise
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed ^ 0x9e37_79b9_7f4a_7c15);
    for (i, w) in times.windows(2).enumerate() {
        let t = S::lit(w[0]);
        let f = guided_predict(model, &z, S::zero(), t, req)?;
        let x0 = &z - &f.scale(t);
        let e = Tensor::from_fn(x0.shape(), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            S::lit(v)
        });
        z = fm_interpolate(&x0, &e, S::lit(w[1]))?.0;
        check_state(&z, i, w[1])?;
    }
    Ok(z)
}

/// Trig-time DDIM step `x <- cos(d) x - sin(d) F(x, t_i)` with `d = t_i -
/// t_{i+1}`; `times` are trig times decreasing from `pi/2` to `0`.
pub fn trig_solver<S: Scalar, M: TrigModel<S> + ?Sized>(
    model: &M,
    mut x: Tensor<S>,
    times: &[f64],
    cond: Option<usize>,
) -> Result<Tensor<S>> {
    for (i, w) in times.windows(2).enumerate() {
        let f = model.trig_output(&x, S::lit(w[0]), cond)?;
        let (s, c) = S::lit(w[0] - w[1]).sin_cos();
        x = x.zip_map(&f, |xi, fi| c * xi - s * fi);
        check_state(&x, i, w[1])?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Fm,
    Trig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    FmEuler,
    TrigSolver,
}

/// A model tagged with the framework its outputs live in.
pub enum AnyModel<'a, S> {
    Fm(&'a dyn FmModel<S>),
    Trig(&'a dyn TrigModel<S>),
}

impl<'a, S> AnyModel<'a, S> {
    pub fn framework(&self) -> Framework {
        match self {
            AnyModel::Fm(_) => Framework::Fm,
            AnyModel::Trig(_) => Framework::Trig,
        }
    }
}

/// Runs `solver` on `model`, wrapping it into the solver's framework when
/// needed. The trig solver walks the image of the FM schedule under
/// `t -> atan(t / (1 - t))`; at `t = 1` and `t = 0` the two state scalings
/// coincide, so start noise and final samples need no conversion.
pub fn cross_framework_sample<S: Scalar>(model: AnyModel<'_, S>, solver: Solver, req: &SampleRequest) -> Result<Tensor<S>> {
    let times = req.times()?;
    let z = req.initial_noise::<S>();
    match (model, solver) {
        (AnyModel::Fm(m), Solver::FmEuler) => euler_from(m, z, &times, req),
        (AnyModel::Trig(m), Solver::FmEuler) => euler_from(&wrap_trig_model_as_fm(m), z, &times, req),
        (AnyModel::Fm(m), Solver::TrigSolver) => {
            let trig: Vec<f64> = times.iter().map(|&t| time_fm_to_trig(t)).collect();
            trig_solver(&wrap_fm_model_as_trigflow(m), z, &trig, req.cond)
        }
        (AnyModel::Trig(m), Solver::TrigSolver) => {
            let trig: Vec<f64> = times.iter().map(|&t| time_fm_to_trig(t)).collect();
            trig_solver(m, z, &trig, req.cond)
        }
    }
}

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::error::{invalid, range_err, Error, Result};
use crate::network::{TargetNet, VelocityNet, SLOT_T, SLOT_Z};
use crate::scalar::Scalar;

use super::{
    meanflow_train_loss, power_loss, row_scale, InterpolantBatch, KernelSpec, LogVarHead, LossKind, LossOutput,
    LossSpec, WeightFn,
};

/// `theta^-`: the online network itself in synced mode.
fn resolve<'a, S: Scalar>(net: &'a VelocityNet<S>, target: &'a TargetNet<S>) -> &'a VelocityNet<S> {
    if target.is_synced() {
        net
    } else {
        &target.net
    }
}

fn add_grads<S: Scalar>(acc: &mut [Tensor<S>], more: &[Tensor<S>]) {
    for (a, m) in acc.iter_mut().zip(more) {
        a.axpy(S::one(), m);
    }
}

/// Continuous-time consistency loss with `f = x_t - t F(x_t, t)`, where
/// `F(x, t) = u(x, 0, t)`.
///
/// The value is the surrogate `mean <f_theta, sg(signal)>` with
/// `signal = v - F^- - t dF^-/dt`, so its gradient is
/// `-t <grad F_theta, signal>`. With adaptive weighting the same gradient
/// direction is fed through the power metric in regression form
/// `delta = t F_theta - sg(t F_theta + signal)`.
pub fn scm_loss<S: Scalar>(
    net: &VelocityNet<S>,
    target: &TargetNet<S>,
    batch: &InterpolantBatch<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<LossOutput<S>> {
    let b = batch.batch();
    let zeros = Tensor::zeros(&[b, 1]);
    let x = net.inputs(batch.z.clone(), zeros, batch.t.clone(), &batch.conds)?;
    let graph = net.graph(b)?;
    let ones = Tensor::full(&[b, 1], S::one());
    let online_slots = net.slots(&x);
    let mut tans = vec![None; online_slots.len()];
    tans[SLOT_Z] = Some(&batch.v);
    tans[SLOT_T] = Some(&ones);

    let tnet = resolve(net, target);
    let target_slots = tnet.slots(&x);
    let (jvp_trace, dfdt) = graph.jvp_trace(&target_slots, &tans)?;
    if !dfdt.all_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite dF/dt in consistency target".into(),
        });
    }
    let f_minus = jvp_trace.output().clone();
    let online = if target.is_synced() {
        jvp_trace
    } else {
        drop(jvp_trace);
        graph.trace(&online_slots)?
    };

    let signal = &(&batch.v - &f_minus) - &row_scale(&dfdt, &batch.t);
    let (loss, seed, aux_grads) = if spec.adaptive_variance {
        let delta = signal.map(|s| -s);
        let (loss, d_delta, aux) = power_loss(&delta, &batch.t, spec, logvar)?;
        (loss, row_scale(&d_delta, &batch.t), aux)
    } else {
        let w = spec.weight_fn.column(&batch.t);
        let inv_b = S::lit(1.0 / b as f64);
        let f = &batch.z - &row_scale(online.output(), &batch.t);
        let mut loss = S::zero();
        for i in 0..b {
            let dot: S = f.row(i).iter().zip(signal.row(i)).map(|(a, s)| *a * *s).sum();
            loss += w.data()[i] * dot;
        }
        let coef = Tensor::from_fn(&[b, 1], |i| -batch.t.data()[i] * w.data()[i] * inv_b);
        (loss * inv_b, row_scale(&signal, &coef), None)
    };
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite consistency loss {loss}"),
        });
    }
    let grads = net.param_grads(&graph, &online, &seed)?;
    Ok(LossOutput {
        loss,
        grads,
        aux_grads,
        error_signal: Some(signal),
    })
}

/// Per-sample comparison of the consistency and MeanFlow (`r = 0`)
/// gradients at `theta^- = theta`.
#[derive(Clone, Debug)]
pub struct GradientRelation {
    pub t: f64,
    /// `|g_scm - t g_mf / 2| / max(|g_scm|, |t g_mf / 2|)` over all parameters.
    pub rel_err: f64,
    /// Worst elementwise relative deviation over components larger than
    /// `1e-6` of the largest one.
    pub max_component_rel_err: f64,
    pub cosine: f64,
    /// `max |signal_scm + delta_mf|`: the two error signals coincide up to
    /// sign convention.
    pub signal_diff: f64,
}

/// Checks `grad_scm = t * grad_mf` for a single-sample batch. `grad_mf` is
/// taken on the plain `|delta|^2` loss, whose derivative carries a factor 2
/// that the inner-product form lacks, so the comparison uses `grad_mf / 2`.
pub fn scm_vs_meanflow_gradient_relation<S: Scalar>(
    net: &VelocityNet<S>,
    batch: &InterpolantBatch<S>,
) -> Result<GradientRelation> {
    if batch.batch() != 1 {
        return Err(invalid("gradient relation is per-sample; pass a batch of one"));
    }
    let target = TargetNet::new(net, crate::network::TargetMode::Synced)?;
    let scm = scm_loss(net, &target, batch, &LossSpec::new(LossKind::Scm), None)?;
    let mut mf_batch = batch.clone();
    mf_batch.r = Tensor::zeros(batch.t.shape());
    let mf = meanflow_train_loss(net, &mf_batch, &LossSpec::new(LossKind::MeanflowTrain), None)?;

    let t = batch.t.data()[0].as_f64();
    let a: Vec<f64> = scm.grads.iter().flat_map(|g| g.data().iter().map(|x| x.as_f64())).collect();
    let e: Vec<f64> = mf
        .grads
        .iter()
        .flat_map(|g| g.data().iter().map(|x| 0.5 * t * x.as_f64()))
        .collect();
    let rel_err = crate::autodiff::relative_error(&a, &e);
    let big = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_component_rel_err = a
        .iter()
        .zip(&e)
        .filter(|(_, y)| y.abs() > 1e-6 * big)
        .map(|(x, y)| ((x - y) / y).abs())
        .fold(0.0, f64::max);
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = if na == 0.0 && ne == 0.0 {
        1.0
    } else {
        a.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>() / (na * ne)
    };
    let signal = scm.error_signal.expect("scm returns its signal");
    let delta = mf.error_signal.expect("meanflow returns its error");
    let signal_diff = (&signal + &delta).max_abs().as_f64();
    Ok(GradientRelation {
        t,
        rel_err,
        max_component_rel_err,
        cosine,
        signal_diff,
    })
}

/// Paired states `(x_t, t)` and `(x_r, r)` on the same interpolation path.
#[derive(Clone, Debug)]
pub struct CmBatch<S> {
    pub x_t: Tensor<S>,
    pub x_r: Tensor<S>,
    pub t: Tensor<S>,
    pub r: Tensor<S>,
    pub conds: Vec<Option<usize>>,
}

impl<S: Scalar> CmBatch<S> {
    /// Builds both states from the same data `x` and noise.
    pub fn from_data(
        x: &Tensor<S>,
        noise: &Tensor<S>,
        t: Tensor<S>,
        r: Tensor<S>,
        conds: Vec<Option<usize>>,
    ) -> Result<Self> {
        let (x_t, _) = crate::schedules::fm_interpolate_rows(x, noise, &t)?;
        let (x_r, _) = crate::schedules::fm_interpolate_rows(x, noise, &r)?;
        if conds.len() != x.rows() {
            return Err(invalid("one condition per row required"));
        }
        Ok(Self { x_t, x_r, t, r, conds })
    }
}

/// Two particles at each of times `t` and `r`, mapped to a target time `s`.
#[derive(Clone, Debug)]
pub struct ImmBatch<S> {
    pub x_t: Tensor<S>,
    pub x_t2: Tensor<S>,
    pub x_r: Tensor<S>,
    pub x_r2: Tensor<S>,
    pub s: Tensor<S>,
    pub r: Tensor<S>,
    pub t: Tensor<S>,
    pub conds: Vec<Option<usize>>,
}

impl<S: Scalar> ImmBatch<S> {
    /// Single-particle batch with target time `s = 0`.
    pub fn single_particle(cm: &CmBatch<S>) -> Self {
        Self {
            x_t: cm.x_t.clone(),
            x_t2: cm.x_t.clone(),
            x_r: cm.x_r.clone(),
            x_r2: cm.x_r.clone(),
            s: Tensor::zeros(cm.t.shape()),
            r: cm.r.clone(),
            t: cm.t.clone(),
            conds: cm.conds.clone(),
        }
    }
}

fn kernel_node<S: Scalar>(g: &mut GraphBuilder<S>, a: NodeId, b: NodeId, k: &KernelSpec) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let n = g.sum_rows(sq)?;
    match *k {
        KernelSpec::NegSqEuclid => g.scale(n, -S::one()),
        KernelSpec::Rbf { bandwidth } => {
            let e = g.scale(n, S::lit(-1.0 / (2.0 * bandwidth * bandwidth)))?;
            g.exp(e)
        }
        KernelSpec::Laplace { bandwidth } => {
            // tiny offset keeps the distance differentiable at coincidence
            let n = g.add_scalar(n, S::lit(1e-12))?;
            let r = g.sqrt(n)?;
            let e = g.scale(r, S::lit(-1.0 / bandwidth))?;
            g.exp(e)
        }
    }
}

/// Inductive moment matching with the pushforward
/// `f_{s,t}(x) = x - (t - s) u(x, s, t)`, which equals `x` at `s = t` and the
/// consistency map `g(x, t)` at `s = 0`. The `r`-time particles go through
/// `theta^-`.
pub fn imm_loss<S: Scalar>(
    net: &VelocityNet<S>,
    target: &TargetNet<S>,
    batch: &ImmBatch<S>,
    kernel: &KernelSpec,
    weight: WeightFn,
) -> Result<LossOutput<S>> {
    kernel.validate()?;
    let b = batch.t.rows();
    for i in 0..b {
        let (s, r, t) = (batch.s.data()[i], batch.r.data()[i], batch.t.data()[i]);
        if !(s >= S::zero() && s < r && r < t) {
            return Err(range_err(format!("row {i}: need 0 <= s < r < t, got s={s}, r={r}, t={t}")));
        }
    }
    let d = batch.x_t.cols();
    let graph = net.graph(b)?;
    let span_t = &batch.t - &batch.s;
    let span_r = &batch.r - &batch.s;

    let in_a = net.inputs(batch.x_t.clone(), batch.s.clone(), batch.t.clone(), &batch.conds)?;
    let in_a2 = net.inputs(batch.x_t2.clone(), batch.s.clone(), batch.t.clone(), &batch.conds)?;
    let slots_a = net.slots(&in_a);
    let slots_a2 = net.slots(&in_a2);
    let tr_a = graph.trace(&slots_a)?;
    let tr_a2 = graph.trace(&slots_a2)?;
    let y_a = &batch.x_t - &row_scale(tr_a.output(), &span_t);
    let y_a2 = &batch.x_t2 - &row_scale(tr_a2.output(), &span_t);

    let tnet = resolve(net, target);
    let y_b = &batch.x_r - &row_scale(&tnet.forward_rows(&batch.x_r, &batch.s, &batch.r, &batch.conds)?, &span_r);
    let y_b2 = &batch.x_r2 - &row_scale(&tnet.forward_rows(&batch.x_r2, &batch.s, &batch.r, &batch.conds)?, &span_r);

    let head = {
        let mut g = GraphBuilder::new();
        let a = g.input(&[b, d]);
        let a2 = g.input(&[b, d]);
        let c = g.input(&[b, d]);
        let c2 = g.input(&[b, d]);
        let w = g.input(&[b, 1]);
        let k1 = kernel_node(&mut g, a, a2, kernel)?;
        let k2 = kernel_node(&mut g, c, c2, kernel)?;
        let k3 = kernel_node(&mut g, a, c2, kernel)?;
        let k4 = kernel_node(&mut g, a2, c, kernel)?;
        let pos = g.add(k1, k2)?;
        let neg = g.add(k3, k4)?;
        let per = g.sub(pos, neg)?;
        let per = g.mul(per, w)?;
        let total = g.sum_all(per)?;
        let mean = g.scale(total, S::lit(1.0 / b as f64))?;
        g.finish(mean)?
    };
    let w = weight.column(&batch.t);
    let head_trace = head.trace(&[&y_a, &y_a2, &y_b, &y_b2, &w])?;
    let loss = head_trace.output().data()[0];
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite IMM loss {loss}"),
        });
    }
    let hg = head.backward_trace(
        &head_trace,
        &Tensor::scalar(S::one()),
        Some(&[true, true, false, false, false]),
    )?;
    let neg_span = span_t.map(|x| -x);
    let mut grads = net.param_grads(&graph, &tr_a, &row_scale(&hg[0], &neg_span))?;
    add_grads(&mut grads, &net.param_grads(&graph, &tr_a2, &row_scale(&hg[1], &neg_span))?);
    Ok(LossOutput {
        loss,
        grads,
        aux_grads: None,
        error_signal: Some(&y_a - &y_b),
    })
}

/// Discrete-time consistency loss `mean w(t) |g(x_t, t) - g^-(x_r, r)|^2`
/// with `g(x, t) = x - t u(x, 0, t)`.
pub fn cm_loss<S: Scalar>(
    net: &VelocityNet<S>,
    target: &TargetNet<S>,
    batch: &CmBatch<S>,
    weight: WeightFn,
) -> Result<LossOutput<S>> {
    let b = batch.t.rows();
    for i in 0..b {
        if !(batch.r.data()[i] <= batch.t.data()[i]) {
            return Err(range_err(format!("row {i}: r exceeds t")));
        }
    }
    let zeros = Tensor::zeros(&[b, 1]);
    let graph = net.graph(b)?;
    let x = net.inputs(batch.x_t.clone(), zeros.clone(), batch.t.clone(), &batch.conds)?;
    let slots = net.slots(&x);
    let trace = graph.trace(&slots)?;
    let g_on = &batch.x_t - &row_scale(trace.output(), &batch.t);
    let tnet = resolve(net, target);
    let g_tg = &batch.x_r - &row_scale(&tnet.forward_rows(&batch.x_r, &zeros, &batch.r, &batch.conds)?, &batch.r);
    let delta = &g_on - &g_tg;
    let w = weight.column(&batch.t);
    let inv_b = S::lit(1.0 / b as f64);
    let loss = (0..b)
        .map(|i| w.data()[i] * delta.row(i).iter().map(|x| *x * *x).sum::<S>())
        .sum::<S>()
        * inv_b;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite CM loss {loss}"),
        });
    }
    let coef = Tensor::from_fn(&[b, 1], |i| -S::lit(2.0) * batch.t.data()[i] * w.data()[i] * inv_b);
    let grads = net.param_grads(&graph, &trace, &row_scale(&delta, &coef))?;
    Ok(LossOutput {
        loss,
        grads,
        aux_grads: None,
        error_signal: Some(delta),
    })
}

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::network::{VelocityNet, SLOT_T, SLOT_Z};
use crate::scalar::Scalar;

use super::{power_loss, row_scale, InterpolantBatch, JvpTangent, LogVarHead, LossKind, LossOutput, LossSpec};

/// Flow matching: regress `u(z, t, t)` onto `v = e - x`.
pub fn fm_loss<S: Scalar>(
    net: &VelocityNet<S>,
    batch: &InterpolantBatch<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<LossOutput<S>> {
    let b = batch.batch();
    let x = net.inputs(batch.z.clone(), batch.t.clone(), batch.t.clone(), &batch.conds)?;
    let graph = net.graph(b)?;
    let trace = graph.trace(&net.slots(&x))?;
    let delta = trace.output() - &batch.v;
    let (loss, seed, aux_grads) = power_loss(&delta, &batch.t, spec, logvar)?;
    let grads = net.param_grads(&graph, &trace, &seed)?;
    Ok(LossOutput {
        loss,
        grads,
        aux_grads,
        error_signal: Some(delta),
    })
}

/// Shared MeanFlow machinery: `(u, du/dt) = jvp(u, (z, r, t), (tangent, 0, 1))`
/// and `u_tgt = v_target - (t - r) du/dt` under stop-gradient.
fn meanflow_core<S: Scalar>(
    net: &VelocityNet<S>,
    batch: &InterpolantBatch<S>,
    v_target: &Tensor<S>,
    tangent: &Tensor<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<LossOutput<S>> {
    let b = batch.batch();
    let x = net.inputs(batch.z.clone(), batch.r.clone(), batch.t.clone(), &batch.conds)?;
    let graph = net.graph(b)?;
    let slots = net.slots(&x);
    let ones = Tensor::full(&[b, 1], S::one());
    let mut tans = vec![None; slots.len()];
    tans[SLOT_Z] = Some(tangent);
    tans[SLOT_T] = Some(&ones);
    let (trace, dudt) = graph.jvp_trace(&slots, &tans)?;
    if let Some(row) = (0..b).find(|&i| dudt.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            step: 0,
            detail: format!(
                "non-finite du/dt at t = {}, r = {}",
                batch.t.data()[row],
                batch.r.data()[row]
            ),
        });
    }
    let span = &batch.t - &batch.r;
    let u_tgt = v_target - &row_scale(&dudt, &span);
    let delta = trace.output() - &u_tgt;
    let (loss, seed, aux_grads) = power_loss(&delta, &batch.t, spec, logvar)?;
    let grads = net.param_grads(&graph, &trace, &seed)?;
    Ok(LossOutput {
        loss,
        grads,
        aux_grads,
        error_signal: Some(delta),
    })
}

/// MeanFlow training on data: target `v - (t - r) du/dt`.
pub fn meanflow_train_loss<S: Scalar>(
    net: &VelocityNet<S>,
    batch: &InterpolantBatch<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<LossOutput<S>> {
    meanflow_core(net, batch, &batch.v, &batch.v, spec, logvar)
}

/// Teacher velocity used as a regression target: raw conditional output when
/// `omega == 0`, guided otherwise (improved mixing when `kappa > 0`).
pub fn teacher_target<S: Scalar>(
    net: &VelocityNet<S>,
    teacher: &VelocityNet<S>,
    z: &Tensor<S>,
    t: &Tensor<S>,
    conds: &[Option<usize>],
    spec: &LossSpec,
) -> Result<Tensor<S>> {
    if spec.omega == 0.0 {
        teacher.forward_rows(z, t, t, conds)
    } else if spec.kappa == 0.0 {
        cfg_teacher_velocity(teacher, z, t, conds, S::lit(spec.omega))
    } else {
        improved_cfg_target(teacher, net, z, t, conds, S::lit(spec.omega), S::lit(spec.kappa))
    }
}

/// MeanFlow distillation: as [`meanflow_train_loss`] with the teacher's
/// velocity in place of `v` in the target. The JVP direction follows
/// `spec.tangent`.
pub fn meanflow_distill_loss<S: Scalar>(
    net: &VelocityNet<S>,
    teacher: &VelocityNet<S>,
    batch: &InterpolantBatch<S>,
    spec: &LossSpec,
    logvar: Option<&LogVarHead<S>>,
) -> Result<LossOutput<S>> {
    if spec.kind != LossKind::MeanflowDistill {
        return Err(invalid(format!("{:?} spec passed to meanflow_distill_loss", spec.kind)));
    }
    let v_teacher = teacher_target(net, teacher, &batch.z, &batch.t, &batch.conds, spec)?;
    let tangent = match spec.tangent {
        JvpTangent::Interpolant => &batch.v,
        JvpTangent::Teacher => &v_teacher,
    };
    meanflow_core(net, batch, &v_teacher, tangent, spec, logvar)
}

/// `v_u + omega (v_c - v_u)`; exactly `v_c` at `omega = 1` and `v_u` at
/// `omega = 0`.
pub fn cfg_teacher_velocity<S: Scalar>(
    teacher: &VelocityNet<S>,
    z: &Tensor<S>,
    t: &Tensor<S>,
    conds: &[Option<usize>],
    omega: S,
) -> Result<Tensor<S>> {
    let nulls = vec![None; conds.len()];
    if omega == S::one() {
        return teacher.forward_rows(z, t, t, conds);
    }
    let v_u = teacher.forward_rows(z, t, t, &nulls)?;
    if omega == S::zero() {
        return Ok(v_u);
    }
    let v_c = teacher.forward_rows(z, t, t, conds)?;
    Ok(v_u.zip_map(&v_c, |u, c| u + omega * (c - u)))
}

/// `omega v_c + (1 - omega - kappa) v_u + kappa sg(u_student(z, t, t))`;
/// reduces to [`cfg_teacher_velocity`] at `kappa = 0`.
pub fn improved_cfg_target<S: Scalar>(
    teacher: &VelocityNet<S>,
    student: &VelocityNet<S>,
    z: &Tensor<S>,
    t: &Tensor<S>,
    conds: &[Option<usize>],
    omega: S,
    kappa: S,
) -> Result<Tensor<S>> {
    if kappa == S::zero() {
        return cfg_teacher_velocity(teacher, z, t, conds, omega);
    }
    let nulls = vec![None; conds.len()];
    let v_c = teacher.forward_rows(z, t, t, conds)?;
    let v_u = teacher.forward_rows(z, t, t, &nulls)?;
    let u_s = student.forward_rows(z, t, t, conds)?;
    let cu = S::one() - omega - kappa;
    let mut out = v_c.scale(omega);
    out.axpy(cu, &v_u);
    out.axpy(kappa, &u_s);
    Ok(out)
}

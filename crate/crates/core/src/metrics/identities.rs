//! Mechanical checks of the cross-method identities on fresh random networks.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::network::{init_velocity_net, NetConfig, TargetMode, TargetNet, VelocityNet};
use crate::objectives::{
    cm_loss, fm_loss, imm_loss, meanflow_train_loss, scm_vs_meanflow_gradient_relation, CmBatch, ImmBatch,
    InterpolantBatch, KernelSpec, LossKind, LossSpec, WeightFn,
};
use crate::samplers::{cross_framework_sample, AnyModel, SampleRequest, Solver};
use crate::schedules::{
    fm_interpolate, fm_state_scale, state_fm_to_trig, state_trig_to_fm, time_fm_to_trig, time_trig_to_fm,
    trig_interpolate, wrap_fm_model_as_trigflow, wrap_trig_model_as_fm, FmModel, FmState, TrigFn, TrigModel,
    TrigState,
};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn within(name: &'static str, max_error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            detail,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl IdentityReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for IdentityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12} {:>10}  result", "suite", "max_error", "tolerance")?;
        for s in &self.suites {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>10.1e}  {}  {}",
                s.name,
                s.max_error,
                s.tolerance,
                if s.passed { "PASS" } else { "FAIL" },
                s.detail
            )?;
        }
        Ok(())
    }
}

fn probe_net(seed: u64) -> Result<VelocityNet<f64>> {
    init_velocity_net(
        NetConfig {
            dim: 2,
            hidden: 32,
            depth: 3,
            n_classes: 3,
            t_scale: 1.0,
            dual_time: true,
        },
        seed,
    )
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

fn random_cond(rng: &mut ChaCha8Rng) -> Option<usize> {
    match rng.gen_range(0..4) {
        3 => None,
        k => Some(k),
    }
}

fn round_trips(rng: &mut ChaCha8Rng) -> Result<(SuiteResult, SuiteResult)> {
    let n = 1000;
    let mut err = 0.0f64;
    let mut snr = 0.0f64;
    let upd = |e: f64, acc: &mut f64| *acc = acc.max(if e.is_nan() { f64::INFINITY } else { e });
    let x = normal(rng, &[4, 2], 1.0);
    let e = normal(rng, &[4, 2], 1.0);
    for i in 0..n {
        let th = (i as f64 + 0.5) / n as f64 * FRAC_PI_2;
        let t = time_trig_to_fm(th);
        upd((time_fm_to_trig(t) - th).abs(), &mut err);
        let tg = i as f64 / (n - 1) as f64;
        upd((time_trig_to_fm(time_fm_to_trig(tg)) - tg).abs(), &mut err);

        let ts = TrigState::new(x.clone(), th)?;
        let back = state_fm_to_trig(&state_trig_to_fm(&ts));
        upd(back.x.max_abs_diff(&x), &mut err);
        upd((back.t_trig - th).abs(), &mut err);
        let fs = FmState::new(x.clone(), tg)?;
        let back = state_trig_to_fm(&state_fm_to_trig(&fs));
        upd(back.z.max_abs_diff(&x), &mut err);
        upd((back.t_fm - tg).abs(), &mut err);

        // cos/sin/sum identities expressed through the FM time
        let s = fm_state_scale(t);
        upd((th.cos() - (1.0 - t) / s).abs(), &mut err);
        upd((th.sin() - t / s).abs(), &mut err);
        upd((th.cos() + th.sin() - 1.0 / s).abs(), &mut err);

        // interpolants agree after the state map
        let xt = trig_interpolate(&x, &e, th)?;
        let mapped = state_trig_to_fm(&TrigState::new(xt, th)?);
        let (z, _) = fm_interpolate(&x, &e, t)?;
        upd(mapped.z.max_abs_diff(&z), &mut err);

        let snr_trig = (th.cos() / th.sin()).powi(2);
        let snr_fm = ((1.0 - t) / t).powi(2);
        upd(((snr_fm - snr_trig) / snr_trig).abs(), &mut snr);
    }
    for (th, t) in [(0.0, 0.0), (FRAC_PI_2, 1.0)] {
        upd((time_trig_to_fm(th) - t).abs(), &mut err);
        upd((time_fm_to_trig(t) - th).abs(), &mut err);
    }
    Ok((
        SuiteResult::within(
            "time_state_round_trip",
            err,
            1e-12,
            format!("{n}-point grids: time maps, state maps, trig identities, interpolants"),
        ),
        SuiteResult::within("snr_preservation", snr, 1e-9, format!("{n}-point interior grid")),
    ))
}

fn double_wrap(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    let net = probe_net(seed)?;
    let trig_net = probe_net(seed + 1)?;
    let trig = TrigFn(|x: &Tensor<f64>, th: f64, c| trig_net.forward_velocity(x, th / FRAC_PI_2, th / FRAC_PI_2, c));
    let v_round = wrap_trig_model_as_fm(wrap_fm_model_as_trigflow(&net));
    let f_round = wrap_fm_model_as_trigflow(wrap_trig_model_as_fm(&trig));
    let mut err = 0.0f64;
    let cases = 100;
    for _ in 0..cases {
        let z = normal(rng, &[1, 2], 2.0);
        let t: f64 = rng.gen();
        let c = random_cond(rng);
        let a = net.velocity(&z, t, c)?;
        let b = v_round.velocity(&z, t, c)?;
        err = err.max(a.max_abs_diff(&b));
        let th = t * FRAC_PI_2;
        let a = trig.trig_output(&z, th, c)?;
        let b = f_round.trig_output(&z, th, c)?;
        err = err.max(a.max_abs_diff(&b));
    }
    Ok(SuiteResult::within(
        "double_wrap",
        err,
        1e-10,
        format!("{cases} random inputs, both wrap orders"),
    ))
}

fn cross_sampling(seed: u64) -> Result<SuiteResult> {
    let net = probe_net(seed + 2)?;
    let mut err = 0.0f64;
    let mut per = Vec::new();
    for nfe in [1usize, 2, 4, 8] {
        let mut req = SampleRequest::new(64, 2, nfe, seed);
        req.cond = Some(1);
        let a = cross_framework_sample(AnyModel::Fm(&net), Solver::FmEuler, &req)?;
        let b = cross_framework_sample(AnyModel::Fm(&net), Solver::TrigSolver, &req)?;
        let d = a.max_abs_diff(&b);
        per.push(format!("nfe{nfe}={d:.1e}"));
        err = err.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    Ok(SuiteResult::within("cross_framework_sampling", err, 1e-6, per.join(" ")))
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, r_zero: bool) -> Result<InterpolantBatch<f64>> {
    let x = normal(rng, &[b, 2], 1.5);
    let t: Vec<f64> = (0..b).map(|_| rng.gen()).collect();
    let r: Vec<f64> = t.iter().map(|&ti| if r_zero { 0.0 } else { ti * rng.gen::<f64>() }).collect();
    let conds = (0..b).map(|_| random_cond(rng)).collect();
    InterpolantBatch::sample(x, Tensor::column(t), Tensor::column(r), conds, rng)
}

fn fm_meanflow(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut bitwise = true;
    let cases = 5;
    for i in 0..cases {
        let net = probe_net(seed + 10 + i)?;
        let batch = random_batch(rng, 16, false)?.with_r_equal_t();
        for gamma in [1.0, 2.0] {
            let spec = LossSpec {
                gamma,
                ..LossSpec::new(LossKind::MeanflowTrain)
            };
            let a = meanflow_train_loss(&net, &batch, &spec, None)?;
            let b = fm_loss(&net, &batch, &spec, None)?;
            bitwise &= a.loss.to_bits() == b.loss.to_bits();
            worst = worst.max((a.loss - b.loss).abs());
            for (ga, gb) in a.grads.iter().zip(&b.grads) {
                bitwise &= ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits());
                worst = worst.max(ga.max_abs_diff(gb));
            }
        }
    }
    Ok(SuiteResult {
        name: "fm_meanflow_reduction",
        max_error: worst,
        tolerance: 0.0,
        passed: bitwise,
        detail: format!("{cases} batches x gamma in {{1, 2}}: losses and gradients bitwise"),
    })
}

fn gradient_relation(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut signal = 0.0f64;
    let cases = 20;
    for i in 0..cases {
        let net = probe_net(seed + 100 + i)?;
        let batch = random_batch(rng, 1, true)?;
        let rel = scm_vs_meanflow_gradient_relation(&net, &batch)?;
        worst = worst.max(if rel.rel_err.is_nan() { f64::INFINITY } else { rel.rel_err });
        signal = signal.max(rel.signal_diff);
    }
    Ok(SuiteResult::within(
        "scm_meanflow_gradient",
        worst,
        1e-8,
        format!("{cases} random (theta, x_t, t); error signals differ by {signal:.1e}"),
    ))
}

fn imm_cm(rng: &mut ChaCha8Rng, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let cases = 10;
    for i in 0..cases {
        let net = probe_net(seed + 200 + i)?;
        let target = TargetNet::new(&probe_net(seed + 300 + i)?, TargetMode::Ema { decay: 0.99 })?;
        let b = 8;
        let x = normal(rng, &[b, 2], 1.5);
        let e = normal(rng, &[b, 2], 1.0);
        let t: Vec<f64> = (0..b).map(|_| rng.gen_range(0.05..1.0)).collect();
        let r: Vec<f64> = t.iter().map(|&ti| rng.gen_range(0.01..ti)).collect();
        let conds = (0..b).map(|_| random_cond(rng)).collect();
        let cm = CmBatch::from_data(&x, &e, Tensor::column(t), Tensor::column(r), conds)?;
        let imm = ImmBatch::single_particle(&cm);
        let weight = if i % 2 == 0 { WeightFn::Unit } else { WeightFn::Linear };
        let a = imm_loss(&net, &target, &imm, &KernelSpec::NegSqEuclid, weight)?;
        let c = cm_loss(&net, &target, &cm, weight)?;
        let d = (a.loss - 2.0 * c.loss).abs() / (2.0 * c.loss).abs().max(1.0);
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    Ok(SuiteResult::within(
        "imm_cm_reduction",
        worst,
        1e-10,
        format!("{cases} random batches, single particle, s = 0"),
    ))
}

/// Runs every identity suite. Evaluation failures are reported as failed
/// entries rather than errors.
pub fn identity_report(seed: u64) -> IdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suites = Vec::new();
    let failed = |name: &'static str, e: crate::Error| SuiteResult {
        name,
        max_error: f64::INFINITY,
        tolerance: 0.0,
        passed: false,
        detail: format!("error: {e}"),
    };
    match round_trips(&mut rng) {
        Ok((a, b)) => suites.extend([a, b]),
        Err(e) => suites.push(failed("time_state_round_trip", e)),
    }
    suites.push(double_wrap(&mut rng, seed).unwrap_or_else(|e| failed("double_wrap", e)));
    suites.push(cross_sampling(seed).unwrap_or_else(|e| failed("cross_framework_sampling", e)));
    suites.push(fm_meanflow(&mut rng, seed).unwrap_or_else(|e| failed("fm_meanflow_reduction", e)));
    suites.push(gradient_relation(&mut rng, seed).unwrap_or_else(|e| failed("scm_meanflow_gradient", e)));
    suites.push(imm_cm(&mut rng, seed).unwrap_or_else(|e| failed("imm_cm_reduction", e)));
    IdentityReport { seed, suites }
}

use std::f64::consts::FRAC_PI_2;

use fewstep::autodiff::Tensor;
use fewstep::metrics::{mmd2, solve_assignment, wasserstein2_exact};
use fewstep::network::{init_velocity_net, NetConfig, TargetMode, TargetNet, VelocityNet};
use fewstep::objectives::{
    cm_loss, fm_loss, imm_loss, meanflow_train_loss, CmBatch, ImmBatch, InterpolantBatch, KernelSpec, LossKind,
    LossSpec, WeightFn,
};
use fewstep::samplers::{
    consistency_sample, cross_framework_sample, euler_fm_sample, meanflow_sample, validate_schedule, AnyModel,
    CountingModel, SampleRequest, Solver,
};
use fewstep::schedules::{
    fm_interpolate, state_trig_to_fm, time_fm_to_trig, time_trig_to_fm, trig_interpolate, wrap_fm_model_as_trigflow,
    wrap_trig_model_as_fm, FmModel, TrigState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

fn small_net(seed: u64) -> VelocityNet<f64> {
    init_velocity_net(
        NetConfig {
            dim: 2,
            hidden: 16,
            depth: 2,
            n_classes: 3,
            t_scale: 1.0,
            dual_time: true,
        },
        seed,
    )
    .unwrap()
}

fn conds(rng: &mut ChaCha8Rng, b: usize) -> Vec<Option<usize>> {
    (0..b).map(|_| rng.gen_range(0..4)).map(|k| (k < 3).then_some(k)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn snr_and_trig_identities(th in 1e-6f64..(FRAC_PI_2 - 1e-6)) {
        let t = time_trig_to_fm(th);
        let snr_trig = (th.cos() / th.sin()).powi(2);
        let snr_fm = ((1.0 - t) / t).powi(2);
        prop_assert!(((snr_fm - snr_trig) / snr_trig).abs() < 1e-9);
        let s = (t * t + (1.0 - t) * (1.0 - t)).sqrt();
        prop_assert!((th.cos() - (1.0 - t) / s).abs() < 1e-12);
        prop_assert!((th.sin() - t / s).abs() < 1e-12);
        prop_assert!((th.cos() + th.sin() - 1.0 / s).abs() < 1e-12);
        prop_assert!((time_fm_to_trig(t) - th).abs() < 1e-12);
    }

    #[test]
    fn interpolants_agree_after_state_map(th in 0.0f64..=FRAC_PI_2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[5, 2], 2.0);
        let e = randn(&mut rng, &[5, 2], 1.0);
        let xt = trig_interpolate(&x, &e, th).unwrap();
        let mapped = state_trig_to_fm(&TrigState::new(xt, th).unwrap());
        let (z, _) = fm_interpolate(&x, &e, time_trig_to_fm(th)).unwrap();
        prop_assert!(mapped.z.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn wrappers_are_mutual_inverses(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = small_net(seed % 17);
        let z = randn(&mut rng, &[3, 2], 2.0);
        let c = conds(&mut rng, 1)[0];
        let round = wrap_trig_model_as_fm(wrap_fm_model_as_trigflow(&net));
        let d = net.velocity(&z, t, c).unwrap().max_abs_diff(&round.velocity(&z, t, c).unwrap());
        prop_assert!(d < 1e-10, "{}", d);
    }

    #[test]
    fn cross_framework_sampling_holds_on_random_nets(seed in 0u64..1000, k in 0usize..4) {
        let nfe = [1, 2, 4, 8][k];
        let net = small_net(seed);
        let req = SampleRequest::new(16, 2, nfe, seed);
        let a = cross_framework_sample(AnyModel::Fm(&net), Solver::FmEuler, &req).unwrap();
        let b = cross_framework_sample(AnyModel::Fm(&net), Solver::TrigSolver, &req).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn meanflow_with_r_equal_t_is_fm(seed in any::<u64>(), g in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = small_net(seed % 7);
        let b = 6;
        let x = randn(&mut rng, &[b, 2], 1.5);
        let t = Tensor::column((0..b).map(|_| rng.gen::<f64>()).collect());
        let c = conds(&mut rng, b);
        let batch = InterpolantBatch::sample(x, t.clone(), t, c, &mut rng).unwrap();
        let spec = LossSpec { gamma: [0.5, 1.0, 2.0][g], ..LossSpec::new(LossKind::MeanflowTrain) };
        let a = meanflow_train_loss(&net, &batch, &spec, None).unwrap();
        let f = fm_loss(&net, &batch, &spec, None).unwrap();
        prop_assert_eq!(a.loss.to_bits(), f.loss.to_bits());
        prop_assert_eq!(a.grads, f.grads);
        prop_assert!(a.loss >= 0.0);
    }

    #[test]
    fn imm_reduces_to_twice_cm(seed in any::<u64>(), linear in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = small_net(seed % 5);
        let target = TargetNet::new(&small_net(seed % 5 + 100), TargetMode::Ema { decay: 0.9 }).unwrap();
        let b = 5;
        let x = randn(&mut rng, &[b, 2], 1.5);
        let e = randn(&mut rng, &[b, 2], 1.0);
        let t: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..1.0)).collect();
        let r: Vec<f64> = t.iter().map(|ti| rng.gen_range(0.01..*ti)).collect();
        let cm = CmBatch::from_data(&x, &e, Tensor::column(t), Tensor::column(r), conds(&mut rng, b)).unwrap();
        let w = if linear { WeightFn::Linear } else { WeightFn::Unit };
        let i = imm_loss(&net, &target, &ImmBatch::single_particle(&cm), &KernelSpec::NegSqEuclid, w).unwrap();
        let c = cm_loss(&net, &target, &cm, w).unwrap();
        prop_assert!((i.loss - 2.0 * c.loss).abs() <= 1e-10 * (1.0 + c.loss.abs()));
        prop_assert!(c.loss >= 0.0 && i.loss >= 0.0);
    }

    #[test]
    fn mmd_is_symmetric(seed in any::<u64>(), n in 2usize..40, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[n, 2], 1.0);
        let y = randn(&mut rng, &[m, 2], 1.5);
        let a = mmd2(&x, &y, None).unwrap();
        let b = mmd2(&y, &x, None).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn assignment_matches_permutation_search(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let (best, perm) = solve_assignment(&cost, n).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut brute = f64::INFINITY;
        permute(&mut idx, 0, &mut |p| {
            brute = brute.min(p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum());
        });
        let via_perm: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        prop_assert!((best - brute).abs() <= 1e-9 && (via_perm - brute).abs() <= 1e-9);
    }
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn mmd_shrinks_as_the_sample_covers_the_population() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pop = randn(&mut rng, &[800, 2], 1.0);
    let mut order: Vec<usize> = (0..800).collect();
    for i in (1..800).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let take = |n: usize| Tensor::from_fn(&[n, 2], |k| pop.data()[2 * order[k / 2] + k % 2]);
    let kernel = Some(KernelSpec::Rbf { bandwidth: 1.0 });
    let v: Vec<f64> = [50, 200, 800].iter().map(|&n| mmd2(&take(n), &pop, kernel).unwrap()).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    assert!(v[2] < 1e-12);
}

#[test]
fn w2_of_singletons_is_their_distance() {
    let a = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    assert!((wasserstein2_exact(&a, &b).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn nfe_accounting_is_exact() {
    let net = small_net(3);
    for nfe in [1, 2, 4, 8] {
        for (cond, omega, per) in [(None, 1.0, 1), (Some(1), 1.0, 1), (Some(1), 2.5, 2)] {
            let mut req = SampleRequest::new(4, 2, nfe, 1);
            req.cond = cond;
            req.omega = omega;
            let m = CountingModel::new(&net);
            euler_fm_sample(&m, &req).unwrap();
            assert_eq!(m.calls(), nfe * per);
            let m = CountingModel::new(&net);
            meanflow_sample(&m, &req).unwrap();
            assert_eq!(m.calls(), nfe * per);
            let m = CountingModel::new(&net);
            consistency_sample(&m, &req).unwrap();
            assert_eq!(m.calls(), nfe * per);
            assert_eq!(req.expected_calls(), nfe * per);
        }
    }
}

#[test]
fn samples_are_bitwise_reproducible() {
    let net = small_net(4);
    let req = SampleRequest::new(32, 2, 3, 9);
    let bits = |t: Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(euler_fm_sample(&net, &req).unwrap()), bits(euler_fm_sample(&net, &req).unwrap()));
    assert_eq!(bits(consistency_sample(&net, &req).unwrap()), bits(consistency_sample(&net, &req).unwrap()));
}

#[test]
fn schedules_must_be_strict_and_pinned() {
    assert!(validate_schedule(&[1.0, 0.5, 0.0]).is_ok());
    assert!(validate_schedule(&[1.0, 0.5, 0.5, 0.0]).is_err());
    assert!(validate_schedule(&[0.9, 0.0]).is_err());
    assert!(validate_schedule(&[1.0, 0.1]).is_err());
    assert!(validate_schedule(&[1.0, 1.2, 0.0]).is_err());
}

#[test]
fn output_is_smooth_in_time() {
    let net = small_net(8);
    let z = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut t = 0.01;
    while t <= 0.99 {
        let f = |s: f64| net.forward_velocity(&z, s, s, Some(1)).unwrap();
        let second = &(&f(t + h) - &f(t).scale(2.0)) + &f(t - h);
        worst = worst.max(second.max_abs() / (h * h));
        t += 0.01;
    }
    assert!(worst.is_finite() && worst < 1e3, "second derivative bound {worst}");
}

/// Finite differences on the online parameters (target held fixed) match
/// the analytic gradient; moving the target moves the loss value only.
#[test]
fn target_branch_is_stop_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = small_net(1);
    let target = TargetNet::new(&small_net(2), TargetMode::Ema { decay: 0.5 }).unwrap();
    let b = 4;
    let x = randn(&mut rng, &[b, 2], 1.0);
    let e = randn(&mut rng, &[b, 2], 1.0);
    let cm = CmBatch::from_data(
        &x,
        &e,
        Tensor::column(vec![0.9, 0.6, 0.4, 0.8]),
        Tensor::column(vec![0.5, 0.3, 0.1, 0.7]),
        vec![Some(0), None, Some(2), Some(1)],
    )
    .unwrap();
    let base = cm_loss(&net, &target, &cm, WeightFn::Unit).unwrap();
    let h = 1e-6;
    for (pi, k) in [(0usize, 3usize), (5, 1), (net.params().len() - 2, 4)] {
        let mut plus = net.clone();
        plus.params_mut()[pi].data_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[pi].data_mut()[k] -= h;
        let fd = (cm_loss(&plus, &target, &cm, WeightFn::Unit).unwrap().loss
            - cm_loss(&minus, &target, &cm, WeightFn::Unit).unwrap().loss)
            / (2.0 * h);
        let an = base.grads[pi].data()[k];
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
    }
    let moved = TargetNet::new(&small_net(3), TargetMode::Ema { decay: 0.5 }).unwrap();
    let other = cm_loss(&net, &moved, &cm, WeightFn::Unit).unwrap();
    assert_ne!(other.loss, base.loss);
}

#[test]
fn fold_keeps_the_function_after_training_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = small_net(6);
    let spec = LossSpec::new(LossKind::Fm);
    for _ in 0..20 {
        let x = randn(&mut rng, &[8, 2], 1.0);
        let t = Tensor::column((0..8).map(|_| rng.gen::<f64>()).collect());
        let batch = InterpolantBatch::sample(x, t.clone(), t, conds(&mut rng, 8), &mut rng).unwrap();
        let out = fm_loss(&net, &batch, &spec, None).unwrap();
        for (p, g) in net.params_mut().iter_mut().zip(&out.grads) {
            p.axpy(-0.05, g);
        }
    }
    let folded = net.fold_dt_branch().unwrap();
    assert!(!folded.config().dual_time);
    let z = randn(&mut rng, &[16, 2], 1.0);
    for t in [0.0, 0.3, 1.0] {
        for c in [None, Some(2)] {
            let a = net.forward_velocity(&z, t, t, c).unwrap();
            let b = folded.forward_velocity(&z, t, t, c).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}

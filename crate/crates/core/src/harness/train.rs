//! Training loop shared by every objective.

use std::fs;
use std::io::Write;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::data::{gen_dataset, Dataset};
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::metrics::{nfe_sweep, write_csv, MetricReport, ModelEntry, SamplerKind, SweepConfig};
use crate::network::{init_velocity_net, Optimizer, TargetMode, TargetNet, VelocityNet};
use crate::objectives::{
    cm_loss, fm_loss, imm_loss, meanflow_distill_loss, meanflow_train_loss, scm_loss, teacher_target, CmBatch,
    ImmBatch, InterpolantBatch, LogVarHead, LossKind, LossOutput,
};
use crate::schedules::sample_t_r_batch;

pub const CHECKPOINT_FILE: &str = "checkpoint.fslb";
pub const LAST_GOOD_FILE: &str = "last_good.fslb";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

const DATA_SALT: u64 = 0xd47a_5eed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// Final network, or the last parameters with a finite loss when the
    /// run diverged.
    pub net: VelocityNet<f64>,
    pub log: Vec<LogRecord>,
    pub metrics: Vec<MetricReport>,
    pub diverged: Option<(usize, String)>,
}

/// Sampler matching an objective's model type.
pub fn sampler_for(kind: LossKind) -> SamplerKind {
    match kind {
        LossKind::Fm => SamplerKind::Euler,
        LossKind::MeanflowTrain | LossKind::MeanflowDistill => SamplerKind::MeanFlow,
        LossKind::Scm | LossKind::Imm | LossKind::Cm => SamplerKind::Consistency,
    }
}

fn initial_net(cfg: &RunConfig, teacher: Option<&VelocityNet<f64>>) -> Result<VelocityNet<f64>> {
    match teacher {
        Some(t) if cfg.init_from_teacher => {
            if t.config() != &cfg.net {
                return Err(invalid(format!(
                    "student starts from the teacher but configs differ: {:?} vs {:?}",
                    cfg.net,
                    t.config()
                )));
            }
            Ok(t.clone())
        }
        _ => init_velocity_net(cfg.net, cfg.seed),
    }
}

struct Sampler<'a> {
    data: &'a Dataset,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn draw(&mut self, cfg: &RunConfig) -> (Tensor<f64>, Tensor<f64>, Vec<Option<usize>>) {
        let b = cfg.batch;
        let n = self.data.points.rows();
        let mut x = Tensor::zeros(&[b, 2]);
        let mut conds = Vec::with_capacity(b);
        for i in 0..b {
            let j = self.rng.gen_range(0..n);
            x.row_mut(i).copy_from_slice(self.data.points.row(j));
            let drop = self.rng.gen::<f64>() < cfg.cfg_dropout;
            conds.push((cfg.net.n_classes > 0 && !drop).then_some(self.data.labels[j]));
        }
        let noise = Tensor::from_fn(&[b, 2], |_| StandardNormal.sample(&mut self.rng));
        (x, noise, conds)
    }
}

fn step_loss(
    cfg: &RunConfig,
    net: &VelocityNet<f64>,
    target: &TargetNet<f64>,
    teacher: Option<&VelocityNet<f64>>,
    logvar: Option<&LogVarHead<f64>>,
    sampler: &mut Sampler<'_>,
) -> Result<LossOutput<f64>> {
    let spec = &cfg.objective;
    let (x, noise, conds) = sampler.draw(cfg);
    let b = cfg.batch;
    match spec.kind {
        LossKind::Cm | LossKind::Imm => {
            let lo = cfg.cm_gap + 1e-3;
            let t: Vec<f64> = (0..b).map(|_| sampler.rng.gen_range(lo..=1.0)).collect();
            let r: Vec<f64> = t.iter().map(|ti| ti - cfg.cm_gap).collect();
            let cm = CmBatch::from_data(&x, &noise, Tensor::column(t), Tensor::column(r), conds)?;
            if spec.kind == LossKind::Cm {
                cm_loss(net, target, &cm, spec.weight_fn)
            } else {
                imm_loss(net, target, &ImmBatch::single_particle(&cm), &cfg.imm_kernel, spec.weight_fn)
            }
        }
        _ => {
            let (t, r) = sample_t_r_batch::<f64, _>(&cfg.time_sampler, b, &mut sampler.rng);
            let mut batch = InterpolantBatch::new(x, noise, t, r, conds)?;
            match spec.kind {
                LossKind::Fm => fm_loss(net, &batch.with_r_equal_t(), spec, logvar),
                LossKind::MeanflowTrain => meanflow_train_loss(net, &batch, spec, logvar),
                LossKind::MeanflowDistill => {
                    let teacher = teacher.ok_or_else(|| invalid("meanflow_distill needs a teacher"))?;
                    meanflow_distill_loss(net, teacher, &batch, spec, logvar)
                }
                LossKind::Scm => {
                    if let Some(teacher) = teacher {
                        batch.v = teacher_target(net, teacher, &batch.z, &batch.t, &batch.conds, spec)?;
                    }
                    scm_loss(net, target, &batch, spec, logvar)
                }
                LossKind::Cm | LossKind::Imm => unreachable!("handled above"),
            }
        }
    }
}

/// Runs `cfg.steps` optimizer steps. Everything random derives from
/// `cfg.seed`, so identical configs give bitwise-identical runs.
pub fn train(cfg: &RunConfig, teacher: Option<&VelocityNet<f64>>) -> Result<TrainRun> {
    cfg.validate()?;
    let data = gen_dataset(cfg.dataset, cfg.dataset_size, cfg.seed ^ DATA_SALT)?;
    let mut net = initial_net(cfg, teacher)?;
    let mut target = TargetNet::new(&net, cfg.target_mode)?;
    let mut averaged = match cfg.ema_decay {
        Some(decay) => Some(TargetNet::new(&net, TargetMode::Ema { decay })?),
        None => None,
    };
    let mut logvar = cfg.objective.adaptive_variance.then(LogVarHead::<f64>::new);
    let mut opt = Optimizer::new(cfg.optim.with_lr(cfg.lr), net.params(), cfg.steps)?;
    let mut logvar_opt = match &logvar {
        Some(h) => Some(Optimizer::new(cfg.optim.with_lr(cfg.lr), h.params(), cfg.steps)?),
        None => None,
    };
    let mut sampler = Sampler {
        data: &data,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut log = Vec::new();
    let mut diverged = None;

    for step in 0..cfg.steps {
        let lr = opt.current_lr();
        let out = match step_loss(cfg, &net, &target, teacher, logvar.as_ref(), &mut sampler) {
            Ok(out) if out.loss.is_finite() && out.grads.iter().all(|g| g.all_finite()) => out,
            Ok(out) => {
                diverged = Some((step, format!("loss = {}, gradient finite: {}", out.loss, out.loss.is_finite())));
                break;
            }
            Err(Error::Divergence { detail, .. }) => {
                diverged = Some((step, detail));
                break;
            }
            Err(e) => return Err(e),
        };
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            info!("step {step:>6}  loss {:.6e}  lr {lr:.3e}", out.loss);
            log.push(LogRecord {
                step,
                loss: out.loss,
                lr,
            });
        }
        let before = net.clone();
        opt.step(net.params_mut(), &out.grads)?;
        if let (Some(h), Some(o), Some(g)) = (logvar.as_mut(), logvar_opt.as_mut(), out.aux_grads.as_ref()) {
            o.step(h.params_mut(), g)?;
        }
        if !net.params().iter().all(|p| p.all_finite()) {
            net = before;
            diverged = Some((step, "parameters became non-finite".into()));
            break;
        }
        target.sync_target(&net)?;
        if let Some(a) = averaged.as_mut() {
            a.sync_target(&net)?;
        }
    }
    if let (Some(a), None) = (averaged, &diverged) {
        net = a.net;
    }

    if let Some((step, detail)) = &diverged {
        warn!("step {step}: {detail}; keeping the last good parameters");
        log.push(LogRecord {
            step: *step,
            loss: f64::NAN,
            lr: opt.current_lr(),
        });
    }
    let metrics = if diverged.is_none() && cfg.eval_n > 0 && !cfg.sampler_eval.is_empty() {
        evaluate(cfg, &net, teacher)?
    } else {
        Vec::new()
    };
    Ok(TrainRun {
        net,
        log,
        metrics,
        diverged,
    })
}

/// Scores the trained model at `cfg.sampler_eval` against a held-out set,
/// plus NFE=100 Euler reference rows from the teacher (or from the model
/// itself when it is an FM model without a teacher).
pub fn evaluate(
    cfg: &RunConfig,
    net: &VelocityNet<f64>,
    teacher: Option<&VelocityNet<f64>>,
) -> Result<Vec<MetricReport>> {
    let held_out = gen_dataset(cfg.dataset, cfg.eval_n, cfg.held_out_seed)?;
    let kind = sampler_for(cfg.objective.kind);
    let entry = ModelEntry {
        name: format!("{:?}", cfg.objective.kind).to_lowercase(),
        sampler: kind,
        net: Some(net.clone()),
    };
    let sweep = SweepConfig {
        nfes: cfg.sampler_eval.clone(),
        seeds: vec![cfg.seed],
        n: cfg.eval_n,
        reference_nfe: 100,
    };
    let reference = teacher.or((kind == SamplerKind::Euler).then_some(net));
    nfe_sweep(&[entry], reference, &held_out.points, &sweep)
}

pub fn write_log<W: Write>(mut w: W, log: &[LogRecord]) -> Result<()> {
    writeln!(w, "step,loss,lr")?;
    for r in log {
        writeln!(w, "{},{:e},{:e}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

fn load_teacher(cfg: &RunConfig) -> Result<Option<VelocityNet<f64>>> {
    cfg.teacher.as_ref().map(super::checkpoint::load_checkpoint).transpose()
}

/// [`train`] plus artifacts in `cfg.output_dir`: the resolved config, the
/// loss log, the checkpoint and the final metrics. A diverged run writes
/// the last good parameters to `last_good.fslb` and returns
/// [`Error::Divergence`].
pub fn run_training(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let teacher = load_teacher(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(cfg)? + "\n")?;
    let run = train(cfg, teacher.as_ref())?;
    write_log(fs::File::create(dir.join(LOG_FILE))?, &run.log)?;
    if let Some((step, detail)) = &run.diverged {
        save_checkpoint(&run.net, dir.join(LAST_GOOD_FILE))?;
        return Err(Error::Divergence {
            step: *step,
            detail: format!("{detail}; last good parameters saved to {}", dir.join(LAST_GOOD_FILE).display()),
        });
    }
    save_checkpoint(&run.net, dir.join(CHECKPOINT_FILE))?;
    write_csv(fs::File::create(dir.join(METRICS_FILE))?, &run.metrics)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::net_to_bytes;
    use crate::harness::config::OptimSettings;
    use crate::harness::data::DatasetKind;
    use crate::network::NetConfig;
    use crate::objectives::LossSpec;
    use crate::schedules::TimeSamplerConfig;

    pub(crate) fn tiny(kind: LossKind, steps: usize) -> RunConfig {
        RunConfig {
            dataset: DatasetKind::Gauss8,
            dataset_size: 512,
            objective: LossSpec::new(kind),
            net: NetConfig {
                dim: 2,
                hidden: 16,
                depth: 2,
                n_classes: 8,
                t_scale: 1.0,
                dual_time: true,
            },
            steps,
            batch: 16,
            lr: 1e-3,
            seed: 5,
            target_mode: TargetMode::Synced,
            sampler_eval: vec![1, 2],
            output_dir: "unused".into(),
            teacher: None,
            init_from_teacher: true,
            time_sampler: TimeSamplerConfig::default(),
            optim: OptimSettings::default(),
            cfg_dropout: 0.1,
            log_every: 10,
            eval_n: 64,
            held_out_seed: 1,
            cm_gap: 0.05,
            imm_kernel: crate::objectives::KernelSpec::NegSqEuclid,
            ema_decay: None,
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = tiny(LossKind::Fm, 0);
        let run = train(&cfg, None).unwrap();
        assert_eq!(net_to_bytes(&run.net), net_to_bytes(&init_velocity_net::<f64>(cfg.net, cfg.seed).unwrap()));
        assert!(run.log.is_empty());
    }

    #[test]
    fn every_objective_runs_and_is_deterministic() {
        let teacher = train(&tiny(LossKind::Fm, 20), None).unwrap().net;
        for kind in [
            LossKind::Fm,
            LossKind::MeanflowTrain,
            LossKind::MeanflowDistill,
            LossKind::Scm,
            LossKind::Imm,
            LossKind::Cm,
        ] {
            let mut cfg = tiny(kind, 21);
            if kind == LossKind::MeanflowDistill || kind == LossKind::Scm {
                cfg.teacher = Some("t.fslb".into());
            }
            if matches!(kind, LossKind::Imm | LossKind::Cm) {
                cfg.target_mode = TargetMode::Ema { decay: 0.9 };
            }
            let t = cfg.teacher.as_ref().map(|_| &teacher);
            let a = train(&cfg, t).unwrap();
            let b = train(&cfg, t).unwrap();
            assert!(a.diverged.is_none(), "{kind:?}");
            assert_eq!(a.log.len(), 3, "{kind:?}");
            assert_eq!(net_to_bytes(&a.net), net_to_bytes(&b.net), "{kind:?}");
            let bits = |r: &TrainRun| r.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert!(a.metrics.iter().all(|m| m.mmd2.is_finite()), "{kind:?}");
        }
    }

    #[test]
    fn ema_weights_are_what_gets_returned() {
        let mut cfg = tiny(LossKind::Fm, 15);
        let raw = train(&cfg, None).unwrap().net;
        cfg.ema_decay = Some(0.5);
        let avg = train(&cfg, None).unwrap().net;
        assert!(raw.max_param_diff(&avg).unwrap() > 0.0);
        cfg.ema_decay = Some(0.0);
        let same = train(&cfg, None).unwrap().net;
        assert_eq!(net_to_bytes(&same), net_to_bytes(&raw));
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let mut cfg = tiny(LossKind::Fm, 50);
        cfg.lr = 1e300;
        let dir = tempfile::tempdir().unwrap();
        cfg.output_dir = dir.path().to_path_buf();
        let err = run_training(&cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(dir.path().join(LAST_GOOD_FILE).exists());
        assert!(!dir.path().join(CHECKPOINT_FILE).exists());
        let run = train(&cfg, None).unwrap();
        let (step, _) = run.diverged.expect("diverges");
        assert!(step < cfg.steps);
        assert!(run.net.params().iter().all(|p| p.all_finite()));
        assert!(run.metrics.is_empty());
    }
}

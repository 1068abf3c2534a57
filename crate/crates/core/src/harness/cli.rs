//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{RescaleRun, RunConfig, HELD_OUT_SEED};
use super::data::{gen_dataset, write_points_csv, DatasetKind};
use super::train::run_training;
use crate::error::{invalid, Result};
use crate::metrics::{identity_report, nfe_sweep, write_csv, ModelEntry, SamplerKind, SweepConfig};
use crate::network::{max_grid_discrepancy, rescale_distill};
use crate::samplers::{consistency_sample, euler_fm_sample, meanflow_sample, SampleRequest};

#[derive(Debug, Parser)]
#[command(name = "fewstep", version, about = "Few-step flow distillation on toy 2-D data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a toy dataset as CSV `x0,x1,label`.
    GenData(GenDataArgs),
    /// Train a model from a JSON run config.
    Train(ConfigArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score registered models across NFEs against held-out data.
    EvalSweep(SweepArgs),
    /// Check the cross-method identities on random networks.
    VerifyIdentities(IdentityArgs),
    /// Distill a teacher into a student with a different time scale.
    RescaleDistill(ConfigArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Gauss8,
    Gauss1,
    Moons,
    Checkerboard,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Gauss8 => DatasetKind::Gauss8,
            DatasetArg::Gauss1 => DatasetKind::Gauss1,
            DatasetArg::Moons => DatasetKind::Moons,
            DatasetArg::Checkerboard => DatasetKind::Checkerboard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Euler,
    Meanflow,
    Consistency,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Euler => SamplerKind::Euler,
            SamplerArg::Meanflow => SamplerKind::MeanFlow,
            SamplerArg::Consistency => SamplerKind::Consistency,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted override, e.g. `--set objective.gamma=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "euler")]
    pub sampler: SamplerArg,
    #[arg(long)]
    pub nfe: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class label; unconditional when absent.
    #[arg(long)]
    pub cond: Option<usize>,
    /// Guidance scale (1 = plain conditional).
    #[arg(long, default_value_t = 1.0)]
    pub omega: f64,
    /// Output CSV `x0,x1`; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `name=checkpoint:sampler`, repeatable; sampler is euler, meanflow or
    /// consistency.
    #[arg(long = "method", value_name = "NAME=PATH:SAMPLER", required = true)]
    pub methods: Vec<String>,
    /// FM teacher for the NFE=100 reference rows.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gauss8")]
    pub dataset: DatasetArg,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub nfe: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = HELD_OUT_SEED)]
    pub data_seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IdentityArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(io::BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn parse_method(s: &str) -> Result<(String, PathBuf, SamplerKind)> {
    let (name, rest) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("method {s:?} is not NAME=PATH:SAMPLER")))?;
    let (path, sampler) = rest
        .rsplit_once(':')
        .ok_or_else(|| invalid(format!("method {s:?} lacks a :SAMPLER suffix")))?;
    let sampler = SamplerArg::from_str(sampler, true).map_err(|e| invalid(format!("method {s:?}: {e}")))?;
    if name.is_empty() || name.contains(',') {
        return Err(invalid(format!("method name {name:?} must be non-empty and comma-free")));
    }
    Ok((name.to_string(), PathBuf::from(path), sampler.into()))
}

fn gen_data(a: &GenDataArgs) -> Result<i32> {
    let d = gen_dataset(a.dataset.into(), a.n, a.seed)?;
    let mut w = output(&a.output)?;
    write_points_csv(&mut w, &d.points, Some(&d.labels))?;
    w.flush()?;
    Ok(0)
}

fn train(a: &ConfigArgs) -> Result<i32> {
    let cfg = RunConfig::load(&a.config, &a.sets)?;
    let run = run_training(&cfg)?;
    for m in &run.metrics {
        info!("{} nfe {}: mmd2 {:.4e} w2 {:.4}", m.method, m.nfe, m.mmd2, m.w2);
    }
    println!("{}", cfg.output_dir.display());
    Ok(0)
}

fn sample(a: &SampleArgs) -> Result<i32> {
    let net = load_checkpoint(&a.checkpoint)?;
    let mut req = SampleRequest::new(a.n, net.config().dim, a.nfe, a.seed);
    req.cond = a.cond;
    req.omega = a.omega;
    let x = match SamplerKind::from(a.sampler) {
        SamplerKind::Euler => euler_fm_sample(&net, &req)?,
        SamplerKind::MeanFlow => meanflow_sample(&net, &req)?,
        SamplerKind::Consistency => consistency_sample(&net, &req)?,
    };
    let mut w = output(&a.output)?;
    write_points_csv(&mut w, &x, None)?;
    w.flush()?;
    Ok(0)
}

fn eval_sweep(a: &SweepArgs) -> Result<i32> {
    let mut models = Vec::new();
    for m in &a.methods {
        let (name, path, sampler) = parse_method(m)?;
        let net = match load_checkpoint(&path) {
            Ok(n) => Some(n),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                None
            }
        };
        models.push(ModelEntry { name, sampler, net });
    }
    let teacher = a.teacher.as_ref().map(load_checkpoint).transpose()?;
    let held_out = gen_dataset(a.dataset.into(), a.n, a.data_seed)?;
    let cfg = SweepConfig {
        nfes: a.nfe.clone(),
        seeds: a.seeds.clone(),
        n: a.n,
        reference_nfe: 100,
    };
    let rows = nfe_sweep(&models, teacher.as_ref(), &held_out.points, &cfg)?;
    let mut w = output(&a.output)?;
    write_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(0)
}

fn verify_identities(a: &IdentityArgs) -> Result<i32> {
    let report = identity_report(a.seed);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(if report.all_passed() { 0 } else { 1 })
}

fn rescale(a: &ConfigArgs) -> Result<i32> {
    let run = RescaleRun::load(&a.config, &a.sets)?;
    let teacher = load_checkpoint(&run.teacher)?;
    let pool = gen_dataset(run.dataset, run.pool_size, run.data_seed)?.points;
    let student = teacher.rescaled_copy(run.student_t_scale)?;
    let out = rescale_distill(&teacher, student, &pool, &run.distill)?;
    let gap = max_grid_discrepancy(&teacher, &out.student, &pool, run.grid_points, run.grid_times, run.data_seed)?;
    if let Some(dir) = run.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&out.student, &run.output)?;
    println!(
        "loss {:.4e} -> {:.4e}; max grid discrepancy {gap:.4e}",
        out.initial_loss, out.final_loss
    );
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 on runtime failure or a
/// failed identity suite, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::EvalSweep(a) => eval_sweep(a),
        Command::VerifyIdentities(a) => verify_identities(a),
        Command::RescaleDistill(a) => rescale(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn method_specs() {
        let (n, p, s) = parse_method("scm=runs/a/checkpoint.fslb:consistency").unwrap();
        assert_eq!((n.as_str(), p, s), ("scm", PathBuf::from("runs/a/checkpoint.fslb"), SamplerKind::Consistency));
        assert!(parse_method("scm").is_err());
        assert!(parse_method("scm=path").is_err());
        assert!(parse_method("scm=path:rk4").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["fewstep", "verify-identities", "--bogus"]), 2);
        assert_eq!(run(["fewstep", "frobnicate"]), 2);
        assert_eq!(run(["fewstep", "verify-identities", "--help"]), 0);
    }
}

//! Run configuration: JSON documents plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::data::DatasetKind;
use crate::error::{Error, Result};
use crate::network::{LrSchedule, NetConfig, OptimConfig, RescaleConfig, TargetMode};
use crate::objectives::{KernelSpec, LossKind, LossSpec};
use crate::schedules::TimeSamplerConfig;

/// Seed of the held-out evaluation set unless a config overrides it.
pub const HELD_OUT_SEED: u64 = 0x0e7a_1d47;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn default_dataset_size() -> usize {
    50_000
}
fn default_target_mode() -> TargetMode {
    TargetMode::Synced
}
fn default_nfes() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_cfg_dropout() -> f64 {
    0.1
}
fn default_log_every() -> usize {
    100
}
fn default_eval_n() -> usize {
    2000
}
fn default_true() -> bool {
    true
}
fn default_held_out_seed() -> u64 {
    HELD_OUT_SEED
}
fn default_cm_gap() -> f64 {
    0.05
}
fn default_kernel() -> KernelSpec {
    KernelSpec::NegSqEuclid
}

/// Optimizer settings beyond the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSettings {
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for OptimSettings {
    fn default() -> Self {
        let d = OptimConfig::new(1.0);
        Self {
            beta2: d.beta2,
            eps: d.eps,
            grad_clip: d.grad_clip,
            schedule: d.schedule,
        }
    }
}

impl OptimSettings {
    pub fn with_lr(&self, lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            schedule: self.schedule,
        }
    }
}

/// One training run. `seed`, `steps` and `lr` have no defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    pub objective: LossSpec,
    pub net: NetConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_target_mode")]
    pub target_mode: TargetMode,
    /// NFEs scored at the end of training.
    #[serde(default = "default_nfes")]
    pub sampler_eval: Vec<usize>,
    pub output_dir: PathBuf,
    /// Teacher checkpoint for distillation objectives.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Start the student from the teacher's parameters.
    #[serde(default = "default_true")]
    pub init_from_teacher: bool,
    #[serde(default)]
    pub time_sampler: TimeSamplerConfig,
    #[serde(default)]
    pub optim: OptimSettings,
    /// Probability of replacing a label with the null class.
    #[serde(default = "default_cfg_dropout")]
    pub cfg_dropout: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Samples drawn (and held-out points compared against) at the end of
    /// training; zero skips evaluation.
    #[serde(default = "default_eval_n")]
    pub eval_n: usize,
    #[serde(default = "default_held_out_seed")]
    pub held_out_seed: u64,
    /// `t - r` for discrete consistency objectives.
    #[serde(default = "default_cm_gap")]
    pub cm_gap: f64,
    #[serde(default = "default_kernel")]
    pub imm_kernel: KernelSpec,
    /// Decay of an exponential moving average of the online weights; when
    /// set, the average is what gets evaluated and saved.
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.objective.validate()?;
        self.time_sampler.validate()?;
        if self.net.dim != 2 {
            return Err(cfg_err(format!("net.dim = {} but datasets are 2-D", self.net.dim)));
        }
        if self.net.n_classes != 0 && self.net.n_classes != self.dataset.n_classes() {
            return Err(cfg_err(format!(
                "net.n_classes = {} but {} has {} classes (use 0 for unconditional)",
                self.net.n_classes,
                self.dataset,
                self.dataset.n_classes()
            )));
        }
        if self.batch == 0 || self.dataset_size == 0 {
            return Err(cfg_err("batch and dataset_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err(format!("lr = {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(cfg_err(format!("cfg_dropout = {} outside [0, 1]", self.cfg_dropout)));
        }
        if self.log_every == 0 {
            return Err(cfg_err("log_every must be positive"));
        }
        if self.sampler_eval.iter().any(|&n| n == 0) {
            return Err(cfg_err("sampler_eval NFEs must be positive"));
        }
        if !(self.cm_gap > 0.0 && self.cm_gap < 0.5) {
            return Err(cfg_err(format!("cm_gap = {} outside (0, 0.5)", self.cm_gap)));
        }
        if let TargetMode::Ema { decay } = self.target_mode {
            if !(0.0..1.0).contains(&decay) {
                return Err(cfg_err(format!("ema decay {decay} outside [0, 1)")));
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(cfg_err(format!("ema_decay {d} outside [0, 1)")));
            }
        }
        if self.objective.kind == LossKind::MeanflowDistill && self.teacher.is_none() {
            return Err(cfg_err("meanflow_distill needs a teacher checkpoint"));
        }
        if self.teacher.is_some() && !matches!(self.objective.kind, LossKind::MeanflowDistill | LossKind::Scm) {
            return Err(cfg_err(format!("objective {:?} does not use a teacher", self.objective.kind)));
        }
        Ok(())
    }

    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let cfg: Self = load_with_overrides(path, sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Rescale-distillation job: a teacher checkpoint, the target time scale of
/// the student and the optimizer recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescaleRun {
    pub teacher: PathBuf,
    pub output: PathBuf,
    pub dataset: DatasetKind,
    pub pool_size: usize,
    pub data_seed: u64,
    pub student_t_scale: f64,
    pub distill: RescaleConfig,
    pub grid_points: usize,
    pub grid_times: usize,
}

impl RescaleRun {
    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let run: Self = load_with_overrides(path, sets)?;
        if run.pool_size == 0 || run.grid_points == 0 || run.grid_times < 2 {
            return Err(cfg_err("pool_size, grid_points must be positive and grid_times at least 2"));
        }
        Ok(run)
    }
}

/// Parses `path` as JSON, applies `a.b.c=value` overrides (values parsed as
/// JSON when possible, otherwise taken as strings) and deserializes.
pub fn load_with_overrides<T: DeserializeOwned>(path: &Path, sets: &[String]) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    for s in sets {
        apply_override(&mut v, s)?;
    }
    serde_json::from_value(v).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| cfg_err(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys have at least one segment")
}

//! NFE sweeps over a registry of trained models.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{median_bandwidth, mmd2, wasserstein2_exact, MetricReport, MAX_ASSIGNMENT};
use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::network::VelocityNet;
use crate::objectives::KernelSpec;
use crate::samplers::{consistency_sample, euler_fm_sample, meanflow_sample, SampleRequest};

pub const CSV_HEADER: &str = "method,nfe,seed,n,mmd2,w2";

/// Method name used for the teacher reference rows.
pub const REFERENCE_METHOD: &str = "teacher_ref";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Euler,
    MeanFlow,
    Consistency,
}

/// A registered method. `net = None` marks a model that could not be loaded;
/// its cells are emitted as NaN warning rows.
#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub name: String,
    pub sampler: SamplerKind,
    pub net: Option<VelocityNet<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub nfes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub reference_nfe: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            nfes: vec![1, 2, 4],
            seeds: vec![0],
            n: 2000,
            reference_nfe: 100,
        }
    }
}

/// Every cell of one replicate draws the same initial noise (common random
/// numbers), so differences between methods and NFEs within a seed are not
/// masked by independent sampling noise.
fn cell_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1_000_003)
}

fn generate(entry_net: &VelocityNet<f64>, sampler: SamplerKind, req: &SampleRequest) -> Result<Tensor<f64>> {
    match sampler {
        SamplerKind::Euler => euler_fm_sample(entry_net, req),
        SamplerKind::MeanFlow => meanflow_sample(entry_net, req),
        SamplerKind::Consistency => consistency_sample(entry_net, req),
    }
}

fn head(x: &Tensor<f64>, n: usize) -> Result<Tensor<f64>> {
    let n = n.min(x.rows());
    Tensor::new(vec![n, x.cols()], x.data()[..n * x.cols()].to_vec())
}

struct Scorer {
    data: Tensor<f64>,
    data_w2: Tensor<f64>,
    kernel: KernelSpec,
}

impl Scorer {
    fn score(&self, method: &str, nfe: usize, seed: u64, samples: &Tensor<f64>) -> Result<MetricReport> {
        let (mmd, w2) = if samples.all_finite() {
            let m = mmd2(samples, &self.data, Some(self.kernel))?;
            let k = self.data_w2.rows().min(samples.rows());
            let w = wasserstein2_exact(&head(samples, k)?, &head(&self.data_w2, k)?)?;
            (m, w)
        } else {
            warn!("{method} at nfe {nfe} (seed {seed}) produced non-finite samples");
            (f64::NAN, f64::NAN)
        };
        Ok(MetricReport {
            method: method.to_string(),
            nfe,
            mmd2: mmd,
            w2,
            n_samples: samples.rows(),
            seed,
        })
    }
}

/// One row per (method, NFE, seed) in registry order, then one teacher
/// reference row per seed at `cfg.reference_nfe` Euler steps. MMD uses an RBF
/// kernel whose bandwidth is fixed once from the held-out data, so every cell
/// is scored with the same kernel; W2 uses the first `min(n, 512)` points.
pub fn nfe_sweep(
    models: &[ModelEntry],
    teacher: Option<&VelocityNet<f64>>,
    held_out: &Tensor<f64>,
    cfg: &SweepConfig,
) -> Result<Vec<MetricReport>> {
    if cfg.nfes.is_empty() || cfg.seeds.is_empty() || cfg.n == 0 {
        return Err(invalid("sweep needs at least one nfe, one seed and n > 0"));
    }
    if held_out.rows() == 0 {
        return Err(invalid("held-out data is empty"));
    }
    let scorer = Scorer {
        kernel: KernelSpec::Rbf {
            bandwidth: median_bandwidth(held_out, held_out)?,
        },
        data_w2: head(held_out, MAX_ASSIGNMENT)?,
        data: held_out.clone(),
    };
    let dim = held_out.cols();
    let mut rows = Vec::new();
    for entry in models {
        for &nfe in &cfg.nfes {
            for &seed in &cfg.seeds {
                let Some(net) = &entry.net else {
                    warn!("model {} is missing; emitting a warning row", entry.name);
                    rows.push(MetricReport {
                        method: entry.name.clone(),
                        nfe,
                        mmd2: f64::NAN,
                        w2: f64::NAN,
                        n_samples: 0,
                        seed,
                    });
                    continue;
                };
                let req = SampleRequest::new(cfg.n, dim, nfe, cell_seed(seed));
                let x = generate(net, entry.sampler, &req)?;
                rows.push(scorer.score(&entry.name, nfe, seed, &x)?);
            }
        }
    }
    if let Some(t) = teacher {
        for &seed in &cfg.seeds {
            let req = SampleRequest::new(cfg.n, dim, cfg.reference_nfe, cell_seed(seed));
            let x = euler_fm_sample(t, &req)?;
            rows.push(scorer.score(REFERENCE_METHOD, cfg.reference_nfe, seed, &x)?);
        }
    } else {
        warn!("no teacher registered; the sweep has no reference rows");
    }
    Ok(rows)
}

/// Writes rows under [`CSV_HEADER`] with LF line endings.
pub fn write_csv<W: Write>(mut w: W, rows: &[MetricReport]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.method, r.nfe, r.seed, r.n_samples, r.mmd2, r.w2)?;
    }
    Ok(())
}

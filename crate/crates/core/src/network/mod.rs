//! MLP velocity networks with a dual timestep embedding.
//!
//! `u(z, r, t, c) = out(h_D)` where `h_i = silu(W_i h_{i-1} + b_i + e)` and the
//! embedding `e = T(t) + D(t - r) + C[c]` sums a time branch `T`, a
//! structurally identical duration branch `D` (cloned from `T` at init) and a
//! class table row. Each branch is `affine -> silu -> affine` over sinusoidal
//! features of the scaled time.

mod optimizer;
mod rescale;

pub use optimizer::{LrSchedule, OptimConfig, Optimizer};
pub use rescale::{max_grid_discrepancy, rescale_distill, RescaleConfig, RescaleOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, NodeId, Tensor, Trace};
use crate::error::{invalid, range_err, Error, Result};
use crate::scalar::Scalar;

/// Number of sinusoidal frequencies per time feature.
pub const N_FREQS: usize = 64;
/// Frequencies per decade; `f_j = 10^(1 - j / FREQS_PER_DECADE)`.
pub const FREQS_PER_DECADE: f64 = 14.0;
/// Features whose phase rate exceeds this many radians per unit external
/// time are disabled, which keeps the embedding smooth on `[0, 1]`.
pub const MAX_PHASE_RATE: f64 = 10.0;

/// Graph input slots preceding the parameters.
pub const SLOT_Z: usize = 0;
pub const SLOT_R: usize = 1;
pub const SLOT_T: usize = 2;
pub const SLOT_COND: usize = 3;
pub const NET_INPUTS: usize = 4;

const T_EMBED: usize = 0;
const DT_EMBED: usize = 4;
const CLASS_TABLE: usize = 8;
const FIRST_LAYER: usize = 9;

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Number of modulated hidden layers.
    pub depth: usize,
    /// Class count, excluding the null class.
    #[serde(default)]
    pub n_classes: usize,
    /// External-to-internal time multiplier.
    pub t_scale: f64,
    /// When false the duration branch is left out of the graph.
    #[serde(default = "default_true")]
    pub dual_time: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(invalid(format!(
                "dim = {} and hidden = {} must be positive",
                self.dim, self.hidden
            )));
        }
        if self.depth < 2 {
            return Err(invalid(format!("depth = {} must be at least 2", self.depth)));
        }
        if !(self.t_scale > 0.0 && self.t_scale.is_finite()) {
            return Err(invalid(format!("t_scale = {} must be positive", self.t_scale)));
        }
        Ok(())
    }

    /// Frequency shift (in index steps) implied by `t_scale`, snapped to an
    /// integer when `t_scale` is a power of ten compatible with the grid.
    fn shift(&self) -> f64 {
        let k = FREQS_PER_DECADE * self.t_scale.log10();
        if (k - k.round()).abs() < 1e-9 {
            k.round()
        } else {
            k
        }
    }

    /// Effective frequencies (`f_j * t_scale`) and the active mask.
    pub fn features(&self) -> (Vec<f64>, Vec<bool>) {
        let k = self.shift();
        let top = FREQS_PER_DECADE * MAX_PHASE_RATE.log10();
        (0..N_FREQS)
            .map(|j| {
                let num = FREQS_PER_DECADE + k - j as f64;
                (10f64.powf(num / FREQS_PER_DECADE), num <= top + 1e-9)
            })
            .unzip()
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.hidden);
        let mut out = Vec::new();
        for branch in ["t_embed", "dt_embed"] {
            out.push((format!("{branch}.w1"), vec![2 * N_FREQS, h]));
            out.push((format!("{branch}.b1"), vec![h]));
            out.push((format!("{branch}.w2"), vec![h, h]));
            out.push((format!("{branch}.b2"), vec![h]));
        }
        out.push(("class_table".into(), vec![self.n_classes + 1, h]));
        for i in 0..self.depth {
            let fan_in = if i == 0 { d } else { h };
            out.push((format!("layer{i}.w"), vec![fan_in, h]));
            out.push((format!("layer{i}.b"), vec![h]));
        }
        out.push(("out.w".into(), vec![h, d]));
        out.push(("out.b".into(), vec![d]));
        out
    }
}

/// Network inputs for one batch: `z [B, d]`, `r`, `t` as `[B, 1]` columns and
/// a one-hot condition matrix whose last column is the null class.
#[derive(Clone, Debug)]
pub struct NetInputs<S> {
    pub z: Tensor<S>,
    pub r: Tensor<S>,
    pub t: Tensor<S>,
    pub onehot: Tensor<S>,
}

impl<S: Scalar> NetInputs<S> {
    pub fn batch(&self) -> usize {
        self.z.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet<S> {
    cfg: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

/// Deterministic initialization; the duration branch starts as an exact copy
/// of the time branch.
pub fn init_velocity_net<S: Scalar>(cfg: NetConfig, seed: u64) -> Result<VelocityNet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = cfg.param_shapes();
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in &shapes {
        let t = if name.starts_with("dt_embed") {
            // filled from the time branch below
            Tensor::zeros(shape)
        } else if name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            let std = if name == "class_table" {
                0.5
            } else {
                (1.0 / shape[0] as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| S::lit(dist.sample(&mut rng)))
        };
        params.push(t);
    }
    for i in 0..4 {
        params[DT_EMBED + i] = params[T_EMBED + i].clone();
    }
    Ok(VelocityNet {
        cfg,
        names: shapes.into_iter().map(|(n, _)| n).collect(),
        params,
    })
}

fn check_times<S: Scalar>(r: &Tensor<S>, t: &Tensor<S>) -> Result<()> {
    for (i, (&ri, &ti)) in r.data().iter().zip(t.data()).enumerate() {
        if !(ri <= ti) {
            return Err(range_err(format!("row {i}: r = {ri} exceeds t = {ti}")));
        }
    }
    Ok(())
}

impl<S: Scalar> VelocityNet<S> {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Rebuilds a network from named tensors (e.g. a checkpoint).
    pub fn from_params(cfg: NetConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if named.len() != shapes.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in shapes.iter().zip(named) {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(invalid(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            cfg,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    /// Index of the parameters belonging to the duration branch.
    pub fn dt_branch_indices(&self) -> std::ops::Range<usize> {
        DT_EMBED..DT_EMBED + 4
    }

    /// Encodes optional class ids as one-hot rows (`None` = null class).
    pub fn onehot(&self, conds: &[Option<usize>]) -> Result<Tensor<S>> {
        let c = self.cfg.n_classes + 1;
        let mut out = Tensor::zeros(&[conds.len(), c]);
        for (i, cond) in conds.iter().enumerate() {
            let k = match cond {
                None => self.cfg.n_classes,
                Some(k) if *k < self.cfg.n_classes => *k,
                Some(k) => {
                    return Err(invalid(format!(
                        "class {k} out of range for {} classes",
                        self.cfg.n_classes
                    )))
                }
            };
            out.row_mut(i)[k] = S::one();
        }
        Ok(out)
    }

    pub fn inputs(
        &self,
        z: Tensor<S>,
        r: Tensor<S>,
        t: Tensor<S>,
        conds: &[Option<usize>],
    ) -> Result<NetInputs<S>> {
        let b = z.rows();
        if z.shape() != [b, self.cfg.dim] || r.shape() != [b, 1] || t.shape() != [b, 1] || conds.len() != b {
            return Err(invalid(format!(
                "z {:?}, r {:?}, t {:?}, {} conditions for dim {}",
                z.shape(),
                r.shape(),
                t.shape(),
                conds.len(),
                self.cfg.dim
            )));
        }
        check_times(&r, &t)?;
        let onehot = self.onehot(conds)?;
        Ok(NetInputs { z, r, t, onehot })
    }

    /// Builds the evaluation graph for a batch of `batch` rows.
    pub fn graph(&self, batch: usize) -> Result<Graph<S>> {
        let cfg = &self.cfg;
        let mut g = GraphBuilder::new();
        let z = g.input(&[batch, cfg.dim]);
        g.label(z, "z");
        let r = g.input(&[batch, 1]);
        g.label(r, "r");
        let t = g.input(&[batch, 1]);
        g.label(t, "t");
        let c = g.input(&[batch, cfg.n_classes + 1]);
        g.label(c, "cond");
        let p: Vec<NodeId> = self
            .params
            .iter()
            .zip(&self.names)
            .map(|(p, name)| {
                let id = g.input(p.shape());
                g.label(id, name.clone())
            })
            .collect();

        let (freqs, active) = cfg.features();
        let freqs: Vec<S> = freqs.into_iter().map(S::lit).collect();
        let branch = |g: &mut GraphBuilder<S>, x: NodeId, w: &[NodeId]| -> Result<NodeId> {
            let f = g.sinusoid(x, freqs.clone(), active.clone())?;
            let h = g.affine(f, w[0], w[1])?;
            let h = g.silu(h)?;
            g.affine(h, w[2], w[3])
        };
        let mut emb = branch(&mut g, t, &p[T_EMBED..T_EMBED + 4])?;
        if cfg.dual_time {
            let dt = g.sub(t, r)?;
            let d = branch(&mut g, dt, &p[DT_EMBED..DT_EMBED + 4])?;
            emb = g.add(emb, d)?;
        }
        let ce = g.matmul(c, p[CLASS_TABLE])?;
        let emb = g.add(emb, ce)?;
        g.label(emb, "embedding");

        let mut h = z;
        for i in 0..cfg.depth {
            let a = g.affine(h, p[FIRST_LAYER + 2 * i], p[FIRST_LAYER + 2 * i + 1])?;
            let a = g.add(a, emb)?;
            h = g.silu(a)?;
        }
        let o = FIRST_LAYER + 2 * cfg.depth;
        let out = g.affine(h, p[o], p[o + 1])?;
        g.label(out, "velocity");
        g.finish(out)
    }

    /// Input slots for [`VelocityNet::graph`]: batch tensors, then parameters.
    pub fn slots<'a>(&'a self, x: &'a NetInputs<S>) -> Vec<&'a Tensor<S>> {
        let mut v = Vec::with_capacity(NET_INPUTS + self.params.len());
        v.extend([&x.z, &x.r, &x.t, &x.onehot]);
        v.extend(self.params.iter());
        v
    }

    /// Gradient mask selecting parameters only.
    pub fn param_mask(&self) -> Vec<bool> {
        let mut m = vec![false; NET_INPUTS];
        m.extend(std::iter::repeat(true).take(self.params.len()));
        m
    }

    /// `seed . u` differentiated with respect to the parameters.
    pub fn param_grads(&self, graph: &Graph<S>, trace: &Trace<'_, S>, seed: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mask = self.param_mask();
        let mut grads = graph.backward_trace(trace, seed, Some(&mask))?;
        Ok(grads.split_off(NET_INPUTS))
    }

    pub fn forward(&self, x: &NetInputs<S>) -> Result<Tensor<S>> {
        let graph = self.graph(x.batch())?;
        graph.forward(&self.slots(x))
    }

    /// `u(z, r, t, c)` with shared scalar times.
    pub fn forward_velocity(&self, z: &Tensor<S>, r: S, t: S, cond: Option<usize>) -> Result<Tensor<S>> {
        if !(r <= t) {
            return Err(range_err(format!("r = {r} exceeds t = {t}")));
        }
        let b = z.rows();
        let x = self.inputs(
            z.clone(),
            Tensor::full(&[b, 1], r),
            Tensor::full(&[b, 1], t),
            &vec![cond; b],
        )?;
        self.forward(&x)
    }

    /// `u(z, r, t, c)` with per-row times and conditions.
    pub fn forward_rows(&self, z: &Tensor<S>, r: &Tensor<S>, t: &Tensor<S>, conds: &[Option<usize>]) -> Result<Tensor<S>> {
        let x = self.inputs(z.clone(), r.clone(), t.clone(), conds)?;
        self.forward(&x)
    }

    /// Same function without the duration branch: its output at `t - r = 0`
    /// is folded into every hidden-layer bias. Exact whenever `r == t`.
    pub fn fold_dt_branch(&self) -> Result<Self> {
        let mut cfg = self.cfg;
        cfg.dual_time = false;
        let (freqs, active) = self.cfg.features();
        let mut feat = Tensor::<S>::zeros(&[1, 2 * N_FREQS]);
        for (j, (_, on)) in freqs.iter().zip(&active).enumerate() {
            if *on {
                // sin(0) = 0, cos(0) = 1
                feat.data_mut()[N_FREQS + j] = S::one();
            }
        }
        let w = &self.params[DT_EMBED..DT_EMBED + 4];
        let mut g = GraphBuilder::new();
        let f = g.constant(feat);
        let ids: Vec<NodeId> = w.iter().map(|t| g.constant(t.clone())).collect();
        let h = g.affine(f, ids[0], ids[1])?;
        let h = g.silu(h)?;
        let out = g.affine(h, ids[2], ids[3])?;
        let shift = g.finish(out)?.forward(&[])?;

        let mut params = self.params.clone();
        for i in 0..self.cfg.depth {
            let b = &mut params[FIRST_LAYER + 2 * i + 1];
            for (bi, &s) in b.data_mut().iter_mut().zip(shift.data()) {
                *bi += s;
            }
        }
        Ok(Self {
            cfg,
            names: self.names.clone(),
            params,
        })
    }

    /// Copy of this network that reads time in units scaled by `new_scale`
    /// instead of `t_scale`, with embedding rows moved so that the new
    /// network computes the same function of external time wherever the
    /// original's active features remain representable.
    pub fn rescaled_copy(&self, new_scale: f64) -> Result<Self> {
        let mut cfg = self.cfg;
        cfg.t_scale = new_scale;
        cfg.validate()?;
        let shift = self.cfg.shift() - cfg.shift();
        if (shift - shift.round()).abs() > 1e-9 || shift < 0.0 {
            return Err(invalid(format!(
                "t_scale {} -> {new_scale} is not a non-negative whole number of frequency steps",
                self.cfg.t_scale
            )));
        }
        let k = shift.round() as usize;
        let mut params = self.params.clone();
        for base in [T_EMBED, DT_EMBED] {
            let w = &self.params[base];
            let mut moved = Tensor::zeros(w.shape());
            for half in [0, N_FREQS] {
                for j in k..N_FREQS {
                    moved.row_mut(half + j - k).copy_from_slice(w.row(half + j));
                }
            }
            params[base] = moved;
        }
        Ok(Self {
            cfg,
            names: self.names.clone(),
            params,
        })
    }

    pub fn max_param_diff(&self, other: &Self) -> Result<S> {
        if self.cfg.param_shapes() != other.cfg.param_shapes() {
            return Err(invalid("parameter layouts differ"));
        }
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(S::zero(), |m, d| if d > m || d.is_nan() { d } else { m }))
    }

    pub fn cast<T: Scalar>(&self) -> VelocityNet<T> {
        VelocityNet {
            cfg: self.cfg,
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetMode {
    /// `theta^- = theta` under stop-gradient.
    Synced,
    Ema { decay: f64 },
}

/// Parameters `theta^-` used by consistency-style targets.
#[derive(Clone, Debug)]
pub struct TargetNet<S> {
    pub net: VelocityNet<S>,
    pub mode: TargetMode,
}

impl<S: Scalar> TargetNet<S> {
    pub fn new(online: &VelocityNet<S>, mode: TargetMode) -> Result<Self> {
        if let TargetMode::Ema { decay } = mode {
            if !(0.0..=1.0).contains(&decay) {
                return Err(range_err(format!("ema decay {decay} outside [0, 1]")));
            }
        }
        Ok(Self {
            net: online.clone(),
            mode,
        })
    }

    pub fn is_synced(&self) -> bool {
        matches!(self.mode, TargetMode::Synced)
    }

    /// Applies the mode's update after an optimizer step.
    pub fn sync_target(&mut self, online: &VelocityNet<S>) -> Result<()> {
        if self.net.cfg.param_shapes() != online.cfg.param_shapes() {
            return Err(Error::Shape {
                node: 0,
                label: "target".into(),
                detail: "target and online parameter layouts differ".into(),
            });
        }
        match self.mode {
            TargetMode::Synced => self.net.params.clone_from(&online.params),
            TargetMode::Ema { decay } => {
                let d = S::lit(decay);
                let e = S::one() - d;
                for (p, o) in self.net.params.iter_mut().zip(&online.params) {
                    for (a, &b) in p.data_mut().iter_mut().zip(o.data()) {
                        *a = d * *a + e * b;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradMode};

    fn small() -> NetConfig {
        NetConfig {
            dim: 2,
            hidden: 8,
            depth: 2,
            n_classes: 3,
            t_scale: 1.0,
            dual_time: true,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_velocity_net::<f64>(small(), 4).unwrap();
        let b = init_velocity_net::<f64>(small(), 4).unwrap();
        assert_eq!(a, b);
        let c = init_velocity_net::<f64>(small(), 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dt_branch_is_a_copy_at_init() {
        let net = init_velocity_net::<f64>(small(), 1).unwrap();
        for i in 0..4 {
            assert_eq!(net.params()[T_EMBED + i].max_abs_diff(&net.params()[DT_EMBED + i]), 0.0);
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = init_velocity_net::<f64>(small(), 1).unwrap();
        let z = Tensor::from_rows(&[[0.1, 0.2], [0.3, -0.4], [1.0, 0.0]]);
        let u = net.forward_velocity(&z, 0.2, 0.7, Some(1)).unwrap();
        assert_eq!(u.shape(), &[3, 2]);
        assert!(u.all_finite());
    }

    #[test]
    fn rejects_r_after_t_and_bad_sizes() {
        let net = init_velocity_net::<f64>(small(), 1).unwrap();
        let z = Tensor::from_rows(&[[0.0, 0.0]]);
        assert!(matches!(net.forward_velocity(&z, 0.8, 0.2, None), Err(Error::Range(_))));
        let mut bad = small();
        bad.depth = 1;
        assert!(init_velocity_net::<f64>(bad, 0).is_err());
        bad = small();
        bad.dim = 0;
        assert!(init_velocity_net::<f64>(bad, 0).is_err());
    }

    #[test]
    fn null_class_differs_from_labels_and_rejects_unknown() {
        let net = init_velocity_net::<f64>(small(), 2).unwrap();
        let z = Tensor::from_rows(&[[0.5, -0.5]]);
        let a = net.forward_velocity(&z, 0.5, 0.5, None).unwrap();
        let b = net.forward_velocity(&z, 0.5, 0.5, Some(0)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!(net.forward_velocity(&z, 0.5, 0.5, Some(3)).is_err());
    }

    #[test]
    fn graph_derivatives_match_finite_differences() {
        let net = init_velocity_net::<f64>(small(), 3).unwrap();
        let x = net
            .inputs(
                Tensor::from_rows(&[[0.3, -0.1], [1.2, 0.4]]),
                Tensor::column(vec![0.1, 0.3]),
                Tensor::column(vec![0.6, 0.9]),
                &[None, Some(2)],
            )
            .unwrap();
        let graph = net.graph(2).unwrap();
        let inputs: Vec<Tensor<f64>> = net.slots(&x).into_iter().cloned().collect();
        assert!(grad_check(&graph, &inputs, GradMode::Forward) < 1e-4);
        assert!(grad_check(&graph, &inputs, GradMode::Reverse) < 1e-5);
    }

    #[test]
    fn folding_dt_branch_preserves_r_equals_t() {
        let mut net = init_velocity_net::<f64>(small(), 8).unwrap();
        // move the duration branch away from the time branch first
        for p in &mut net.params[DT_EMBED..DT_EMBED + 4] {
            *p = p.map(|x| x * 0.7 + 0.01);
        }
        let folded = net.fold_dt_branch().unwrap();
        let z = Tensor::from_rows(&[[0.3, -0.1], [1.2, 0.4]]);
        for &t in &[0.0, 0.25, 0.9] {
            let a = net.forward_velocity(&z, t, t, Some(1)).unwrap();
            let b = folded.forward_velocity(&z, t, t, Some(1)).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn band_limit_keeps_scaled_features_in_range() {
        let mut cfg = small();
        cfg.t_scale = 1000.0;
        let (f, on) = cfg.features();
        let first = on.iter().position(|&a| a).unwrap();
        assert_eq!(first, 42);
        assert!(f[first] <= MAX_PHASE_RATE * (1.0 + 1e-12));
        let (f1, on1) = small().features();
        assert!(on1.iter().all(|&a| a));
        // a 1000x shift moves the grid by exactly 42 steps
        assert_eq!(f[50], f1[8]);
    }

    #[test]
    fn rescaled_copy_is_the_same_function() {
        let mut cfg = small();
        cfg.t_scale = 1000.0;
        let teacher = init_velocity_net::<f64>(cfg, 6).unwrap();
        let student = teacher.rescaled_copy(1.0).unwrap();
        let z = Tensor::from_rows(&[[0.3, -0.1], [1.2, 0.4]]);
        for &(r, t) in &[(0.0, 0.0), (0.1, 0.5), (0.3, 1.0)] {
            let a = teacher.forward_velocity(&z, r, t, Some(0)).unwrap();
            let b = student.forward_velocity(&z, r, t, Some(0)).unwrap();
            assert_eq!(a, b);
        }
        assert!(teacher.rescaled_copy(2.0).is_err());
    }

    #[test]
    fn target_sync_modes() {
        let online = init_velocity_net::<f64>(small(), 1).unwrap();
        let other = init_velocity_net::<f64>(small(), 2).unwrap();

        let mut synced = TargetNet::new(&other, TargetMode::Synced).unwrap();
        synced.sync_target(&online).unwrap();
        assert_eq!(synced.net.max_param_diff(&online).unwrap(), 0.0);

        let mut frozen = TargetNet::new(&other, TargetMode::Ema { decay: 1.0 }).unwrap();
        frozen.sync_target(&online).unwrap();
        assert_eq!(frozen.net, other);

        let mut copy = TargetNet::new(&other, TargetMode::Ema { decay: 0.0 }).unwrap();
        copy.sync_target(&online).unwrap();
        assert_eq!(copy.net.max_param_diff(&online).unwrap(), 0.0);

        let mut cfg = small();
        cfg.hidden = 4;
        let mismatched = init_velocity_net::<f64>(cfg, 0).unwrap();
        assert!(synced.sync_target(&mismatched).is_err());
    }
}

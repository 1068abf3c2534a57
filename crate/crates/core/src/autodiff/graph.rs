//! Static computation graphs with reverse-mode and forward-mode sweeps.
//!
//! A [`Graph`] is an ordered list of primitive nodes; node `i` only reads
//! nodes `< i`. Shapes are fixed when the graph is built, so every shape
//! error is reported either by [`GraphBuilder`] or when inputs are bound.
//! Evaluation state lives in a per-call [`Trace`], which keeps graphs
//! immutable and shareable across threads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{DualTensor, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op<S> {
    /// Bound to the input slot with this index at evaluation time.
    Input(usize),
    Const(Tensor<S>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    /// `x [m, k] * w [k, n] + b [n]`, bias repeated over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    /// `x * sigmoid(x)`.
    Silu(NodeId),
    Exp(NodeId),
    /// Not differentiable where the input is exactly zero.
    Sqrt(NodeId),
    Powf(NodeId, S),
    /// Huber-style smooth L1 with transition width `beta`.
    SmoothL1(NodeId, S),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    /// `[B, 1] -> [B, 2F]`: `sin(f_j x)` then `cos(f_j x)`; inactive
    /// frequencies emit zeros.
    Sinusoid {
        x: NodeId,
        freqs: Vec<S>,
        active: Vec<bool>,
    },
    /// Sum of every element, shape `[1]`.
    SumAll(NodeId),
    /// Per-row sum, `[B, n] -> [B, 1]`.
    SumRows(NodeId),
    /// Explicit expansion `[B, 1] -> [B, n]`.
    ExpandCols(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    /// Concatenation along the trailing axis of two rank-2 tensors.
    Concat(NodeId, NodeId),
    /// Identity forward; zero cotangent and zero tangent.
    StopGrad(NodeId),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Powf(..) => "powf",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sinusoid { .. } => "sinusoid",
            Op::SumAll(_) => "sum_all",
            Op::SumRows(_) => "sum_rows",
            Op::ExpandCols(..) => "expand_cols",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::StopGrad(_) => "stop_grad",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Tanh(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::SmoothL1(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::ExpandCols(a, _)
            | Op::Reshape(a, _)
            | Op::StopGrad(a) => vec![*a],
            Op::Sinusoid { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<S> {
    pub op: Op<S>,
    pub shape: Vec<usize>,
    pub label: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    inputs: Vec<NodeId>,
    output: NodeId,
}

/// Incremental graph construction with eager shape inference.
#[derive(Debug, Default)]
pub struct GraphBuilder<S> {
    nodes: Vec<Node<S>>,
    inputs: Vec<NodeId>,
}

fn rank2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<S: Scalar> GraphBuilder<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: Vec::new(),
        }
    }

    fn err(&self, node: usize, op: &str, detail: String) -> Error {
        Error::Shape {
            node,
            label: op.to_string(),
            detail,
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            label: None,
        });
        self.nodes.len() - 1
    }

    fn check_ids(&self, op: &Op<S>) -> Result<()> {
        let next = self.nodes.len();
        for p in op.parents() {
            if p >= next {
                return Err(self.err(next, op.name(), format!("reads undefined node {p}")));
            }
        }
        Ok(())
    }

    /// Declares the next input slot with a fixed shape.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push(Op::Input(slot), shape.to_vec());
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id].label = Some(label.into());
        id
    }

    pub fn op(&mut self, op: Op<S>) -> Result<NodeId> {
        self.check_ids(&op)?;
        let at = self.nodes.len();
        let name = op.name();
        let shape = match &op {
            Op::Input(_) => {
                return Err(self.err(at, name, "use GraphBuilder::input".into()));
            }
            Op::Const(t) => t.shape().to_vec(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                if self.shape(*a) != self.shape(*b) {
                    return Err(self.err(
                        at,
                        name,
                        format!("operands {:?} and {:?}", self.shape(*a), self.shape(*b)),
                    ));
                }
                self.shape(*a).to_vec()
            }
            Op::MatMul(a, b) => match (rank2(self.shape(*a)), rank2(self.shape(*b))) {
                (Some((m, k)), Some((k2, n))) if k == k2 => vec![m, n],
                _ => {
                    return Err(self.err(
                        at,
                        name,
                        format!("cannot multiply {:?} by {:?}", self.shape(*a), self.shape(*b)),
                    ))
                }
            },
            Op::Affine { x, w, b } => {
                let bias_len: usize = self.shape(*b).iter().product();
                match (rank2(self.shape(*x)), rank2(self.shape(*w))) {
                    (Some((m, k)), Some((k2, n))) if k == k2 && bias_len == n => vec![m, n],
                    _ => {
                        return Err(self.err(
                            at,
                            name,
                            format!(
                                "x {:?}, w {:?}, b {:?}",
                                self.shape(*x),
                                self.shape(*w),
                                self.shape(*b)
                            ),
                        ))
                    }
                }
            }
            Op::Tanh(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::SmoothL1(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::StopGrad(a) => self.shape(*a).to_vec(),
            Op::Sinusoid { x, freqs, active } => {
                if freqs.len() != active.len() {
                    return Err(self.err(at, name, "freqs/active length differ".into()));
                }
                match rank2(self.shape(*x)) {
                    Some((rows, 1)) => vec![rows, 2 * freqs.len()],
                    _ => {
                        return Err(self.err(
                            at,
                            name,
                            format!("expects [B, 1], got {:?}", self.shape(*x)),
                        ))
                    }
                }
            }
            Op::SumAll(_) => vec![1],
            Op::SumRows(a) => match rank2(self.shape(*a)) {
                Some((rows, _)) => vec![rows, 1],
                None => {
                    return Err(self.err(
                        at,
                        name,
                        format!("expects rank 2, got {:?}", self.shape(*a)),
                    ))
                }
            },
            Op::ExpandCols(a, n) => match rank2(self.shape(*a)) {
                Some((rows, 1)) => vec![rows, *n],
                _ => {
                    return Err(self.err(
                        at,
                        name,
                        format!("expects [B, 1], got {:?}", self.shape(*a)),
                    ))
                }
            },
            Op::Reshape(a, shape) => {
                let have: usize = self.shape(*a).iter().product();
                let want: usize = shape.iter().product();
                if have != want {
                    return Err(self.err(
                        at,
                        name,
                        format!("cannot view {:?} as {shape:?}", self.shape(*a)),
                    ));
                }
                shape.clone()
            }
            Op::Concat(a, b) => match (rank2(self.shape(*a)), rank2(self.shape(*b))) {
                (Some((r1, c1)), Some((r2, c2))) if r1 == r2 => vec![r1, c1 + c2],
                _ => {
                    return Err(self.err(
                        at,
                        name,
                        format!("cannot concat {:?} and {:?}", self.shape(*a), self.shape(*b)),
                    ))
                }
            },
        };
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Mul(a, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::MatMul(a, b))
    }
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Affine { x, w, b })
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Tanh(a))
    }
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Silu(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Exp(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Sqrt(a))
    }
    pub fn powf(&mut self, a: NodeId, p: S) -> Result<NodeId> {
        self.op(Op::Powf(a, p))
    }
    pub fn smooth_l1(&mut self, a: NodeId, beta: S) -> Result<NodeId> {
        self.op(Op::SmoothL1(a, beta))
    }
    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.op(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.op(Op::AddScalar(a, c))
    }
    pub fn sinusoid(&mut self, x: NodeId, freqs: Vec<S>, active: Vec<bool>) -> Result<NodeId> {
        self.op(Op::Sinusoid { x, freqs, active })
    }
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::SumAll(a))
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::SumRows(a))
    }
    pub fn expand_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.op(Op::ExpandCols(a, n))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.op(Op::Reshape(a, shape))
    }
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Concat(a, b))
    }
    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::StopGrad(a))
    }

    pub fn finish(self, output: NodeId) -> Result<Graph<S>> {
        if output >= self.nodes.len() {
            return Err(Error::Shape {
                node: output,
                label: "output".into(),
                detail: "output node does not exist".into(),
            });
        }
        Ok(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            output,
        })
    }
}

/// Node values recorded by one forward (or forward-mode) sweep.
pub struct Trace<'a, S> {
    graph: &'a Graph<S>,
    inputs: Vec<&'a Tensor<S>>,
    values: Vec<Option<Tensor<S>>>,
}

impl<'a, S: Scalar> Trace<'a, S> {
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        match &self.graph.nodes[id].op {
            Op::Input(slot) => self.inputs[*slot],
            _ => self.values[id].as_ref().expect("node evaluated"),
        }
    }

    pub fn output(&self) -> &Tensor<S> {
        self.value(self.graph.output)
    }

    pub fn graph(&self) -> &'a Graph<S> {
        self.graph
    }
}

#[cfg(test)]
thread_local! {
    /// Test-only fault injection: scales the tanh adjoint by 1.1.
    pub(crate) static CORRUPT_TANH_ADJOINT: std::cell::Cell<bool> =
        const { std::cell::Cell::new(false) };
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[inline]
fn smooth_l1_grad<S: Scalar>(x: S, beta: S) -> S {
    if x.abs() < beta {
        x / beta
    } else if x > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

fn matmul_into<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out: &mut Tensor<S>,
    beta: S,
    trans_a: bool,
    trans_b: bool,
) {
    // logical shapes after optional transposition
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, sa) = if trans_a { (ac, ar, (1, ac)) } else { (ar, ac, (ac, 1)) };
    let (k2, n, sb) = if trans_b { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
    debug_assert_eq!(k, k2);
    S::gemm(m, k, n, S::one(), a.data(), sa, b.data(), sb, beta, out.data_mut(), (n, 1));
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contribution: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, &c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn zeros_slot<'s, S: Scalar>(slot: &'s mut Option<Tensor<S>>, shape: &[usize]) -> &'s mut Tensor<S> {
    slot.get_or_insert_with(|| Tensor::zeros(shape))
}

impl<S: Scalar> Graph<S> {
    pub fn nodes(&self) -> &[Node<S>] {
        &self.nodes
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_shape(&self, slot: usize) -> &[usize] {
        &self.nodes[self.inputs[slot]].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    fn label(&self, id: NodeId) -> String {
        let node = &self.nodes[id];
        match &node.label {
            Some(l) => format!("{} '{}'", node.op.name(), l),
            None => node.op.name().to_string(),
        }
    }

    fn bind<'a>(&'a self, inputs: &[&'a Tensor<S>]) -> Result<Vec<&'a Tensor<S>>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Shape {
                node: 0,
                label: "inputs".into(),
                detail: format!(
                    "graph takes {} inputs, {} given",
                    self.inputs.len(),
                    inputs.len()
                ),
            });
        }
        for (slot, (&id, t)) in self.inputs.iter().zip(inputs).enumerate() {
            if t.shape() != self.nodes[id].shape.as_slice() {
                return Err(Error::Shape {
                    node: id,
                    label: self.label(id),
                    detail: format!(
                        "input slot {slot} expects {:?}, got {:?}",
                        self.nodes[id].shape,
                        t.shape()
                    ),
                });
            }
        }
        Ok(inputs.to_vec())
    }

    /// Evaluates the graph and returns its output.
    pub fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let trace = self.trace(inputs)?;
        Ok(trace.output().clone())
    }

    /// Evaluates the graph and keeps every intermediate value.
    pub fn trace<'a>(&'a self, inputs: &[&'a Tensor<S>]) -> Result<Trace<'a, S>> {
        let inputs = self.bind(inputs)?;
        let mut trace = Trace {
            graph: self,
            inputs,
            values: Vec::with_capacity(self.nodes.len()),
        };
        for id in 0..self.nodes.len() {
            let v = self.eval_node(id, &trace);
            trace.values.push(v);
        }
        Ok(trace)
    }

    fn eval_node(&self, id: NodeId, tr: &Trace<'_, S>) -> Option<Tensor<S>> {
        let node = &self.nodes[id];
        let v = |i: NodeId| tr.value(i);
        let out = match &node.op {
            Op::Input(_) => return None,
            Op::Const(t) => t.clone(),
            Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
            Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
            Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
            Op::MatMul(a, b) => {
                let mut out = Tensor::zeros(&node.shape);
                matmul_into(v(*a), v(*b), &mut out, S::zero(), false, false);
                out
            }
            Op::Affine { x, w, b } => {
                let n = node.shape[1];
                let bias = v(*b).data();
                let mut out = Tensor::from_fn(&node.shape, |i| bias[i % n]);
                matmul_into(v(*x), v(*w), &mut out, S::one(), false, false);
                out
            }
            Op::Tanh(a) => v(*a).map(|x| x.tanh()),
            Op::Silu(a) => v(*a).map(|x| x * sigmoid(x)),
            Op::Exp(a) => v(*a).map(|x| x.exp()),
            Op::Sqrt(a) => v(*a).map(|x| x.sqrt()),
            Op::Powf(a, p) => v(*a).map(|x| x.powf(*p)),
            Op::SmoothL1(a, beta) => {
                let half = S::lit(0.5);
                v(*a).map(|x| {
                    if x.abs() < *beta {
                        half * x * x / *beta
                    } else {
                        x.abs() - half * *beta
                    }
                })
            }
            Op::Scale(a, c) => v(*a).map(|x| x * *c),
            Op::AddScalar(a, c) => v(*a).map(|x| x + *c),
            Op::Sinusoid { x, freqs, active } => {
                let xs = v(*x).data();
                let nf = freqs.len();
                let mut out = Tensor::zeros(&node.shape);
                for (row, &t) in xs.iter().enumerate() {
                    let dst = out.row_mut(row);
                    for j in 0..nf {
                        if active[j] {
                            let (s, c) = (freqs[j] * t).sin_cos();
                            dst[j] = s;
                            dst[nf + j] = c;
                        }
                    }
                }
                out
            }
            Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
            Op::SumRows(a) => {
                let src = v(*a);
                Tensor::column((0..src.rows()).map(|r| src.row(r).iter().copied().sum()).collect())
            }
            Op::ExpandCols(a, n) => {
                let src = v(*a).data();
                Tensor::from_fn(&node.shape, |i| src[i / n])
            }
            Op::Reshape(a, shape) => v(*a).clone().reshaped(shape.clone()).expect("checked"),
            Op::Concat(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let mut out = Tensor::zeros(&node.shape);
                for r in 0..ta.rows() {
                    let dst = out.row_mut(r);
                    let ca = ta.cols();
                    dst[..ca].copy_from_slice(ta.row(r));
                    dst[ca..].copy_from_slice(tb.row(r));
                }
                out
            }
            Op::StopGrad(a) => v(*a).clone(),
        };
        Some(out)
    }

    /// Gradients of `seed . output` with respect to every input slot.
    pub fn backward(&self, inputs: &[&Tensor<S>], seed: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let trace = self.trace(inputs)?;
        self.backward_trace(&trace, seed, None)
    }

    /// Reverse sweep over a recorded trace.
    ///
    /// `wrt` restricts which input slots need gradients; slots left out get
    /// zero tensors and the work feeding only them is skipped.
    pub fn backward_trace(
        &self,
        trace: &Trace<'_, S>,
        seed: &Tensor<S>,
        wrt: Option<&[bool]>,
    ) -> Result<Vec<Tensor<S>>> {
        let out_shape = &self.nodes[self.output].shape;
        if seed.shape() != out_shape.as_slice() {
            return Err(Error::Shape {
                node: self.output,
                label: self.label(self.output),
                detail: format!("seed {:?} does not match output {:?}", seed.shape(), out_shape),
            });
        }
        let needs = self.needs_grad(wrt);
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        adj[self.output] = Some(seed.clone());

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            let node = &self.nodes[id];
            let v = |i: NodeId| trace.value(i);
            let (lower, _) = adj.split_at_mut(id);
            match &node.op {
                Op::Input(slot) => {
                    // keep the adjoint of the input node for collection below
                    adj[id] = Some(g);
                    let _ = slot;
                }
                Op::Const(_) | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    if needs[*a] {
                        accumulate(&mut lower[*a], g.clone());
                    }
                    if needs[*b] {
                        accumulate(&mut lower[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs[*a] {
                        accumulate(&mut lower[*a], g.clone());
                    }
                    if needs[*b] {
                        accumulate(&mut lower[*b], g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if needs[*a] {
                        accumulate(&mut lower[*a], g.zip_map(v(*b), |x, y| x * y));
                    }
                    if needs[*b] {
                        accumulate(&mut lower[*b], g.zip_map(v(*a), |x, y| x * y));
                    }
                }
                Op::MatMul(a, b) => {
                    if needs[*a] {
                        let shape = self.nodes[*a].shape.clone();
                        matmul_into(&g, v(*b), zeros_slot(&mut lower[*a], &shape), S::one(), false, true);
                    }
                    if needs[*b] {
                        let shape = self.nodes[*b].shape.clone();
                        matmul_into(v(*a), &g, zeros_slot(&mut lower[*b], &shape), S::one(), true, false);
                    }
                }
                Op::Affine { x, w, b } => {
                    if needs[*x] {
                        let shape = self.nodes[*x].shape.clone();
                        matmul_into(&g, v(*w), zeros_slot(&mut lower[*x], &shape), S::one(), false, true);
                    }
                    if needs[*w] {
                        let shape = self.nodes[*w].shape.clone();
                        matmul_into(v(*x), &g, zeros_slot(&mut lower[*w], &shape), S::one(), true, false);
                    }
                    if needs[*b] {
                        let shape = self.nodes[*b].shape.clone();
                        let n = node.shape[1];
                        let db = zeros_slot(&mut lower[*b], &shape);
                        for r in 0..g.rows() {
                            for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        debug_assert_eq!(db.len(), n);
                    }
                }
                Op::Tanh(a) => {
                    let y = trace.value(id);
                    #[allow(unused_mut)]
                    let mut da = g.zip_map(y, |gy, y| gy * (S::one() - y * y));
                    #[cfg(test)]
                    if CORRUPT_TANH_ADJOINT.with(|c| c.get()) {
                        da = da.scale(S::lit(1.1));
                    }
                    accumulate(&mut lower[*a], da);
                }
                Op::Silu(a) => {
                    accumulate(&mut lower[*a], g.zip_map(v(*a), |gy, x| gy * silu_grad(x)));
                }
                Op::Exp(a) => {
                    let y = trace.value(id);
                    accumulate(&mut lower[*a], g.zip_map(y, |gy, y| gy * y));
                }
                Op::Sqrt(a) => {
                    let y = trace.value(id);
                    if let Some(pos) = y.data().iter().zip(g.data()).position(|(&y, &gy)| y == S::zero() && gy != S::zero()) {
                        return Err(Error::NonDifferentiable {
                            node: id,
                            label: self.label(id),
                            detail: format!("sqrt at zero (element {pos})"),
                        });
                    }
                    let half = S::lit(0.5);
                    accumulate(
                        &mut lower[*a],
                        g.zip_map(y, |gy, y| if gy == S::zero() { gy } else { gy * half / y }),
                    );
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    accumulate(
                        &mut lower[*a],
                        g.zip_map(v(*a), |gy, x| gy * p * x.powf(p - S::one())),
                    );
                }
                Op::SmoothL1(a, beta) => {
                    let beta = *beta;
                    accumulate(&mut lower[*a], g.zip_map(v(*a), |gy, x| gy * smooth_l1_grad(x, beta)));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut lower[*a], g.map(|x| x * c));
                }
                Op::AddScalar(a, _) | Op::Reshape(a, _) => {
                    let shape = self.nodes[*a].shape.clone();
                    accumulate(&mut lower[*a], g.reshaped(shape).expect("checked"));
                }
                Op::Sinusoid { x, freqs, active } => {
                    let xs = v(*x).data();
                    let nf = freqs.len();
                    let mut dx = Tensor::zeros(&self.nodes[*x].shape);
                    for (row, (&t, d)) in xs.iter().zip(dx.data_mut()).enumerate() {
                        let gr = g.row(row);
                        let mut acc = S::zero();
                        for j in 0..nf {
                            if active[j] {
                                let (s, c) = (freqs[j] * t).sin_cos();
                                acc += freqs[j] * (gr[j] * c - gr[nf + j] * s);
                            }
                        }
                        *d = acc;
                    }
                    accumulate(&mut lower[*x], dx);
                }
                Op::SumAll(a) => {
                    let s = g.data()[0];
                    accumulate(&mut lower[*a], Tensor::full(&self.nodes[*a].shape, s));
                }
                Op::SumRows(a) => {
                    let shape = &self.nodes[*a].shape;
                    let n = shape[1];
                    let gd = g.data();
                    accumulate(&mut lower[*a], Tensor::from_fn(shape, |i| gd[i / n]));
                }
                Op::ExpandCols(a, _) => {
                    let da = Tensor::column((0..g.rows()).map(|r| g.row(r).iter().copied().sum()).collect());
                    accumulate(&mut lower[*a], da);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].shape[1];
                    let cb = self.nodes[*b].shape[1];
                    if needs[*a] {
                        let da = Tensor::from_fn(&self.nodes[*a].shape, |i| g.row(i / ca)[i % ca]);
                        accumulate(&mut lower[*a], da);
                    }
                    if needs[*b] {
                        let db = Tensor::from_fn(&self.nodes[*b].shape, |i| g.row(i / cb)[ca + i % cb]);
                        accumulate(&mut lower[*b], db);
                    }
                }
            }
        }

        Ok(self
            .inputs
            .iter()
            .map(|&id| {
                adj[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[id].shape))
            })
            .collect())
    }

    fn needs_grad(&self, wrt: Option<&[bool]>) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Input(slot) => wrt.map_or(true, |w| w.get(*slot).copied().unwrap_or(false)),
                Op::Const(_) | Op::StopGrad(_) => false,
                op => op.parents().iter().any(|&p| needs[p]),
            };
        }
        needs
    }

    /// Directional derivative of the output along `tangents` (`None` = zero).
    pub fn jvp(&self, inputs: &[&Tensor<S>], tangents: &[Option<&Tensor<S>>]) -> Result<DualTensor<S>> {
        let (trace, tangent) = self.jvp_trace(inputs, tangents)?;
        DualTensor::new(trace.output().clone(), tangent)
    }

    /// Forward-mode sweep that also keeps the primal trace for a later
    /// reverse sweep.
    pub fn jvp_trace<'a>(
        &'a self,
        inputs: &[&'a Tensor<S>],
        tangents: &[Option<&Tensor<S>>],
    ) -> Result<(Trace<'a, S>, Tensor<S>)> {
        let inputs = self.bind(inputs)?;
        if tangents.len() != self.inputs.len() {
            return Err(Error::Shape {
                node: 0,
                label: "tangents".into(),
                detail: format!("{} tangents for {} inputs", tangents.len(), self.inputs.len()),
            });
        }
        for (slot, t) in tangents.iter().enumerate() {
            if let Some(t) = t {
                if t.shape() != inputs[slot].shape() {
                    let id = self.inputs[slot];
                    return Err(Error::Shape {
                        node: id,
                        label: self.label(id),
                        detail: format!(
                            "tangent for slot {slot} has shape {:?}, input has {:?}",
                            t.shape(),
                            inputs[slot].shape()
                        ),
                    });
                }
            }
        }

        let mut trace = Trace {
            graph: self,
            inputs,
            values: Vec::with_capacity(self.nodes.len()),
        };
        let mut tan: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let v = self.eval_node(id, &trace);
            trace.values.push(v);
            let t = self.tangent_node(id, &trace, &tan, tangents)?;
            tan.push(t);
        }
        let out = tan[self.output]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[self.output].shape));
        Ok((trace, out))
    }

    fn tangent_node(
        &self,
        id: NodeId,
        tr: &Trace<'_, S>,
        tan: &[Option<Tensor<S>>],
        seeds: &[Option<&Tensor<S>>],
    ) -> Result<Option<Tensor<S>>> {
        let node = &self.nodes[id];
        let v = |i: NodeId| tr.value(i);
        let t = |i: NodeId| tan[i].as_ref();
        let out = match &node.op {
            Op::Input(slot) => seeds[*slot].cloned(),
            Op::Const(_) | Op::StopGrad(_) => None,
            Op::Add(a, b) => match (t(*a), t(*b)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x.clone()),
                (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| p + q)),
            },
            Op::Sub(a, b) => match (t(*a), t(*b)) {
                (None, None) => None,
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(y.map(|q| -q)),
                (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| p - q)),
            },
            Op::Mul(a, b) => {
                let mut acc: Option<Tensor<S>> = None;
                if let Some(da) = t(*a) {
                    acc = Some(da.zip_map(v(*b), |p, q| p * q));
                }
                if let Some(db) = t(*b) {
                    let c = db.zip_map(v(*a), |p, q| p * q);
                    accumulate(&mut acc, c);
                }
                acc
            }
            Op::MatMul(a, b) => {
                let mut acc: Option<Tensor<S>> = None;
                if let Some(da) = t(*a) {
                    matmul_into(da, v(*b), zeros_slot(&mut acc, &node.shape), S::one(), false, false);
                }
                if let Some(db) = t(*b) {
                    matmul_into(v(*a), db, zeros_slot(&mut acc, &node.shape), S::one(), false, false);
                }
                acc
            }
            Op::Affine { x, w, b } => {
                let mut acc: Option<Tensor<S>> = None;
                if let Some(db) = t(*b) {
                    let n = node.shape[1];
                    let bias = db.data();
                    acc = Some(Tensor::from_fn(&node.shape, |i| bias[i % n]));
                }
                if let Some(dx) = t(*x) {
                    matmul_into(dx, v(*w), zeros_slot(&mut acc, &node.shape), S::one(), false, false);
                }
                if let Some(dw) = t(*w) {
                    matmul_into(v(*x), dw, zeros_slot(&mut acc, &node.shape), S::one(), false, false);
                }
                acc
            }
            Op::Tanh(a) => t(*a).map(|da| da.zip_map(tr.value(id), |d, y| d * (S::one() - y * y))),
            Op::Silu(a) => t(*a).map(|da| da.zip_map(v(*a), |d, x| d * silu_grad(x))),
            Op::Exp(a) => t(*a).map(|da| da.zip_map(tr.value(id), |d, y| d * y)),
            Op::Sqrt(a) => match t(*a) {
                None => None,
                Some(da) => {
                    let y = tr.value(id);
                    if let Some(pos) = y
                        .data()
                        .iter()
                        .zip(da.data())
                        .position(|(&y, &d)| y == S::zero() && d != S::zero())
                    {
                        return Err(Error::NonDifferentiable {
                            node: id,
                            label: self.label(id),
                            detail: format!("sqrt at zero (element {pos})"),
                        });
                    }
                    let half = S::lit(0.5);
                    Some(da.zip_map(y, |d, y| if d == S::zero() { d } else { d * half / y }))
                }
            },
            Op::Powf(a, p) => {
                let p = *p;
                t(*a).map(|da| da.zip_map(v(*a), |d, x| d * p * x.powf(p - S::one())))
            }
            Op::SmoothL1(a, beta) => {
                let beta = *beta;
                t(*a).map(|da| da.zip_map(v(*a), |d, x| d * smooth_l1_grad(x, beta)))
            }
            Op::Scale(a, c) => {
                let c = *c;
                t(*a).map(|da| da.map(|d| d * c))
            }
            Op::AddScalar(a, _) => t(*a).cloned(),
            Op::Sinusoid { x, freqs, active } => match t(*x) {
                None => None,
                Some(dx) => {
                    let xs = v(*x).data();
                    let nf = freqs.len();
                    let mut out = Tensor::zeros(&node.shape);
                    for (row, (&tv, &d)) in xs.iter().zip(dx.data()).enumerate() {
                        let dst = out.row_mut(row);
                        for j in 0..nf {
                            if active[j] {
                                let (s, c) = (freqs[j] * tv).sin_cos();
                                dst[j] = freqs[j] * c * d;
                                dst[nf + j] = -freqs[j] * s * d;
                            }
                        }
                    }
                    Some(out)
                }
            },
            Op::SumAll(a) => t(*a).map(|da| Tensor::scalar(da.sum())),
            Op::SumRows(a) => t(*a).map(|da| {
                Tensor::column((0..da.rows()).map(|r| da.row(r).iter().copied().sum()).collect())
            }),
            Op::ExpandCols(a, n) => t(*a).map(|da| {
                let src = da.data();
                Tensor::from_fn(&node.shape, |i| src[i / n])
            }),
            Op::Reshape(a, shape) => t(*a).map(|da| da.clone().reshaped(shape.clone()).expect("checked")),
            Op::Concat(a, b) => {
                if t(*a).is_none() && t(*b).is_none() {
                    None
                } else {
                    let ca = self.nodes[*a].shape[1];
                    let za = Tensor::zeros(&self.nodes[*a].shape);
                    let zb = Tensor::zeros(&self.nodes[*b].shape);
                    let ta = t(*a).unwrap_or(&za);
                    let tb = t(*b).unwrap_or(&zb);
                    let mut out = Tensor::zeros(&node.shape);
                    for r in 0..node.shape[0] {
                        let dst = out.row_mut(r);
                        dst[..ca].copy_from_slice(ta.row(r));
                        dst[ca..].copy_from_slice(tb.row(r));
                    }
                    Some(out)
                }
            }
        };
        Ok(out)
    }
}

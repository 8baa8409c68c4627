//! Reverse-mode automatic differentiation over a small, closed set of
//! primitives.
//!
//! A [`Graph`] is an append-only list of nodes; each node may only read
//! nodes inserted before it, so insertion order is a topological order.
//! Leaves are looked up by name at [`Graph::forward`] time, which keeps the
//! graph itself immutable and shareable across threads.
//!
//! Broadcasting is limited to one rule: the right operand of `add`/`mul` may
//! drop the leading (batch) dimension of the left operand.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Named tensor bound at evaluation time (inputs and parameters alike).
    Leaf(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Mean over every element (`axis: None`) or over the leading axis.
    Mean {
        input: NodeId,
        axis: Option<usize>,
    },
    /// Biased (1/n) variance, same reduction rules as `Mean`.
    Variance {
        input: NodeId,
        axis: Option<usize>,
    },
    Rsqrt(NodeId),
    Relu(NodeId),
    /// Mean over the batch of `-Σ_c y_bc log softmax(z_b)_c`.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: NodeId,
    },
    Reshape {
        input: NodeId,
        shape: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Mean { .. } => "mean",
            Op::Variance { .. } => "variance",
            Op::Rsqrt(_) => "rsqrt",
            Op::Relu(_) => "relu",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Mean { input, .. } | Op::Variance { input, .. } | Op::Reshape { input, .. } => {
                vec![*input]
            }
            Op::Rsqrt(x) | Op::Relu(x) => vec![*x],
            Op::SoftmaxCrossEntropy { logits, targets } => vec![*logits, *targets],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

/// Values of every node from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(
                input.0 < self.nodes.len(),
                "node input {} does not precede node {}",
                input.0,
                self.nodes.len()
            );
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn mean(&mut self, input: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Mean { input, axis })
    }

    pub fn variance(&mut self, input: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Variance { input, axis })
    }

    pub fn rsqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Rsqrt(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { input, shape })
    }

    /// Names of all leaves, in insertion order.
    pub fn leaf_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Leaf(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn forward(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Leaf(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Unbound(name.clone()))?,
                Op::Const(t) => t.clone(),
                _ => {
                    let out = eval_op(idx, op, &values)?;
                    if !out.is_finite() {
                        return Err(Error::NonFinite {
                            node: idx,
                            op: op.name(),
                        });
                    }
                    out
                }
            };
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Gradients of the scalar `output` with respect to each named tensor in
    /// `params`. Names that do not reach `output` get zero tensors.
    pub fn backward(
        &self,
        eval: &Evaluation,
        output: NodeId,
        params: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let out_value = eval.value(output);
        if out_value.numel() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        let mut result: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect();

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let op = &self.nodes[idx];
            if let Op::Leaf(name) = op {
                if let Some(acc) = result.get_mut(name) {
                    if acc.numel() != grad.len() {
                        return Err(Error::Shape {
                            node: idx,
                            op: "leaf",
                            detail: format!(
                                "parameter `{name}` has {} elements, bound value has {}",
                                acc.numel(),
                                grad.len()
                            ),
                        });
                    }
                    for (a, g) in acc.data_mut().iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
                continue;
            }
            for (input, contribution) in backprop_op(op, &eval.values, &grad) {
                match &mut grads[input.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contribution) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(result)
    }
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

/// How the right operand of an elementwise op lines up with the left one.
fn broadcast_rhs(node: usize, op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || (a.rank() >= 1 && &a.shape()[1..] == b.shape()) {
        Ok(())
    } else {
        Err(shape_err(
            node,
            op,
            format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

fn reduced_shape(node: usize, op: &'static str, x: &Tensor, axis: Option<usize>) -> Result<(Vec<usize>, usize, usize)> {
    match axis {
        None => {
            if x.numel() == 0 {
                return Err(shape_err(node, op, "empty tensor".into()));
            }
            Ok((Vec::new(), x.numel(), 1))
        }
        Some(0) if x.rank() >= 1 && x.shape()[0] > 0 => {
            let outer = x.shape()[0];
            Ok((x.shape()[1..].to_vec(), outer, x.numel() / outer))
        }
        Some(a) => Err(shape_err(
            node,
            op,
            format!("unsupported reduction axis {a} for shape {:?}", x.shape()),
        )),
    }
}

fn column_means(data: &[f64], outer: usize, inner: usize) -> Vec<f64> {
    let mut mean = vec![0.0; inner];
    for row in data.chunks_exact(inner) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = outer as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

fn log_softmax_rows(z: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

fn eval_op(node: usize, op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Op::Leaf(_) | Op::Const(_) => unreachable!("leaves are bound by forward"),
        Op::MatMul(a, b) => {
            let (a, b) = (&values[a.0], &values[b.0]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(node, name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (&values[a.0], &values[b.0]);
            broadcast_rhs(node, name, a, b)?;
            let inner = b.numel().max(1);
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let y = b.data()[i % inner];
                    if matches!(op, Op::Add(..)) {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Mean { input, axis } => {
            let x = &values[input.0];
            let (shape, outer, inner) = reduced_shape(node, name, x, *axis)?;
            Tensor::new(shape, column_means(x.data(), outer, inner))
        }
        Op::Variance { input, axis } => {
            let x = &values[input.0];
            let (shape, outer, inner) = reduced_shape(node, name, x, *axis)?;
            let mean = column_means(x.data(), outer, inner);
            let mut var = vec![0.0; inner];
            for row in x.data().chunks_exact(inner) {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = x - m;
                    *v += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= outer as f64);
            Tensor::new(shape, var)
        }
        Op::Rsqrt(x) => Ok(values[x.0].map(|v| 1.0 / v.sqrt())),
        Op::Relu(x) => Ok(values[x.0].map(|v| v.max(0.0))),
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let (z, y) = (&values[logits.0], &values[targets.0]);
            if z.rank() != 2 || z.shape() != y.shape() || z.shape()[0] == 0 {
                return Err(shape_err(
                    node,
                    name,
                    format!("logits {:?} vs targets {:?}", z.shape(), y.shape()),
                ));
            }
            let (batch, classes) = (z.shape()[0], z.shape()[1]);
            let logp = log_softmax_rows(z.data(), classes);
            let total: f64 = logp.iter().zip(y.data()).map(|(lp, t)| -t * lp).sum();
            Ok(Tensor::scalar(total / batch as f64))
        }
        Op::Reshape { input, shape } => {
            let x = &values[input.0];
            x.reshape(shape)
                .map_err(|_| shape_err(node, name, format!("cannot reshape {:?} into {:?}", x.shape(), shape)))
        }
    }
}

/// Gradient contributions of one node to each of its inputs.
fn backprop_op(op: &Op, values: &[Tensor], grad: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    match op {
        Op::Leaf(_) | Op::Const(_) => vec![],
        Op::MatMul(a_id, b_id) => {
            let (a, b) = (&values[a_id.0], &values[b_id.0]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let g_row = &grad[i * n..(i + 1) * n];
                for p in 0..k {
                    let b_row = &b.data()[p * n..(p + 1) * n];
                    da[i * k + p] = g_row.iter().zip(b_row).map(|(g, b)| g * b).sum();
                    let a_ip = a.data()[i * k + p];
                    for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                        *d += a_ip * g;
                    }
                }
            }
            vec![(*a_id, da), (*b_id, db)]
        }
        Op::Add(a_id, b_id) => {
            let inner = values[b_id.0].numel().max(1);
            let mut db = vec![0.0; inner];
            for (i, g) in grad.iter().enumerate() {
                db[i % inner] += g;
            }
            vec![(*a_id, grad.to_vec()), (*b_id, db)]
        }
        Op::Mul(a_id, b_id) => {
            let (a, b) = (&values[a_id.0], &values[b_id.0]);
            let inner = b.numel().max(1);
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; inner];
            for (i, g) in grad.iter().enumerate() {
                da[i] = g * b.data()[i % inner];
                db[i % inner] += g * a.data()[i];
            }
            vec![(*a_id, da), (*b_id, db)]
        }
        Op::Mean { input, axis } => {
            let x = &values[input.0];
            let (outer, inner) = reduction_dims(x, *axis);
            let dx = (0..x.numel()).map(|i| grad[i % inner] / outer as f64).collect();
            vec![(*input, dx)]
        }
        Op::Variance { input, axis } => {
            let x = &values[input.0];
            let (outer, inner) = reduction_dims(x, *axis);
            let mean = column_means(x.data(), outer, inner);
            let scale = 2.0 / outer as f64;
            let dx = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| grad[i % inner] * scale * (v - mean[i % inner]))
                .collect();
            vec![(*input, dx)]
        }
        Op::Rsqrt(x_id) => {
            let x = &values[x_id.0];
            let dx = x
                .data()
                .iter()
                .zip(grad)
                .map(|(v, g)| {
                    let y = 1.0 / v.sqrt();
                    -0.5 * g * y * y * y
                })
                .collect();
            vec![(*x_id, dx)]
        }
        Op::Relu(x_id) => {
            let x = &values[x_id.0];
            let dx = x
                .data()
                .iter()
                .zip(grad)
                .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![(*x_id, dx)]
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let (z, y) = (&values[logits.0], &values[targets.0]);
            let (batch, classes) = (z.shape()[0], z.shape()[1]);
            let logp = log_softmax_rows(z.data(), classes);
            let g = grad[0] / batch as f64;
            let mut dz = vec![0.0; z.numel()];
            let mut dy = vec![0.0; y.numel()];
            for b in 0..batch {
                let row = b * classes..(b + 1) * classes;
                let mass: f64 = y.data()[row.clone()].iter().sum();
                for i in row {
                    dz[i] = g * (logp[i].exp() * mass - y.data()[i]);
                    dy[i] = -g * logp[i];
                }
            }
            vec![(*logits, dz), (*targets, dy)]
        }
        Op::Reshape { input, .. } => vec![(*input, grad.to_vec())],
    }
}

fn reduction_dims(x: &Tensor, axis: Option<usize>) -> (usize, usize) {
    match axis {
        None => (x.numel(), 1),
        Some(_) => {
            let outer = x.shape()[0];
            (outer, x.numel() / outer)
        }
    }
}

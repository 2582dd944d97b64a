use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Lower clamp on the product of norms in the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    LogSumExp(NodeId, Option<usize>),
    L2Norm(NodeId, Option<usize>),
    Cosine(NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogSumExp(..) => "logsumexp",
            Op::L2Norm(..) => "l2_norm",
            Op::Cosine(..) => "cosine",
            Op::Gather(..) => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Reshape(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::LogSumExp(a, _)
            | Op::L2Norm(a, _)
            | Op::Gather(a, _) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run computation graph.
///
/// Every builder method evaluates its node eagerly and records the operation,
/// so the graph can later be re-evaluated with new leaf values
/// ([`Graph::evaluate`]) and differentiated in reverse ([`Graph::backward`]).
/// Gradients are kept for every node that depends on a `requires_grad` leaf,
/// which lets callers read gradients with respect to intermediate values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents and the reduced shape.
fn split_axis(shape: &[usize], axis: Option<usize>) -> Option<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Some((1, shape.iter().product(), 1, Vec::new())),
        Some(ax) if ax < shape.len() => {
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(ax);
            Some((outer, shape[ax], inner, out))
        }
        Some(_) => None,
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: callers pass slices whose extents match the given dimensions and
    // strides; the output is a dense row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of the last output(s) with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Accumulated gradient as a tensor; zeros when nothing has flowed into `id`.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let v = &self.nodes[id.0].value;
        match v.grad() {
            Some(g) => Tensor::new(v.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(v.shape().to_vec()),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Leaf whose `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value.with_requires_grad(false))
    }

    /// Named leaf that can be rebound by [`Graph::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Ids of every leaf that requires a gradient, in creation order.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.value.requires_grad())
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Name bound to `id`, if any.
    pub fn name_of(&self, id: NodeId) -> Option<&str> {
        self.names
            .iter()
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
    }

    pub(crate) fn set_leaf_value(&mut self, id: NodeId, data: &[f64]) {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        self.nodes[id.0].value.data_mut().copy_from_slice(data);
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let mut value = self.compute(&op)?;
        let rg = op.inputs().iter().any(|i| self.nodes[i.0].value.requires_grad());
        value.set_requires_grad(rg);
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId]) -> Error {
        Error::Shape {
            op,
            shapes: ids.iter().map(|i| self.shape(*i).to_vec()).collect(),
        }
    }

    fn compute(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(self.mismatch("matmul", &[*a, *b]));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, self.data(*a), (k, 1), self.data(*b), (n, 1), &mut out);
                Tensor::new(vec![m, n], out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                if self.shape(*a) != self.shape(*b) {
                    return Err(self.mismatch(op.name(), &[*a, *b]));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(x, y)| f(*x, *y))
                    .collect();
                Tensor::new(self.shape(*a).to_vec(), out)
            }
            Op::AddRow(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
                    return Err(self.mismatch("add_row", &[*a, *b]));
                }
                let bias = self.data(*b);
                let mut out = self.data(*a).to_vec();
                for row in out.chunks_mut(sb[0].max(1)) {
                    row.iter_mut().zip(bias).for_each(|(x, y)| *x += y);
                }
                Tensor::new(sa.to_vec(), out)
            }
            Op::Scale(a, s) => self.map(*a, |x| x * s),
            Op::Relu(a) => self.map(*a, |x| x.max(0.0)),
            Op::Gelu(a) => self.map(*a, gelu),
            Op::Exp(a) => self.map(*a, f64::exp),
            Op::Log(a) => self.map(*a, f64::ln),
            Op::Reshape(_) => unreachable!("reshape is computed by its builder"),
            Op::Concat(xs, axis) => self.compute_concat(xs, *axis),
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::LogSumExp(a, axis) | Op::L2Norm(a, axis) => {
                let (outer, len, inner, out_shape) = split_axis(self.shape(*a), *axis)
                    .ok_or_else(|| self.mismatch(op.name(), &[*a]))?;
                let x = self.data(*a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let lane = (0..len).map(|l| x[(o * len + l) * inner + i]);
                        out[o * inner + i] = match op {
                            Op::Sum(..) => lane.sum(),
                            Op::Mean(..) => lane.sum::<f64>() / len as f64,
                            Op::L2Norm(..) => lane.map(|v| v * v).sum::<f64>().sqrt(),
                            _ => {
                                let m = lane.clone().fold(f64::NEG_INFINITY, f64::max);
                                if m == f64::NEG_INFINITY {
                                    f64::NEG_INFINITY
                                } else {
                                    m + lane.map(|v| (v - m).exp()).sum::<f64>().ln()
                                }
                            }
                        };
                    }
                }
                Tensor::new(out_shape, out)
            }
            Op::Cosine(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa != sb || sa.is_empty() || sa.len() > 2 {
                    return Err(self.mismatch("cosine", &[*a, *b]));
                }
                let d = *sa.last().unwrap();
                let (xa, xb) = (self.data(*a), self.data(*b));
                let out: Vec<f64> = xa
                    .chunks(d.max(1))
                    .zip(xb.chunks(d.max(1)))
                    .map(|(u, v)| {
                        let den = (dot(u, u).sqrt() * dot(v, v).sqrt()).max(COSINE_EPS);
                        dot(u, v) / den
                    })
                    .collect();
                let shape = if sa.len() == 1 { Vec::new() } else { vec![sa[0]] };
                Tensor::new(shape, out)
            }
            Op::Gather(a, idx) => {
                let sa = self.shape(*a);
                if sa.is_empty() {
                    return Err(self.mismatch("gather_rows", &[*a]));
                }
                let row: usize = sa[1..].iter().product();
                if let Some(bad) = idx.iter().find(|&&i| i >= sa[0]) {
                    return Err(invalid(format!(
                        "gather_rows index {bad} out of bounds for {} rows",
                        sa[0]
                    )));
                }
                let x = self.data(*a);
                let mut out = Vec::with_capacity(idx.len() * row);
                for &i in idx {
                    out.extend_from_slice(&x[i * row..(i + 1) * row]);
                }
                let mut shape = sa.to_vec();
                shape[0] = idx.len();
                Tensor::new(shape, out)
            }
        }
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|x| f(*x)).collect(),
        )
    }

    fn compute_concat(&self, xs: &[NodeId], axis: usize) -> Result<Tensor> {
        let first = xs
            .first()
            .ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(self.mismatch("concat", xs));
        }
        for x in xs {
            let s = self.shape(*x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", xs));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = xs.iter().map(|x| self.shape(*x)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = self.shape(*x)[axis] * inner;
                out.extend_from_slice(&self.data(*x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Tensor::new(shape, out)
    }

    // ---- builders ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = value.requires_grad();
        let value = value.with_requires_grad(rg);
        self.nodes.push(Node {
            op: Op::Reshape(a),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a, None))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Sum(a, Some(axis)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a, None))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Mean(a, Some(axis)))
    }

    /// Max-shifted log-sum-exp over all elements. `-inf` entries contribute nothing.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSumExp(a, None))
    }

    pub fn logsumexp_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::LogSumExp(a, Some(axis)))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Norm(a, None))
    }

    pub fn l2_norm_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::L2Norm(a, Some(axis)))
    }

    /// Cosine similarity of two vectors (scalar result) or of corresponding
    /// rows of two `[n, d]` matrices (`[n]` result).
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Cosine(a, b))
    }

    /// Selects (and possibly repeats) slices along axis 0.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(a, idx.to_vec()))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Mean over elements of `(a - b)²`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    // ---- evaluation ----

    /// Rebinds named inputs and recomputes every derived node in order.
    ///
    /// Bindings must keep the original shape; returns the value of `output`.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor)], output: NodeId) -> Result<Tensor> {
        for (name, t) in bindings {
            let id = self
                .named(name)
                .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
            if self.shape(id) != t.shape() {
                return Err(Error::Shape {
                    op: "evaluate",
                    shapes: vec![self.shape(id).to_vec(), t.shape().to_vec()],
                });
            }
            self.set_leaf_value(id, t.data());
        }
        self.recompute()?;
        Ok(self.value(output).clone())
    }

    pub(crate) fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let op = &self.nodes[i].op;
            let data = match op {
                Op::Leaf => continue,
                Op::Reshape(a) => self.data(*a).to_vec(),
                _ => self.compute(op)?.into_data(),
            };
            self.nodes[i].value.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    // ---- differentiation ----

    /// Reverse pass from a scalar `output`.
    ///
    /// Gradients are added into every node that depends on a `requires_grad`
    /// leaf; call [`Graph::zero_grad`] to reset between passes.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        self.backward_seeded(output, 1.0)
    }

    /// Reverse pass with the output cotangent set to `seed` instead of 1.
    pub fn backward_seeded(&mut self, output: NodeId, seed: f64) -> Result<()> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        if !out_val.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![seed]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            for (input, contrib) in self.local_grads(&node.op, &node.value, &g) {
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of one node with respect to each of its inputs.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let rg = |id: NodeId| self.nodes[id.0].value.requires_grad();
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::new();
                if rg(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.data(*b), (1, n), &mut ga);
                    res.push((*a, ga));
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), (1, k), g, (n, 1), &mut gb);
                    res.push((*b, gb));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, b) => {
                let m = self.shape(*b)[0];
                let mut gb = vec![0.0; m];
                for row in g.chunks(m.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, x)| gv * gelu_grad(*x))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                vec![(*a, ga)]
            }
            Op::Log(a) => {
                let ga = g.iter().zip(self.data(*a)).map(|(gv, x)| gv / x).collect();
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat(xs, axis) => {
                let base = self.shape(xs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total: usize = xs.iter().map(|x| self.shape(*x)[*axis]).sum();
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for x in xs {
                    let chunk = self.shape(*x)[*axis] * inner;
                    let mut gx = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        gx.extend_from_slice(&g[start..start + chunk]);
                    }
                    offset += chunk;
                    res.push((*x, gx));
                }
                res
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::LogSumExp(a, axis) | Op::L2Norm(a, axis) => {
                let (outer, len, inner, _) =
                    split_axis(self.shape(*a), *axis).expect("validated in forward");
                let x = self.data(*a);
                let y = out.data();
                let mut ga = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gy = g[o * inner + i];
                        let yv = y[o * inner + i];
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            ga[idx] = match op {
                                Op::Sum(..) => gy,
                                Op::Mean(..) => gy / len as f64,
                                Op::L2Norm(..) => {
                                    if yv > 0.0 {
                                        gy * x[idx] / yv
                                    } else {
                                        0.0
                                    }
                                }
                                _ => {
                                    if yv == f64::NEG_INFINITY {
                                        0.0
                                    } else {
                                        gy * (x[idx] - yv).exp()
                                    }
                                }
                            };
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Cosine(a, b) => {
                let d = *self.shape(*a).last().unwrap();
                let (xa, xb) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for (r, gv) in g.iter().enumerate() {
                    let u = &xa[r * d..(r + 1) * d];
                    let v = &xb[r * d..(r + 1) * d];
                    let (nu, nv) = (dot(u, u).sqrt(), dot(v, v).sqrt());
                    let prod = nu * nv;
                    let (gu, gvv) = (&mut ga[r * d..(r + 1) * d], &mut gb[r * d..(r + 1) * d]);
                    if prod > COSINE_EPS {
                        let s = dot(u, v) / prod;
                        for j in 0..d {
                            gu[j] = gv * (v[j] / prod - s * u[j] / (nu * nu));
                            gvv[j] = gv * (u[j] / prod - s * v[j] / (nv * nv));
                        }
                    } else {
                        for j in 0..d {
                            gu[j] = gv * v[j] / COSINE_EPS;
                            gvv[j] = gv * u[j] / COSINE_EPS;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Gather(a, idx) => {
                let sa = self.shape(*a);
                let row: usize = sa[1..].iter().product();
                let mut ga = vec![0.0; self.data(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                        .for_each(|(acc, v)| *acc += v);
                }
                vec![(*a, ga)]
            }
        }
    }
}

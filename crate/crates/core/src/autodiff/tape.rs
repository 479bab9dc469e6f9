use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::forward_op`].
///
/// Parameterised kinds carry their configuration inline.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Sin,
    Cos,
    Exp,
    Relu,
    Softplus,
    Sigmoid,
    Sqrt,
    Square,
    Reciprocal,
    /// Sum of every entry into a `[1]` scalar.
    Sum,
    /// Row-wise sum `[n, k] -> [n, 1]`.
    SumCols,
    /// Expand a `[1, k]`, `[n, 1]` or single-element tensor to the target shape.
    Broadcast(Vec<usize>),
    GatherRows(Vec<usize>),
    /// Scatter-add rows into a zero tensor with the given number of rows.
    ScatterRows(Vec<usize>, usize),
    SelectCols(Vec<usize>),
    ConcatCols,
    Reshape(Vec<usize>),
    /// Elementwise Huber penalty of `a - b` with threshold `delta`.
    Huber(f64),
    /// Exclusive cumulative product along the last axis.
    CumprodExclusive,
    /// `scale * x + shift`.
    Affine(f64, f64),
    MaxScalar(f64),
    PosEnc { frequencies: usize, include_input: bool },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    Reciprocal(Var),
    Sum(Var),
    SumCols(Var),
    Broadcast(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Huber(Var, Var, f64),
    CumprodExclusive(Var),
    Affine(Var, f64),
    MaxScalar(Var, f64),
    PosEnc(Var, usize, bool),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf (or the root). `None` when the node never received
    /// gradient or is an intermediate whose buffer was released.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when unreachable.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is stored m×k (or k×m when transposed); b is k×n (or n×k).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; backward never produces a gradient for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Huber(_) => 2,
            OpKind::ConcatCols => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{kind:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::Sin => Ok(self.sin(a)),
            OpKind::Cos => Ok(self.cos(a)),
            OpKind::Exp => Ok(self.exp(a)),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::Softplus => Ok(self.softplus(a)),
            OpKind::Sigmoid => Ok(self.sigmoid(a)),
            OpKind::Sqrt => Ok(self.sqrt(a)),
            OpKind::Square => Ok(self.square(a)),
            OpKind::Reciprocal => Ok(self.reciprocal(a)),
            OpKind::Sum => Ok(self.sum(a)),
            OpKind::SumCols => self.sum_cols(a),
            OpKind::Broadcast(shape) => self.broadcast(a, &shape),
            OpKind::GatherRows(idx) => self.gather_rows(a, &idx),
            OpKind::ScatterRows(idx, rows) => self.scatter_rows(a, &idx, rows),
            OpKind::SelectCols(idx) => self.select_cols(a, &idx),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::Reshape(shape) => self.reshape(a, shape),
            OpKind::Huber(delta) => self.huber(a, inputs[1], delta),
            OpKind::CumprodExclusive => self.cumprod_exclusive(a),
            OpKind::Affine(scale, shift) => Ok(self.affine(a, scale, shift)),
            OpKind::MaxScalar(floor) => Ok(self.max_scalar(a, floor)),
            OpKind::PosEnc {
                frequencies,
                include_input,
            } => self.posenc(a, frequencies, include_input),
        }
    }

    /// `[n, k] × [k, m] -> [n, m]`. A 1-D right operand is treated as a column.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (n, k) = match sa.as_slice() {
            [n, k] => (*n, *k),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let (k2, m, out_shape) = match sb.as_slice() {
            [k2, m] => (*k2, *m, vec![n, *m]),
            [k2] => (*k2, 1, vec![n]),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Reciprocal(a))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn max_scalar(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::MaxScalar(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean of every entry.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [n, k] = shape[..] else {
            return Err(mismatch("sum_cols", &shape, &[]));
        };
        let src = self.nodes[a.0].value.data();
        let out = (0..n).map(|i| src[i * k..(i + 1) * k].iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::SumCols(a), rg))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let &[n, k] = shape else {
            return Err(mismatch("broadcast", &src_shape, shape));
        };
        let (r, c) = self.nodes[a.0].value.dims2();
        let ok = (r == 1 || r == n) && (c == 1 || c == k);
        if !ok {
            return Err(mismatch("broadcast", &src_shape, shape));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let ri = if r == 1 { 0 } else { i };
            if c == 1 {
                out.extend(std::iter::repeat_n(src[ri], k));
            } else {
                out.extend_from_slice(&src[ri * c..(ri + 1) * c]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::Broadcast(a), rg))
    }

    /// Broadcasts `b` to `a`'s shape and adds.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// Broadcasts `b` to `a`'s shape and multiplies.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather_rows", self.shape(a), &[bad]));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2();
        if r != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(mismatch("scatter_rows", self.shape(a), &[idx.len(), rows]));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; rows * c];
        for (s, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += src[s * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2();
        if idx.iter().any(|&j| j >= c) {
            return Err(mismatch("select_cols", self.shape(a), idx));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| src[i * c + j]));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![r, idx.len()], out),
            Op::SelectCols(a, idx.to_vec()),
            rg,
        ))
    }

    /// Single column `j` as `[n, 1]`.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        self.select_cols(a, &[j])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols of zero tensors"));
        };
        let rows = self.nodes[first.0].value.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.dims2();
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != src.numel() {
            return Err(mismatch("reshape", src.shape(), &shape));
        }
        let value = Tensor::from_parts(shape, src.data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn huber(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::invalid(format!("huber delta must be > 0, got {delta}")));
        }
        self.binary(
            "huber",
            a,
            b,
            |x, y| {
                let r = (x - y).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            },
            Op::Huber(a, b, delta),
        )
    }

    pub fn cumprod_exclusive(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2();
        let shape = self.shape(a).to_vec();
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut acc = 1.0;
            for j in 0..c {
                out[i * c + j] = acc;
                acc *= src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::CumprodExclusive(a), rg))
    }

    /// Per-row positional encoding. Each input component expands to
    /// `[p?, sin(2^0 π p), cos(2^0 π p), …, sin(2^{L-1} π p), cos(2^{L-1} π p)]`.
    pub fn posenc(&mut self, a: Var, frequencies: usize, include_input: bool) -> Result<Var> {
        let (n, d) = self.nodes[a.0].value.dims2();
        let src = self.nodes[a.0].value.data();
        let block = 2 * frequencies + usize::from(include_input);
        let mut out = Vec::with_capacity(n * d * block);
        for i in 0..n {
            for j in 0..d {
                encode_scalar(src[i * d + j], frequencies, include_input, &mut out);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d * block], out),
            Op::PosEnc(a, frequencies, include_input),
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = (if id == root.0 {
                grads[id].clone()
            } else {
                grads[id].take()
            }) else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[a.0].value.dims2();
                let m = node.value.numel() / n.max(1);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| gemm(n, m, k, g, false, bv, true, 1.0, ga));
                acc(*b, &mut |gb| gemm(k, n, m, av, true, g, false, 1.0, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Sin(a) => elementwise(&mut acc, *a, g, val(*a), |x, _| x.cos()),
            Op::Cos(a) => elementwise(&mut acc, *a, g, val(*a), |x, _| -x.sin()),
            Op::Exp(a) => elementwise(&mut acc, *a, g, out, |y, _| y),
            Op::Relu(a) => {
                elementwise(&mut acc, *a, g, val(*a), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Softplus(a) => elementwise(&mut acc, *a, g, val(*a), |x, _| sigmoid(x)),
            Op::Sigmoid(a) => elementwise(&mut acc, *a, g, out, |y, _| y * (1.0 - y)),
            Op::Sqrt(a) => elementwise(&mut acc, *a, g, out, |y, _| 0.5 / y),
            Op::Square(a) => elementwise(&mut acc, *a, g, val(*a), |x, _| 2.0 * x),
            Op::Reciprocal(a) => elementwise(&mut acc, *a, g, out, |y, _| -y * y),
            Op::Affine(a, s) => elementwise(&mut acc, *a, g, out, |_, _| *s),
            Op::MaxScalar(a, floor) => {
                elementwise(&mut acc, *a, g, val(*a), |x, _| if x > *floor { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumCols(a) => {
                let (n, k) = self.nodes[a.0].value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        ga[i * k..(i + 1) * k].iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::Broadcast(a) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let (n, k) = node.value.dims2();
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        let ri = if r == 1 { 0 } else { i };
                        for j in 0..k {
                            let cj = if c == 1 { 0 } else { j };
                            ga[ri * c + cj] += g[i * k + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for (s, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[s * c..(s + 1) * c]);
                    }
                });
            }
            Op::ScatterRows(a, idx) => {
                let c = self.nodes[a.0].value.dims2().1;
                acc(*a, &mut |ga| {
                    for (s, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[s * c..(s + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let w = idx.len();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for (s, &j) in idx.iter().enumerate() {
                            ga[i * c + j] += g[i * w + s];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().1;
                    acc(p, &mut |gp| {
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Huber(a, b, delta) => {
                let (av, bv) = (val(*a), val(*b));
                let d = *delta;
                let slope = |i: usize| (av[i] - bv[i]).clamp(-d, d);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * slope(i);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * slope(i);
                    }
                });
            }
            Op::CumprodExclusive(a) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        let row = &x[i * c..(i + 1) * c];
                        let prefix = &out[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        // tail_k = Σ_{m>k} g_m Π_{k<j<m} x_j, built right to left.
                        let mut tail = 0.0;
                        for k in (0..c).rev() {
                            ga[i * c + k] += prefix[k] * tail;
                            tail = gr[k] + row[k] * tail;
                        }
                    }
                });
            }
            Op::PosEnc(a, freqs, include) => {
                let (n, d) = self.nodes[a.0].value.dims2();
                let block = 2 * freqs + usize::from(*include);
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..d {
                            let base = (i * d + j) * block;
                            let mut s = 0.0;
                            let mut off = base;
                            if *include {
                                s += g[off];
                                off += 1;
                            }
                            for l in 0..*freqs {
                                let w = (1u64 << l) as f64 * PI;
                                let (sn, cs) = (w * x[i * d + j]).sin_cos();
                                s += w * (cs * g[off] - sn * g[off + 1]);
                                off += 2;
                            }
                            ga[i * d + j] += s;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `ga += g * deriv(saved_i)` where `saved` is either the input or the output.
fn elementwise(
    acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    a: Var,
    g: &[f64],
    saved: &[f64],
    deriv: impl Fn(f64, usize) -> f64,
) {
    acc(a, &mut |ga| {
        for i in 0..ga.len() {
            ga[i] += g[i] * deriv(saved[i], i);
        }
    });
}

/// Appends the encoding of one scalar to `out`.
pub(crate) fn encode_scalar(p: f64, frequencies: usize, include_input: bool, out: &mut Vec<f64>) {
    if include_input {
        out.push(p);
    }
    for l in 0..frequencies {
        let (s, c) = ((1u64 << l) as f64 * PI * p).sin_cos();
        out.push(s);
        out.push(c);
    }
}

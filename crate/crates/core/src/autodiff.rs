//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! the node list is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::ssm;
use crate::tensor::{gemm, transpose, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Rows {
        input: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f32>,
        eps: f32,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        states: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, dim, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call w.r.t. a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn make(&mut self, shape: &[usize], data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.ng(inputs);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> (Vec<usize>, Vec<f32>) {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (shape, out) = self.zip_map(a, b, |x, y| x + y);
        Ok(self.make(&shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (shape, out) = self.zip_map(a, b, |x, y| x - y);
        Ok(self.make(&shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (shape, out) = self.zip_map(a, b, |x, y| x * y);
        Ok(self.make(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    fn check_bias(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let n = *sa.last().expect("rank >= 1");
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(n)
    }

    /// `a[..., n] + b[n]` broadcast over leading dimensions.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_bias("add_bias", a, b)?;
        let bias = self.data(b).to_vec();
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(&shape, out, Op::AddBias(a, b), &[a, b]))
    }

    /// `a[..., n] * b[n]` broadcast over leading dimensions.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_bias("mul_bias", a, b)?;
        let scale = self.data(b).to_vec();
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scale[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(&shape, out, Op::MulBias(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, out, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let out = self.data(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, out, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.data(a).iter().map(|&x| unary_fwd(kind, x)).collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, out, Op::Unary(a, kind), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.data(a), self.data(b), m, k, n, false, false, self.exec);
        Ok(self.make(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose expects a matrix, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose(self.data(a), r, c);
        Ok(self.make(&[c, r], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.make(shape, out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.make(
            &shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "slice axis={axis} start={start} len={len} invalid for {s:?}"
            )));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.make(
            &shape,
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    /// Gathers entries along axis 0 (rows may repeat).
    pub fn rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::Contract(format!(
                "row index {index:?} invalid for {s:?}"
            )));
        }
        let width: usize = s[1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = index.len();
        Ok(self.make(
            &shape,
            out,
            Op::Rows {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// Reverses the order along axis 0.
    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        let index: Vec<usize> = (0..n).rev().collect();
        self.rows(a, &index)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.data(a)) as f32;
        self.make(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = (pairwise_sum(self.data(a)) / n) as f32;
        self.make(&[1], vec![s], Op::Mean(a), &[a])
    }

    /// Sums out `axis`; a rank-1 input collapses to shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "sum axis {axis} invalid for {s:?}"
            )));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let acc: f64 = (0..dim)
                    .map(|d| f64::from(src[(o * dim + d) * inner + i]))
                    .sum();
                out[o * inner + i] = acc as f32;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.make(&shape, out, Op::SumAxis { input: a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let dim = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Contract(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / dim as f32))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for {s:?}"
            )));
        }
        let out = softmax_along(self.data(a), &s, axis, false);
        Ok(self.make(&s, out, Op::Softmax { input: a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "log_softmax axis {axis} invalid for {s:?}"
            )));
        }
        let out = softmax_along(self.data(a), &s, axis, true);
        Ok(self.make(&s, out, Op::LogSoftmax { input: a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let n = self.check_bias("layer_norm", x, gamma)?;
        self.check_bias("layer_norm", x, beta)?;
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / n;
        let mut out = vec![0.0f32; src.len()];
        let mut xhat = vec![0.0f32; src.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let rs = 1.0 / (var + f64::from(eps)).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let xh = ((f64::from(row[j]) - mean) * rs) as f32;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.make(
            &shape,
            out,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `x / max(‖x‖₂, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Var {
        let n = *self.shape(x).last().expect("rank >= 1");
        let src = self.data(x);
        let rows = src.len() / n;
        let mut norms = vec![0.0f32; rows];
        let mut out = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let norm = row
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt() as f32;
            norms[r] = norm;
            let denom = norm.max(eps);
            for j in 0..n {
                out[r * n + j] = row[j] / denom;
            }
        }
        let shape = self.shape(x).to_vec();
        self.make(
            &shape,
            out,
            Op::L2Normalize {
                input: x,
                norms,
                eps,
            },
            &[x],
        )
    }

    /// Input-dependent zero-order-hold SSM scan.
    ///
    /// Shapes: `u`, `delta` are `[L, D]`; `a` is `[D, N]` (diagonal state
    /// matrix per channel); `b`, `c` are `[L, N]`. Returns `y: [L, D]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 2 {
            return Err(Error::Contract(format!(
                "scan input must be [L, D], got {su:?}"
            )));
        }
        let (len, channels) = (su[0], su[1]);
        self.same_shape("selective_scan(delta)", u, delta)?;
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != channels {
            return Err(Error::shape("selective_scan(A)", &su, sa));
        }
        let state = sa[1];
        for (name, v) in [("selective_scan(B)", b), ("selective_scan(C)", c)] {
            if self.shape(v) != [len, state] {
                return Err(Error::shape(name, &[len, state], self.shape(v)));
            }
        }
        if let Some(bad) = self.data(delta).iter().find(|&&d| !(d > 0.0)) {
            return Err(Error::Precondition(format!(
                "scan step size must be positive, found {bad}"
            )));
        }
        let inputs = ssm::ScanInputs {
            u: self.data(u),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(b),
            c: self.data(c),
            len,
            channels,
            state,
        };
        let keep = self.ng(&[u, delta, a, b, c]);
        let (y, states) = ssm::scan_forward(&inputs, keep, self.exec);
        Ok(self.make(
            &[len, channels],
            y,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                states,
            },
            &[u, delta, a, b, c],
        ))
    }

    /// Linear layer helper: `x · w (+ bias)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Populates `grad` on every tracked leaf reachable from `loss`.
    ///
    /// Gradients are recomputed from scratch on each call, so repeated calls
    /// on one tape yield identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(g));
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(a, b) => {
                let n = self.value(*b).numel();
                acc(*a, g.to_vec());
                acc(*b, column_sums(g, n));
            }
            Op::MulBias(a, b) => {
                let n = self.value(*b).numel();
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(
                    *a,
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * xb[i % n])
                        .collect(),
                );
                let prod: Vec<f32> = g.iter().zip(xa).map(|(g, x)| g * x).collect();
                acc(*b, column_sums(&prod, n));
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Unary(a, kind) => {
                let x = self.data(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&gv, (&xv, &yv))| gv * unary_grad(*kind, xv, yv))
                        .collect(),
                );
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].needs_grad {
                    acc(*a, gemm(g, self.data(*b), m, n, k, false, true, self.exec));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, gemm(self.data(*a), g, k, m, n, true, false, self.exec));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc(*a, transpose(g, s[0], s[1]));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let (outer, total, inner) = split_axis(s, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * width * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g[base..base + width * inner]);
                    }
                    offset += width;
                    acc(v, part);
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[*axis];
                let (outer, dim, inner) = split_axis(s, *axis);
                let mut full = vec![0.0f32; outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, full);
            }
            Op::Rows { input, index } => {
                let s = self.shape(*input);
                let width: usize = s[1..].iter().product();
                let mut full = vec![0.0f32; s[0] * width];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..width {
                        full[i * width + j] += g[r * width + j];
                    }
                }
                acc(*input, full);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f32; n]);
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input);
                let (outer, dim, inner) = split_axis(s, *axis);
                let mut full = vec![0.0f32; outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            full[(o * dim + d) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*input, full);
            }
            Op::Softmax { input, axis } => {
                let s = self.shape(*input);
                let (outer, dim, inner) = split_axis(s, *axis);
                let mut dx = vec![0.0f32; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let dot: f64 = (0..dim)
                            .map(|d| f64::from(g[at(d)]) * f64::from(out[at(d)]))
                            .sum();
                        for d in 0..dim {
                            dx[at(d)] = out[at(d)] * (g[at(d)] - dot as f32);
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::LogSoftmax { input, axis } => {
                let s = self.shape(*input);
                let (outer, dim, inner) = split_axis(s, *axis);
                let mut dx = vec![0.0f32; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let total: f64 = (0..dim).map(|d| f64::from(g[at(d)])).sum();
                        for d in 0..dim {
                            dx[at(d)] = g[at(d)] - out[at(d)].exp() * total as f32;
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let gam = self.data(*gamma);
                let rows = g.len() / n;
                if self.nodes[input.0].needs_grad {
                    let mut dx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let span = r * n..(r + 1) * n;
                        let (gr, xr) = (&g[span.clone()], &xhat[span]);
                        let mut mean_g = 0.0f64;
                        let mut mean_gx = 0.0f64;
                        for j in 0..n {
                            let gy = f64::from(gr[j]) * f64::from(gam[j]);
                            mean_g += gy;
                            mean_gx += gy * f64::from(xr[j]);
                        }
                        mean_g /= n as f64;
                        mean_gx /= n as f64;
                        let rs = f64::from(rstd[r]);
                        for j in 0..n {
                            let gy = f64::from(gr[j]) * f64::from(gam[j]);
                            dx[r * n + j] =
                                (rs * (gy - mean_g - f64::from(xr[j]) * mean_gx)) as f32;
                        }
                    }
                    acc(*input, dx);
                }
                let prod: Vec<f32> = g.iter().zip(xhat).map(|(g, x)| g * x).collect();
                acc(*gamma, column_sums(&prod, n));
                acc(*beta, column_sums(g, n));
            }
            Op::L2Normalize { input, norms, eps } => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0f32; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (gr, yr) = (&g[span.clone()], &out[span]);
                    if norm > *eps {
                        let dot: f64 = gr
                            .iter()
                            .zip(yr)
                            .map(|(&a, &b)| f64::from(a) * f64::from(b))
                            .sum();
                        for j in 0..n {
                            dx[r * n + j] = (gr[j] - yr[j] * dot as f32) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dx[r * n + j] = gr[j] / eps;
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                states,
            } => {
                let sa = self.shape(*a);
                let inputs = ssm::ScanInputs {
                    u: self.data(*u),
                    delta: self.data(*delta),
                    a: self.data(*a),
                    b: self.data(*b),
                    c: self.data(*c),
                    len: self.shape(*u)[0],
                    channels: sa[0],
                    state: sa[1],
                };
                let grads = ssm::scan_backward(&inputs, states, g, self.exec);
                acc(*u, grads.du);
                acc(*delta, grads.ddelta);
                acc(*a, grads.da);
                acc(*b, grads.db);
                acc(*c, grads.dc);
            }
        }
    }
}

fn column_sums(g: &[f32], n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; n];
    for (i, &v) in g.iter().enumerate() {
        acc[i % n] += f64::from(v);
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Pairwise (tree) summation in `f64`.
pub(crate) fn pairwise_sum(data: &[f32]) -> f64 {
    const LEAF: usize = 32;
    if data.len() <= LEAF {
        return data.iter().map(|&v| f64::from(v)).sum();
    }
    let mid = data.len() / 2;
    pairwise_sum(&data[..mid]) + pairwise_sum(&data[mid..])
}

fn softmax_along(src: &[f32], shape: &[usize], axis: usize, log: bool) -> Vec<f32> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim)
                .map(|d| src[at(d)])
                .fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = (0..dim)
                .map(|d| (f64::from(src[at(d)]) - f64::from(max)).exp())
                .sum();
            let log_denom = denom.ln();
            for d in 0..dim {
                let shifted = f64::from(src[at(d)]) - f64::from(max);
                out[at(d)] = if log {
                    (shifted - log_denom) as f32
                } else {
                    (shifted.exp() / denom) as f32
                };
            }
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn unary_fwd(kind: Unary, x: f32) -> f32 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh()),
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
    }
}

fn unary_grad(kind: Unary, x: f32, y: f32) -> f32 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let inner = GELU_C * (x + 0.044_715 * x * x * x);
            let t = inner.tanh();
            let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        }
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (1.0 - y),
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f32) -> f32 {
    if y > 20.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

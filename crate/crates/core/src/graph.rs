//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] records every operation of one forward pass in creation
//! order, so node indices are already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and then drops the saved operation data;
//! a second call fails with [`Error::GraphConsumed`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tensor::{axis_extents, gemm_nn, gemm_nt, gemm_tn, ConvGeometry, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Pow(Var, f64),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    ChannelBias(Var, Var),
    MaxPool2(Var, Vec<usize>),
    Upsample(Var, usize),
    Downsample(Var, usize),
    Concat(Vec<Var>, usize),
    Take(Var, Vec<usize>),
    ExpandCols(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    /// Records an input tensor. Gradients are kept for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a `requires_grad` leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), libm::log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), libm::fabs)
    }

    /// Elementwise `a^p` for a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| powf(x, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow(a, 2.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of every element, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid("sum_axis", "axis out of range"));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, 1.0 / len as f64))
    }

    /// Maximum over `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid("max_axis", "axis out of range"));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > out[o * inner + i] {
                        out[o * inner + i] = src[idx];
                        arg[o * inner + i] = idx;
                    }
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis(a, arg), rg))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid("transpose", "expects a matrix"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = transpose_data(t.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid("softmax", "axis out of range"));
        }
        let out = softmax_data(t, axis, false);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(invalid("log_softmax", "axis out of range"));
        }
        let out = softmax_data(t, axis, true);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// 2-D convolution of a `[C_in,h,w]` input with a `[C_out,C_in,k,k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        if ti.rank() != 3 || tk.rank() != 4 || tk.shape()[2] != tk.shape()[3] {
            return Err(shape_mismatch("conv2d", ti.shape(), tk.shape()));
        }
        if ti.shape()[0] != tk.shape()[1] {
            return Err(shape_mismatch("conv2d", &[tk.shape()[1]], &[ti.shape()[0]]));
        }
        let geom = ConvGeometry::new(ti.shape()[0], ti.shape()[1], ti.shape()[2], tk.shape()[2], stride, padding)?;
        let c_out = tk.shape()[0];
        let cols = geom.im2col(ti.data());
        let mut out = vec![0.0; c_out * geom.col_cols()];
        gemm_nn(c_out, geom.col_rows(), geom.col_cols(), tk.data(), &cols, &mut out);
        let value = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        let rg = self.rg(&[input, kernel]);
        // the unfolded input is only needed for the kernel gradient
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to a `[C,h,w]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 3 || tb.shape() != [tx.shape()[0]] {
            return Err(shape_mismatch("channel_bias", &[tx.shape()[0]], tb.shape()));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let mut out = tx.data().to_vec();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let b = tb.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::ChannelBias(x, bias), rg))
    }

    /// 2x2 max-pool with stride 2 over a `[C,h,w]` tensor (odd edges dropped).
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 || t.shape()[1] < 2 || t.shape()[2] < 2 {
            return Err(invalid("max_pool2", "expects [C,h,w] with h,w >= 2"));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = (ch * h + 2 * y) * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::MaxPool2(a, arg), rg))
    }

    /// Nearest-neighbour upsampling of `[C,h,w]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 || factor == 0 {
            return Err(invalid("upsample_nearest", "expects [C,h,w] and factor >= 1"));
        }
        let value = upsample_data(t, factor);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Upsample(a, factor), rg))
    }

    /// Nearest-neighbour downsampling of `[C,h,w]` by an integer factor,
    /// sampling the top-left element of each block.
    pub fn downsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 || factor == 0 || t.shape()[1] % factor != 0 || t.shape()[2] % factor != 0 {
            return Err(invalid("downsample_nearest", "spatial extent must be a multiple of the factor"));
        }
        let value = downsample_data(t, factor);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Downsample(a, factor), rg))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Gathers flat elements of `a` by index into a tensor of `shape`.
    pub fn take(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(shape_mismatch("take", &[indices.len()], shape));
        }
        if indices.iter().any(|&i| i >= t.numel()) {
            return Err(invalid("take", "index out of range"));
        }
        let out = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Take(a, indices), rg))
    }

    /// Selects rows of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("select_rows", "expects a matrix"));
        }
        let (r, c) = (s[0], s[1]);
        if rows.iter().any(|&i| i >= r) {
            return Err(invalid("select_rows", "row out of range"));
        }
        let idx = rows.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect();
        self.take(a, idx, &[rows.len(), c])
    }

    /// Repeats a `[R]` vector into `[R, cols]`.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || cols == 0 {
            return Err(invalid("expand_cols", "expects a vector and cols >= 1"));
        }
        let out = t.data().iter().flat_map(|&v| core::iter::repeat(v).take(cols)).collect();
        let shape = vec![t.numel(), cols];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ExpandCols(a, cols), rg))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them. Leaves that require gradients but do not influence the
    /// loss receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0));
                self.accumulate(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / vb[k];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, |ga| axpy(ga, g, *s)),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / va[k];
                    }
                })
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * sign(va[k]);
                    }
                })
            }
            Op::Pow(a, p) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * p * powf(va[k], p - 1.0);
                    }
                })
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for k in 0..g.len() {
                        if va[k] > *lo && va[k] < *hi {
                            ga[k] += g[k];
                        }
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for k in 0..inner {
                                ga[base + k] += g[o * inner + k];
                            }
                        }
                    }
                })
            }
            Op::MaxAxis(a, arg) => self.accumulate(grads, *a, |ga| {
                for (k, &idx) in arg.iter().enumerate() {
                    ga[idx] += g[k];
                }
            }),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(grads, *a, |ga| gemm_nt(m, n, k, g, tb.data(), ga));
                self.accumulate(grads, *b, |gb| gemm_tn(k, m, n, ta.data(), g, gb));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let gt = transpose_data(g, c, r);
                self.accumulate(grads, *a, |ga| axpy(ga, &gt, 1.0));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| axpy(ga, g, 1.0)),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let total: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += g[at(l)] - libm::exp(out[at(l)]) * total;
                            }
                        }
                    }
                })
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (rows, n) = (geom.col_rows(), geom.col_cols());
                self.accumulate(grads, *kernel, |gk| gemm_nt(c_out, n, rows, g, cols, gk));
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; rows * n];
                    gemm_tn(rows, c_out, n, self.value(*kernel).data(), g, &mut dcols);
                    self.accumulate(grads, *input, |gi| geom.col2im_add(&dcols, gi));
                }
            }
            Op::ChannelBias(x, b) => {
                let plane = node.value.shape()[1] * node.value.shape()[2];
                self.accumulate(grads, *x, |gx| axpy(gx, g, 1.0));
                self.accumulate(grads, *b, |gb| {
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        gb[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool2(a, arg) => self.accumulate(grads, *a, |ga| {
                for (k, &idx) in arg.iter().enumerate() {
                    ga[idx] += g[k];
                }
            }),
            Op::Upsample(a, f) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h * f, w * f);
                self.accumulate(grads, *a, |ga| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                ga[(ch * h + y / f) * w + x / f] += g[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                })
            }
            Op::Downsample(a, f) => {
                let s = self.shape(*a);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / f, w / f);
                self.accumulate(grads, *a, |ga| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                ga[(ch * h + y * f) * w + x * f] += g[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            axpy(&mut gp[o * len * inner..(o + 1) * len * inner], src, 1.0);
                        }
                    });
                    offset += len;
                }
            }
            Op::Take(a, indices) => self.accumulate(grads, *a, |ga| {
                for (k, &idx) in indices.iter().enumerate() {
                    ga[idx] += g[k];
                }
            }),
            Op::ExpandCols(a, cols) => self.accumulate(grads, *a, |ga| {
                for (r, chunk) in g.chunks(*cols).enumerate() {
                    ga[r] += chunk.iter().sum::<f64>();
                }
            }),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn powf(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 1.0 {
        x
    } else if p == 0.0 {
        1.0
    } else {
        libm::pow(x, p)
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &v)| v).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_data(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_extents(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |l: usize| (o * len + l) * inner + k;
            let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = libm::exp(src[at(l)] - max);
                out[at(l)] = e;
                z += e;
            }
            if log {
                let lz = libm::log(z);
                for l in 0..len {
                    out[at(l)] = src[at(l)] - max - lz;
                }
            } else {
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub(crate) fn upsample_data(t: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ho, wo) = (h * f, w * f);
    let src = t.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let row = &src[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
            for x in 0..wo {
                out.push(row[x / f]);
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

pub(crate) fn downsample_data(t: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ho, wo) = (h / f, w / f);
    let src = t.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out.push(src[(ch * h + y * f) * w + x * f]);
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

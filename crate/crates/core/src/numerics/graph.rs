use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, UpGeom};
use super::tensor::{axis_split, Tensor};
use crate::error::{invalid, mismatch, Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    /// Clamp to `[-1, 1]`. Derivative 1 on the closed interval, 0 outside.
    ClampUnit,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: UpGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Reduce {
        input: Var,
        out_index: Vec<usize>,
        scale: f64,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    VectorL2 {
        input: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    BroadcastRows {
        input: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is always topologically sorted.
///
/// A graph is differentiated at most once; record a fresh graph for every
/// forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
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

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
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

    /// Gradient of the last differentiated loss with respect to `v`.
    /// `None` for constants, for nodes the loss does not depend on, and
    /// before [`Graph::backward`] has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    /// 2-D convolution over a `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        self.check(input)?;
        self.check(kernel)?;
        if stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.len() != 3 {
            return Err(invalid(OP, alloc::format!("input must be H x W x C, got {:?}", xs)));
        }
        if ks.len() != 4 || ks[2] != xs[2] {
            return Err(mismatch(OP, &[3, 3, xs[2], 0], ks));
        }
        let geom = ConvGeom {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ks[3],
            kh: ks[0],
            kw: ks[1],
            stride,
            padding,
        };
        if geom.h + 2 * padding < geom.kh || geom.w + 2 * padding < geom.kw {
            return Err(invalid(OP, "kernel larger than padded input"));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [geom.cout] {
                return Err(mismatch(OP, &[geom.cout], self.shape(b)));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.out_h(), geom.out_w(), geom.cout];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(OP, shape, data, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    /// Stride-2 transposed convolution: `[H, W, Cin]` with a `[kh, kw, Cout, Cin]`
    /// kernel gives `[2H, 2W, Cout]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        self.check(input)?;
        self.check(kernel)?;
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.len() != 3 {
            return Err(invalid(OP, alloc::format!("input must be H x W x C, got {:?}", xs)));
        }
        if ks.len() != 4 || ks[3] != xs[2] || ks[0] < 2 || ks[1] < 2 {
            return Err(mismatch(OP, &[3, 3, 0, xs[2]], ks));
        }
        let geom = UpGeom {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ks[2],
            kh: ks[0],
            kw: ks[1],
        };
        let data = kernels::conv_transpose2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let shape = vec![2 * geom.h, 2 * geom.w, geom.cout];
        self.push(OP, shape, data, Op::ConvTranspose2d { input, kernel, geom }, &[input, kernel])
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "maxpool2d";
        self.check(input)?;
        let xs = self.shape(input);
        if xs.len() != 3 {
            return Err(invalid(OP, alloc::format!("input must be H x W x C, got {:?}", xs)));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(OP, alloc::format!("spatial extent {}x{} is not even", h, w)));
        }
        let (data, argmax) = kernels::maxpool2d_forward(h, w, c, self.value(input).data());
        self.push(OP, vec![h / 2, w / 2, c], data, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Sigmoid => sigmoid,
            Activation::Softplus => |v| v.max(0.0) + libm::log1p(libm::exp(-libm::fabs(v))),
            Activation::ClampUnit => |v| v.clamp(-1.0, 1.0),
            Activation::Abs => libm::fabs,
        };
        let data = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.push("activation", shape, data, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        const OP: &str = "softmax_axis";
        self.check(input)?;
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { op: OP, axis, rank: x.rank() });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.push(OP, shape, out, Op::Softmax { input, axis }, &[input])
    }

    /// Sum or mean over `axes`, which are removed from the shape.
    pub fn reduce(&mut self, input: Var, kind: Reduction, axes: &[usize]) -> Result<Var> {
        const OP: &str = "reduce";
        self.check(input)?;
        let x = self.value(input);
        let rank = x.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { op: OP, axis: a, rank });
            }
            if reduced[a] {
                return Err(invalid(OP, alloc::format!("axis {} listed twice", a)));
            }
            reduced[a] = true;
        }
        let shape = x.shape();
        let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect();
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| shape[a]).product();

        // Output stride for every input axis; zero on reduced axes.
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for a in (0..rank).rev() {
            if !reduced[a] {
                strides[a] = acc;
                acc *= shape[a];
            }
        }
        let mut out_index = Vec::with_capacity(x.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..x.len() {
            out_index.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let scale = match kind {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / count.max(1) as f64,
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&out_index) {
            out[o] += v;
        }
        if kind == Reduction::Mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        self.push(OP, out_shape, out, Op::Reduce { input, out_index, scale }, &[input])
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, Reduction::Sum, &axes)
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, Reduction::Mean, &axes)
    }

    /// Elementwise binary op on equal shapes; either side may be a scalar.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        const OP: &str = "elementwise";
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() && !ta.is_scalar() && !tb.is_scalar() {
            return Err(mismatch(OP, ta.shape(), tb.shape()));
        }
        let shape = if ta.is_scalar() { tb.shape() } else { ta.shape() }.to_vec();
        let n = ta.len().max(tb.len());
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        self.push(OP, shape, data, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Binary::Div)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.push("scale", shape, data, Op::Scale { input, factor }, &[input])
    }

    pub fn add_scalar(&mut self, input: Var, value: f64) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|v| v + value).collect();
        let shape = x.shape().to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar { input }, &[input])
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn vector_l2(&mut self, input: Var, axis: usize) -> Result<Var> {
        const OP: &str = "vector_l2";
        self.check(input)?;
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { op: OP, axis, rank: x.rank() });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: f64 = (0..n).map(|j| src[(o * n + j) * inner + i]).map(|v| v * v).sum();
                out[o * inner + i] = libm::sqrt(ss);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        self.push(OP, shape, out, Op::VectorL2 { input, axis }, &[input])
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch(OP, sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(OP, vec![n, m], data, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(invalid("transpose", alloc::format!("expected a matrix, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(input).data(), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose { input }, &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(mismatch("reshape", x.shape(), shape));
        }
        let data = x.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { input }, &[input])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat";
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch(OP, sa, sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = if ca + cb == 0 { 0 } else { da.len() / ca.max(1) };
        let mut data = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..][..ca]);
            data.extend_from_slice(&db[r * cb..][..cb]);
        }
        self.push(OP, shape, data, Op::Concat { a, b }, &[a, b])
    }

    /// Selects rows of a matrix. The indices are data, not differentiable.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        const OP: &str = "gather_rows";
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(invalid(OP, alloc::format!("expected a matrix, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid(OP, alloc::format!("row {} out of range for {} rows", bad, rows)));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..][..cols]);
        }
        let op = Op::GatherRows {
            input,
            indices: indices.to_vec(),
        };
        self.push(OP, vec![indices.len(), cols], data, op, &[input])
    }

    /// Repeats a vector `[m]` as every row of a `[rows, m]` matrix.
    pub fn broadcast_rows(&mut self, input: Var, rows: usize) -> Result<Var> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 1 {
            return Err(invalid("broadcast_rows", alloc::format!("expected a vector, got {:?}", s)));
        }
        let m = s[0];
        let src = self.value(input).data();
        let data: Vec<f64> = (0..rows).flat_map(|_| src.iter().copied()).collect();
        self.push("broadcast_rows", vec![rows, m], data, Op::BroadcastRows { input }, &[input])
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        let ls = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar { shape: ls });
        }
        self.differentiated = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(&ls, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, g.data());
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let delta = delta();
        match &mut self.grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, delta));
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                );
                self.accumulate(input, || gi);
                self.accumulate(kernel, || gk);
                if let Some(b) = bias {
                    self.accumulate(b, || gb);
                }
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let (gi, gk) =
                    kernels::conv_transpose2d_backward(&geom, self.value(input).data(), self.value(kernel).data(), g);
                self.accumulate(input, || gi);
                self.accumulate(kernel, || gk);
            }
            Op::MaxPool2d { input, argmax } => {
                let n = self.value(input).len();
                self.accumulate(input, || {
                    let mut gi = vec![0.0; n];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                    gi
                });
            }
            Op::Activation { input, kind } => {
                let x = self.value(input).data();
                let y = self.nodes[idx].value.data();
                let gi: Vec<f64> = match kind {
                    Activation::Relu => x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect(),
                    Activation::Sigmoid => y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
                    Activation::Softplus => x.iter().zip(g).map(|(&v, &gv)| gv * sigmoid(v)).collect(),
                    Activation::ClampUnit => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if (-1.0..=1.0).contains(&v) { gv } else { 0.0 })
                        .collect(),
                    Activation::Abs => x
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            if v > 0.0 {
                                gv
                            } else if v < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                };
                self.accumulate(input, || gi);
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[idx].value.data();
                let (outer, n, inner) = axis_split(self.nodes[idx].value.shape(), axis);
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            gi[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(input, || gi);
            }
            Op::Reduce {
                input,
                out_index,
                scale,
            } => {
                self.accumulate(input, || out_index.iter().map(|&o| g[o] * scale).collect());
            }
            Op::Binary { a, b, kind } => {
                let (da, db) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                // Per-element partials, summed back down when that side was a scalar.
                let fold = |len: usize, partial: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    if len == 1 && g.len() != 1 {
                        vec![(0..g.len()).map(partial).sum()]
                    } else {
                        (0..g.len()).map(partial).collect()
                    }
                };
                let (ga, gb) = match kind {
                    Binary::Add => (fold(da.len(), &|i| g[i]), fold(db.len(), &|i| g[i])),
                    Binary::Sub => (fold(da.len(), &|i| g[i]), fold(db.len(), &|i| -g[i])),
                    Binary::Mul => (
                        fold(da.len(), &|i| g[i] * pick(&db, i)),
                        fold(db.len(), &|i| g[i] * pick(&da, i)),
                    ),
                    Binary::Div => (
                        fold(da.len(), &|i| g[i] / pick(&db, i)),
                        fold(db.len(), &|i| {
                            let d = pick(&db, i);
                            -g[i] * pick(&da, i) / (d * d)
                        }),
                    ),
                };
                self.accumulate(a, || ga);
                self.accumulate(b, || gb);
            }
            Op::Scale { input, factor } => {
                self.accumulate(input, || g.iter().map(|v| v * factor).collect());
            }
            Op::AddScalar { input } | Op::Reshape { input } => {
                self.accumulate(input, || g.to_vec());
            }
            Op::VectorL2 { input, axis } => {
                let x = self.value(input).data();
                let (outer, n, inner) = axis_split(self.value(input).shape(), axis);
                let norms = self.nodes[idx].value.data();
                let mut gi = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let gv = g[o * inner + i] / norm;
                        for j in 0..n {
                            let at = (o * n + j) * inner + i;
                            gi[at] = x[at] * gv;
                        }
                    }
                }
                self.accumulate(input, || gi);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                // dA = G B^T, dB = A^T G
                let bt = kernels::transpose(db, k, m);
                let ga = kernels::matmul(g, &bt, n, m, k);
                let at = kernels::transpose(da, n, k);
                let gb = kernels::matmul(&at, g, k, n, m);
                self.accumulate(a, || ga);
                self.accumulate(b, || gb);
            }
            Op::Transpose { input } => {
                let s = self.nodes[idx].value.shape().to_vec();
                self.accumulate(input, || kernels::transpose(g, s[0], s[1]));
            }
            Op::Concat { a, b } => {
                let ca = *self.shape(a).last().unwrap();
                let cb = *self.shape(b).last().unwrap();
                let rows = g.len() / (ca + cb).max(1);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..][..ca + cb];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(a, || ga);
                self.accumulate(b, || gb);
            }
            Op::GatherRows { input, indices } => {
                let s = self.shape(input).to_vec();
                let cols = s[1];
                self.accumulate(input, || {
                    let mut gi = vec![0.0; s[0] * cols];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gi[i * cols + c] += g[r * cols + c];
                        }
                    }
                    gi
                });
            }
            Op::BroadcastRows { input } => {
                let m = self.shape(input)[0];
                self.accumulate(input, || {
                    let mut gi = vec![0.0; m];
                    for row in g.chunks(m.max(1)) {
                        gi.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    gi
                });
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

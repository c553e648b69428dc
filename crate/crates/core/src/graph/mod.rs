//! Reverse-mode differentiation on an explicit tape.
//!
//! A [`Graph`] records every primitive application in execution order, which
//! is already a topological order: an op can only reference values that
//! exist. [`Graph::backward`] walks the tape once in reverse, pushing
//! gradients from each node into its parents. Leaf gradients accumulate
//! across calls; interior gradients are rebuilt per call.

mod kernels;

pub use kernels::same_padding;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { x: usize, scale: f64, shift: f64 },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Powf { x: usize, exponent: f64 },
    Softmax(usize),
    Matmul(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, stride: usize, dilation: usize },
    DepthwiseConv2d { x: usize, w: usize, dilation: usize },
    ConvTranspose2 { x: usize, w: usize, b: usize },
    ReduceSum { x: usize, axes: Vec<usize> },
    ReduceMean { x: usize, axes: Vec<usize> },
    Reshape(usize),
    BroadcastTo(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Upsample { x: usize, factor: usize, mode: UpsampleMode },
    /// out[s] = base[s] + w[s]*(enh[s]-base[s]), exact at w in {0,1}.
    FusePerSample { base: usize, enh: usize, w: usize },
}

struct Node {
    op: Op,
    t: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Gradients accumulate into it iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Value {
        self.nodes.push(Node { op: Op::Leaf, t });
        Value(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Value {
        t.requires_grad = false;
        self.input(t)
    }

    pub fn scalar(&mut self, v: f64) -> Value {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].t
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].t.shape()
    }

    pub fn data(&self, v: Value) -> &[f64] {
        self.nodes[v.0].t.data()
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].t.grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Value) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.t
            .grad
            .as_ref()
            .map(|g| Tensor::new(node.t.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, v: Value) -> Tensor {
        let mut t = self.nodes[v.0].t.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, parents: &[usize]) -> Value {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].t.requires_grad);
        let mut t = Tensor::new(shape, data).expect("internal: op produced mismatched buffer");
        t.requires_grad = requires_grad;
        self.nodes.push(Node { op, t });
        Value(self.nodes.len() - 1)
    }

    fn binary_check(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_check("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a.0, b.0), self.shape(a).to_vec(), data, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_check("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a.0, b.0), self.shape(a).to_vec(), data, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_check("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a.0, b.0), self.shape(a).to_vec(), data, &[a.0, b.0]))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_check("div", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x / y).collect();
        Ok(self.push(Op::Div(a.0, b.0), self.shape(a).to_vec(), data, &[a.0, b.0]))
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: Value, scale: f64, shift: f64) -> Value {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        self.push(Op::Affine { x: x.0, scale, shift }, self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn neg(&mut self, x: Value) -> Value {
        self.affine(x, -1.0, 0.0)
    }

    pub fn add_scalar(&mut self, x: Value, c: f64) -> Value {
        self.affine(x, 1.0, c)
    }

    pub fn mul_scalar(&mut self, x: Value, c: f64) -> Value {
        self.affine(x, c, 0.0)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn exp(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn ln(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        self.push(Op::Ln(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn sqrt(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|v| v.sqrt()).collect();
        self.push(Op::Sqrt(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn abs(&mut self, x: Value) -> Value {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        self.push(Op::Abs(x.0), self.shape(x).to_vec(), data, &[x.0])
    }

    pub fn powf(&mut self, x: Value, exponent: f64) -> Value {
        let data = self.data(x).iter().map(|v| v.powf(exponent)).collect();
        self.push(Op::Powf { x: x.0, exponent }, self.shape(x).to_vec(), data, &[x.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Value) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax", "needs rank >= 1"))?;
        let data = kernels::softmax_forward(self.data(x), last);
        Ok(self.push(Op::Softmax(x.0), shape, data, &[x.0]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_forward(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Op::Matmul(a.0, b.0), vec![m, n], data, &[a.0, b.0]))
    }

    /// x @ w + bias for x (B,I), w (I,O), bias (O,).
    pub fn dense(&mut self, x: Value, w: Value, bias: Value) -> Result<Value> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    /// Broadcast-add a bias over the leading axes.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_to(bias, shape)?;
        self.add(x, b)
    }

    // ---- convolution family ----

    /// NHWC conv2d, SAME zero padding, weight (kh,kw,ci,co), bias (co,).
    pub fn conv2d(&mut self, x: Value, w: Value, b: Value, stride: usize, dilation: usize) -> Result<Value> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(Error::shapes("conv2d", sx, sw));
        }
        let co = sw[3];
        if self.shape(b) != [co] {
            return Err(Error::shapes("conv2d bias", self.shape(b), &[co]));
        }
        let dims = (sx[0], sx[1], sx[2], sx[3]);
        let kd = (sw[0], sw[1], co);
        let (data, shape) =
            kernels::conv2d_forward(self.data(x), dims, self.data(w), kd, self.data(b), stride, dilation);
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, dilation }, shape, data, &[x.0, w.0, b.0]))
    }

    /// Depthwise conv2d, stride 1, SAME padding, weight (kh,kw,c), no bias.
    pub fn depthwise_conv2d(&mut self, x: Value, w: Value, dilation: usize) -> Result<Value> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 3 || sx[3] != sw[2] {
            return Err(Error::shapes("depthwise_conv2d", sx, sw));
        }
        let dims = (sx[0], sx[1], sx[2], sx[3]);
        let kd = (sw[0], sw[1]);
        let (data, shape) = kernels::depthwise_forward(self.data(x), dims, self.data(w), kd, dilation);
        Ok(self.push(Op::DepthwiseConv2d { x: x.0, w: w.0, dilation }, shape, data, &[x.0, w.0]))
    }

    /// Transposed conv, 2x2 kernel, stride 2: doubles H and W.
    /// Weight (2,2,ci,co), bias (co,).
    pub fn conv_transpose2(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != 2 || sw[1] != 2 || sx[3] != sw[2] {
            return Err(Error::shapes("conv_transpose2", sx, sw));
        }
        let co = sw[3];
        if self.shape(b) != [co] {
            return Err(Error::shapes("conv_transpose2 bias", self.shape(b), &[co]));
        }
        let dims = (sx[0], sx[1], sx[2], sx[3]);
        let (data, shape) = kernels::conv_transpose2_forward(self.data(x), dims, self.data(w), co, self.data(b));
        Ok(self.push(Op::ConvTranspose2 { x: x.0, w: w.0, b: b.0 }, shape, data, &[x.0, w.0, b.0]))
    }

    // ---- reductions / shape ----

    fn check_axes(&self, op: &'static str, x: Value, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.shape(x).len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::invalid(op, format!("axis out of range for rank {}: {:?}", rank, axes)));
        }
        Ok(axes)
    }

    pub fn reduce_sum(&mut self, x: Value, axes: &[usize], keepdims: bool) -> Result<Value> {
        let axes = self.check_axes("reduce_sum", x, axes)?;
        let shape = kernels::reduced_shape(self.shape(x), &axes, keepdims);
        let data = kernels::reduce_sum_forward(self.data(x), self.shape(x), &axes);
        Ok(self.push(Op::ReduceSum { x: x.0, axes }, shape, data, &[x.0]))
    }

    pub fn reduce_mean(&mut self, x: Value, axes: &[usize], keepdims: bool) -> Result<Value> {
        let axes = self.check_axes("reduce_mean", x, axes)?;
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let shape = kernels::reduced_shape(self.shape(x), &axes, keepdims);
        let mut data = kernels::reduce_sum_forward(self.data(x), self.shape(x), &axes);
        for v in data.iter_mut() {
            *v /= count as f64;
        }
        Ok(self.push(Op::ReduceMean { x: x.0, axes }, shape, data, &[x.0]))
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_sum(x, &axes, false).expect("sum_all")
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_mean(x, &axes, false).expect("mean_all")
    }

    /// Population variance over `axes` (biased denominator).
    pub fn variance(&mut self, x: Value, axes: &[usize], keepdims: bool) -> Result<Value> {
        let m = self.reduce_mean(x, axes, true)?;
        let mb = self.broadcast_to(m, self.shape(x).to_vec())?;
        let d = self.sub(x, mb)?;
        let d2 = self.mul(d, d)?;
        self.reduce_mean(d2, axes, keepdims)
    }

    /// sqrt(variance + 1e-12); the epsilon keeps the gradient finite on
    /// constant fields.
    pub fn std_dev(&mut self, x: Value, axes: &[usize], keepdims: bool) -> Result<Value> {
        let v = self.variance(x, axes, keepdims)?;
        let ve = self.add_scalar(v, 1e-12);
        Ok(self.sqrt(ve))
    }

    /// Global average pooling over spatial axes of NHWC: (B,H,W,C) -> (B,C).
    pub fn gap(&mut self, x: Value) -> Result<Value> {
        if self.shape(x).len() != 4 {
            return Err(Error::invalid("gap", format!("needs NHWC input, got {:?}", self.shape(x))));
        }
        self.reduce_mean(x, &[1, 2], false)
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::shapes("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape(x.0), shape, data, &[x.0]))
    }

    pub fn broadcast_to(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let in_shape = self.shape(x).to_vec();
        if in_shape == shape {
            // still recorded so the backward sum stays uniform
        }
        if in_shape.len() > shape.len() {
            return Err(Error::shapes("broadcast_to", &in_shape, &shape));
        }
        let pad = shape.len() - in_shape.len();
        for (d, &s) in in_shape.iter().enumerate() {
            if s != 1 && s != shape[pad + d] {
                return Err(Error::shapes("broadcast_to", &in_shape, &shape));
            }
        }
        let data = kernels::broadcast_forward(self.data(x), &in_shape, &shape);
        Ok(self.push(Op::BroadcastTo(x.0), shape, data, &[x.0]))
    }

    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {} out of range", axis)));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(Error::shapes("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row = total * inner;
        let mut off = 0;
        for &x in xs {
            let s_axis = self.shape(x)[axis];
            let chunk = s_axis * inner;
            let src = self.data(x);
            for o in 0..outer {
                data[o * row + off..o * row + off + chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            off += chunk;
        }
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::Concat { xs: parents.clone(), axis }, out_shape, data, &parents))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {} range {}..{} out of shape {:?}", axis, start, start + len, shape),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = self.data(x);
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        Ok(self.push(Op::Narrow { x: x.0, axis, start }, out_shape, data, &[x.0]))
    }

    pub fn upsample(&mut self, x: Value, factor: usize, mode: UpsampleMode) -> Result<Value> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid("upsample", format!("needs NHWC input, got {:?}", s)));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be >= 1"));
        }
        let dims = (s[0], s[1], s[2], s[3]);
        let (data, shape) = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest_forward(self.data(x), dims, factor),
            UpsampleMode::Bilinear => kernels::upsample_bilinear_forward(self.data(x), dims, factor),
        };
        Ok(self.push(Op::Upsample { x: x.0, factor, mode }, shape, data, &[x.0]))
    }

    /// Per-sample interpolation out = base + w*(enh - base) with w (B,).
    /// Exactly base at w == 0 and exactly enh at w == 1.
    pub fn fuse_per_sample(&mut self, base: Value, enh: Value, w: Value) -> Result<Value> {
        self.binary_check("fuse_per_sample", base, enh)?;
        let shape = self.shape(base).to_vec();
        let bsz = shape[0];
        if self.shape(w) != [bsz] {
            return Err(Error::shapes("fuse_per_sample weight", self.shape(w), &[bsz]));
        }
        let per = self.data(base).len() / bsz;
        let mut data = vec![0.0; self.data(base).len()];
        for s in 0..bsz {
            let wv = self.data(w)[s];
            let b = &self.data(base)[s * per..(s + 1) * per];
            let e = &self.data(enh)[s * per..(s + 1) * per];
            let o = &mut data[s * per..(s + 1) * per];
            if wv == 0.0 {
                o.copy_from_slice(b);
            } else if wv == 1.0 {
                o.copy_from_slice(e);
            } else {
                for i in 0..per {
                    o[i] = b[i] + wv * (e[i] - b[i]);
                }
            }
        }
        Ok(self.push(Op::FusePerSample { base: base.0, enh: enh.0, w: w.0 }, shape, data, &[base.0, enh.0, w.0]))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].t.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        // reset interior grads, keep leaf accumulators
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.t.grad = None;
            }
        }
        self.accumulate(loss.0, None, 1.0);
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].t.grad.is_none() {
                continue;
            }
            if !self.nodes[i].t.requires_grad {
                continue;
            }
            let grad = self.nodes[i].t.grad.take().expect("checked above");
            self.step_backward(i, &grad);
            self.nodes[i].t.grad = Some(grad);
        }
        Ok(())
    }

    /// Add `scale * g` (or `scale` everywhere when g is None) into a node's
    /// grad buffer, allocating on first touch. No-op for non-tracked nodes.
    fn accumulate(&mut self, idx: usize, g: Option<&[f64]>, scale: f64) {
        let node = &mut self.nodes[idx];
        if !node.t.requires_grad {
            return;
        }
        let n = node.t.len();
        let buf = node.t.grad.get_or_insert_with(|| vec![0.0; n]);
        match g {
            Some(g) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += scale * v;
                }
            }
            None => {
                for b in buf.iter_mut() {
                    *b += scale;
                }
            }
        }
    }

    fn accumulate_mapped<F>(&mut self, idx: usize, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        let node = &mut self.nodes[idx];
        if !node.t.requires_grad {
            return;
        }
        let n = node.t.len();
        let buf = node.t.grad.get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn wants_grad(&self, idx: usize) -> bool {
        self.nodes[idx].t.requires_grad
    }

    fn step_backward(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, Some(g), 1.0);
                self.accumulate(b, Some(g), 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, Some(g), 1.0);
                self.accumulate(b, Some(g), -1.0);
            }
            Op::Mul(a, b) => {
                if self.wants_grad(a) {
                    let gb: Vec<f64> = g.iter().zip(self.nodes[b].t.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, Some(&gb), 1.0);
                }
                if self.wants_grad(b) {
                    let ga: Vec<f64> = g.iter().zip(self.nodes[a].t.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, Some(&ga), 1.0);
                }
            }
            Op::Div(a, b) => {
                if self.wants_grad(a) {
                    let ga: Vec<f64> = g.iter().zip(self.nodes[b].t.data()).map(|(g, y)| g / y).collect();
                    self.accumulate(a, Some(&ga), 1.0);
                }
                if self.wants_grad(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].t.data().iter().zip(self.nodes[b].t.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(b, Some(&gb), 1.0);
                }
            }
            Op::Affine { x, scale, .. } => self.accumulate(x, Some(g), scale),
            Op::Relu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x].t.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].t.data())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(self.nodes[i].t.data()).map(|(g, &y)| g * y).collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Ln(x) => {
                let gx: Vec<f64> = g.iter().zip(self.nodes[x].t.data()).map(|(g, &v)| g / v).collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Sqrt(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].t.data())
                    .map(|(g, &y)| g * 0.5 / y)
                    .collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Abs(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x].t.data())
                    .map(|(g, &v)| if v >= 0.0 { *g } else { -*g })
                    .collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Powf { x, exponent } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[x].t.data())
                    .map(|(g, &v)| g * exponent * v.powf(exponent - 1.0))
                    .collect();
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Softmax(x) => {
                let last = *self.nodes[i].t.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                kernels::softmax_backward(g, self.nodes[i].t.data(), last, &mut gx);
                self.accumulate(x, Some(&gx), 1.0);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].t.shape()[0], self.nodes[a].t.shape()[1]);
                let n = self.nodes[b].t.shape()[1];
                let mut ga = if self.wants_grad(a) { Some(vec![0.0; m * k]) } else { None };
                let mut gb = if self.wants_grad(b) { Some(vec![0.0; k * n]) } else { None };
                kernels::matmul_backward(
                    g,
                    self.nodes[a].t.data(),
                    self.nodes[b].t.data(),
                    m,
                    k,
                    n,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(ga) = ga {
                    self.accumulate(a, Some(&ga), 1.0);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, Some(&gb), 1.0);
                }
            }
            Op::Conv2d { x, w, b, stride, dilation } => {
                let sx = self.nodes[x].t.shape().to_vec();
                let sw = self.nodes[w].t.shape().to_vec();
                let dims = (sx[0], sx[1], sx[2], sx[3]);
                let kd = (sw[0], sw[1], sw[3]);
                let mut gx = if self.wants_grad(x) { Some(vec![0.0; self.nodes[x].t.len()]) } else { None };
                let mut gw = if self.wants_grad(w) { Some(vec![0.0; self.nodes[w].t.len()]) } else { None };
                let mut gb = if self.wants_grad(b) { Some(vec![0.0; self.nodes[b].t.len()]) } else { None };
                kernels::conv2d_backward(
                    g,
                    self.nodes[x].t.data(),
                    dims,
                    self.nodes[w].t.data(),
                    kd,
                    stride,
                    dilation,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, Some(&gx), 1.0);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, Some(&gw), 1.0);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, Some(&gb), 1.0);
                }
            }
            Op::DepthwiseConv2d { x, w, dilation } => {
                let sx = self.nodes[x].t.shape().to_vec();
                let sw = self.nodes[w].t.shape().to_vec();
                let dims = (sx[0], sx[1], sx[2], sx[3]);
                let kd = (sw[0], sw[1]);
                let mut gx = if self.wants_grad(x) { Some(vec![0.0; self.nodes[x].t.len()]) } else { None };
                let mut gw = if self.wants_grad(w) { Some(vec![0.0; self.nodes[w].t.len()]) } else { None };
                kernels::depthwise_backward(
                    g,
                    self.nodes[x].t.data(),
                    dims,
                    self.nodes[w].t.data(),
                    kd,
                    dilation,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, Some(&gx), 1.0);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, Some(&gw), 1.0);
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let sx = self.nodes[x].t.shape().to_vec();
                let co = self.nodes[w].t.shape()[3];
                let dims = (sx[0], sx[1], sx[2], sx[3]);
                let mut gx = if self.wants_grad(x) { Some(vec![0.0; self.nodes[x].t.len()]) } else { None };
                let mut gw = if self.wants_grad(w) { Some(vec![0.0; self.nodes[w].t.len()]) } else { None };
                let mut gb = if self.wants_grad(b) { Some(vec![0.0; self.nodes[b].t.len()]) } else { None };
                kernels::conv_transpose2_backward(
                    g,
                    self.nodes[x].t.data(),
                    dims,
                    self.nodes[w].t.data(),
                    co,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, Some(&gx), 1.0);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, Some(&gw), 1.0);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, Some(&gb), 1.0);
                }
            }
            Op::ReduceSum { x, axes } => {
                let shape = self.nodes[x].t.shape().to_vec();
                self.accumulate_mapped(x, |buf| {
                    kernels::reduce_backward(g, &shape, &axes, 1.0, buf);
                });
            }
            Op::ReduceMean { x, axes } => {
                let shape = self.nodes[x].t.shape().to_vec();
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                self.accumulate_mapped(x, |buf| {
                    kernels::reduce_backward(g, &shape, &axes, 1.0 / count as f64, buf);
                });
            }
            Op::Reshape(x) => self.accumulate(x, Some(g), 1.0),
            Op::BroadcastTo(x) => {
                let in_shape = self.nodes[x].t.shape().to_vec();
                let out_shape = self.nodes[i].t.shape().to_vec();
                self.accumulate_mapped(x, |buf| {
                    kernels::broadcast_backward(g, &in_shape, &out_shape, buf);
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].t.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut off = 0;
                for &x in &xs {
                    let s_axis = self.nodes[x].t.shape()[axis];
                    let chunk = s_axis * inner;
                    if self.wants_grad(x) {
                        let mut gx = vec![0.0; self.nodes[x].t.len()];
                        for o in 0..outer {
                            gx[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&g[o * row + off..o * row + off + chunk]);
                        }
                        self.accumulate(x, Some(&gx), 1.0);
                    }
                    off += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.nodes[x].t.shape().to_vec();
                let len = self.nodes[i].t.shape()[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.accumulate_mapped(x, |buf| {
                    for o in 0..outer {
                        let dst = (o * in_shape[axis] + start) * inner;
                        for (d, &v) in buf[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += v;
                        }
                    }
                });
            }
            Op::Upsample { x, factor, mode } => {
                let s = self.nodes[x].t.shape().to_vec();
                let dims = (s[0], s[1], s[2], s[3]);
                self.accumulate_mapped(x, |buf| match mode {
                    UpsampleMode::Nearest => kernels::upsample_nearest_backward(g, dims, factor, buf),
                    UpsampleMode::Bilinear => kernels::upsample_bilinear_backward(g, dims, factor, buf),
                });
            }
            Op::FusePerSample { base, enh, w } => {
                let bsz = self.nodes[w].t.len();
                let per = self.nodes[base].t.len() / bsz;
                let wv = self.nodes[w].t.data().to_vec();
                if self.wants_grad(base) {
                    let mut gb = vec![0.0; self.nodes[base].t.len()];
                    for s in 0..bsz {
                        for k in 0..per {
                            gb[s * per + k] = g[s * per + k] * (1.0 - wv[s]);
                        }
                    }
                    self.accumulate(base, Some(&gb), 1.0);
                }
                if self.wants_grad(enh) {
                    let mut ge = vec![0.0; self.nodes[enh].t.len()];
                    for s in 0..bsz {
                        for k in 0..per {
                            ge[s * per + k] = g[s * per + k] * wv[s];
                        }
                    }
                    self.accumulate(enh, Some(&ge), 1.0);
                }
                if self.wants_grad(w) {
                    let bd = self.nodes[base].t.data();
                    let ed = self.nodes[enh].t.data();
                    let mut gw = vec![0.0; bsz];
                    for s in 0..bsz {
                        let mut acc = 0.0;
                        for k in 0..per {
                            acc += g[s * per + k] * (ed[s * per + k] - bd[s * per + k]);
                        }
                        gw[s] = acc;
                    }
                    self.accumulate(w, Some(&gw), 1.0);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[0.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.data(y), &[0.5]);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3.7, 3.7]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let xx = g.mul(x, x).unwrap();
        let s = g.sum_all(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_accumulates_on_leaves() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 4.0]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{}", err);
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{}", err);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).with_grad());
        let c = g.constant(t(&[2], &[5.0, 5.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0, 5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn fuse_per_sample_boundaries_are_bit_exact() {
        let mut rng = Rng::seed_from(11);
        let mut g = Graph::new();
        let base = g.input(Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng));
        let enh = g.input(Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng));
        let w = g.input(t(&[2], &[0.0, 1.0]));
        let out = g.fuse_per_sample(base, enh, w).unwrap();
        let per = 18;
        assert_eq!(&g.data(out)[..per], &g.data(base)[..per]);
        assert_eq!(&g.data(out)[per..], &g.data(enh)[per..]);
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.data(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let back = g.narrow(c, 1, 2, 3).unwrap();
        assert_eq!(g.data(back), g.data(b));
    }

    #[test]
    fn upsample_nearest_repeats_pixels() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 1], &[1.0, 2.0]));
        let y = g.upsample(x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 1]);
        assert_eq!(g.data(y), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}

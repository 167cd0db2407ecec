//! Reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and enough
//! information to replay the adjoint. Node order is a topological order, so
//! `backward` is a single reverse sweep. A tape is single-use: build it for
//! one forward pass, run `backward` once, then drop or `reset` it.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddBias(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Softplus(Var),
    LogClamped { x: Var, lo: f64, hi: f64 },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Depthwise { x: Var, w: Var },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Sum(Var),
    MaxN { xs: Vec<Var>, argmax: Vec<u32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` if the leaf did not influence the loss or
    /// does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Registers a leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    fn val(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownVar)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.val(a)?.dims2("matmul")?;
        let [k2, n] = self.val(b)?.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.val(a)?.data(), self.val(b)?.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x)?.transpose()?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a)?.shape(), self.val(b)?.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.val(a)?.zip_map(self.val(b)?, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.val(a)?.zip_map(self.val(b)?, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.val(a)?.zip_map(self.val(b)?, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `factor * x + offset`.
    pub fn affine(&mut self, x: Var, factor: f64, offset: f64) -> Result<Var> {
        let t = self.val(x)?.map(|v| factor * v + offset);
        self.push("affine", t, Op::Affine(x, factor), &[x])
    }

    /// Adds `bias[C]` to every length-C row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.val(x)?;
        let c = *xs.shape().last().unwrap_or(&0);
        if self.val(bias)?.shape() != [c] {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", xs.shape(), self.val(bias)?.shape()),
            ));
        }
        let b = self.val(bias)?.data();
        let mut t = xs.clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x)?.map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.val(x)?.map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x)?.map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    /// `ln(1 + e^x)`
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x)?.map(kernels::softplus);
        self.push("softplus", t, Op::Softplus(x), &[x])
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo > 0.0 && lo < hi) {
            return Err(arg_err("log_clamped", format!("bounds [{lo}, {hi}]")));
        }
        let t = self.val(x)?.map(|v| v.clamp(lo, hi).ln());
        self.push("log_clamped", t, Op::LogClamped { x, lo, hi }, &[x])
    }

    // ---- normalisation -----------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.val(x)?;
        if axis >= xs.rank() {
            return Err(arg_err("softmax", format!("axis {axis} for shape {:?}", xs.shape())));
        }
        let (outer, n, inner) = split_axis(xs.shape(), axis);
        let mut out = xs.data().to_vec();
        kernels::softmax(&mut out, outer, n, inner);
        let t = Tensor::new(xs.shape(), out)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Per-row normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.val(x)?;
        let c = *xs.shape().last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if self.val(gamma)?.shape() != [c] || self.val(beta)?.shape() != [c] {
            return Err(shape_err("layer_norm", "gamma/beta must match last extent"));
        }
        let g = self.val(gamma)?.data();
        let b = self.val(beta)?.data();
        let rows = xs.numel() / c;
        let mut xhat = vec![0.0; xs.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.numel()];
        for r in 0..rows {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xs.shape(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ---- spatial -----------------------------------------------------------

    /// Cross-correlation of `x[C_in, H, W]` with `w[C_out, C_in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [cin, h, wd] = self.val(x)?.dims3("conv2d")?;
        let ws = self.val(w)?.shape().to_vec();
        let [cout, cin2, k, k2] = ws[..] else {
            return Err(shape_err("conv2d", format!("kernel shape {ws:?}")));
        };
        if cin != cin2 || k != k2 {
            return Err(shape_err("conv2d", format!("input {cin} channels, kernel {ws:?}")));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(arg_err("conv2d", format!("kernel {k}, stride {stride}")));
        }
        if let Some(b) = b {
            if self.val(b)?.shape() != [cout] {
                return Err(shape_err("conv2d", "bias must have C_out entries"));
            }
        }
        let geom = kernels::ConvGeom::new(h, wd, k, stride, pad)
            .ok_or_else(|| arg_err("conv2d", format!("non-integral output for {h}x{wd}, k={k}, stride={stride}, pad={pad}")))?;
        let mut out = vec![0.0; cout * geom.oh * geom.ow];
        kernels::conv2d(self.val(x)?.data(), self.val(w)?.data(), &mut out, cin, cout, &geom);
        if let Some(b) = b {
            let bias = self.val(b)?.data();
            let plane = geom.oh * geom.ow;
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let t = Tensor::new(&[cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Per-channel correlation of `x[C, H, W]` with `w[C, k, k]`, stride 1 and
    /// zero padding `(k - 1) / 2`, so the output keeps the input extent.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [c, h, wd] = self.val(x)?.dims3("depthwise_conv2d")?;
        let [c2, k, k2] = self.val(w)?.dims3("depthwise_conv2d")?;
        if c != c2 || k != k2 {
            return Err(shape_err("depthwise_conv2d", format!("input {c} channels, kernel [{c2}x{k}x{k2}]")));
        }
        if k % 2 == 0 {
            return Err(arg_err("depthwise_conv2d", format!("kernel size {k} must be odd")));
        }
        let mut out = vec![0.0; c * h * wd];
        kernels::depthwise(self.val(x)?.data(), self.val(w)?.data(), &mut out, c, h, wd, k);
        let t = Tensor::new(&[c, h, wd], out)?;
        self.push("depthwise_conv2d", t, Op::Depthwise { x, w }, &[x, w])
    }

    /// Bilinear upsampling of `x[C, H, W]` by an integer factor with
    /// half-pixel sample centres (align-corners off).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [c, h, w] = self.val(x)?.dims3("upsample_bilinear")?;
        if factor < 1 {
            return Err(arg_err("upsample_bilinear", "factor must be >= 1"));
        }
        let rows = kernels::interp_table(h, factor);
        let cols = kernels::interp_table(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.val(x)?.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let s = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - wx) + s[y0 * w + x1] * wx;
                    let bot = s[y1 * w + x0] * (1.0 - wx) + s[y1 * w + x1] * wx;
                    o[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        self.push("upsample_bilinear", t, Op::Upsample { x, factor }, &[x])
    }

    /// Adaptive average pooling of `x[C, H, W]` to `[C, oh, ow]`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [c, h, w] = self.val(x)?.dims3("adaptive_avg_pool2d")?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(arg_err("adaptive_avg_pool2d", "empty extent"));
        }
        let rb = kernels::pool_bins(h, oh);
        let cb = kernels::pool_bins(w, ow);
        let src = self.val(x)?.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for (i, &(r0, r1)) in rb.iter().enumerate() {
                for (j, &(c0, c1)) in cb.iter().enumerate() {
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += src[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * oh + i) * ow + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        self.push("adaptive_avg_pool2d", t, Op::AvgPool { x }, &[x])
    }

    // ---- structural --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x)?.clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg_err("concat_rows", "no inputs"))?;
        let tail = self.val(*first)?.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.val(v)?;
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs trailing {tail:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(&tail);
        let t = Tensor::new(&shape, data)?;
        self.push("concat_rows", t, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Concatenation of 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg_err("concat_cols", "no inputs"))?;
        let [rows, _] = self.val(*first)?.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let [r, c] = self.val(v)?.dims2("concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &c) in xs.iter().zip(&widths) {
            let src = self.val(v)?.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::new(&[rows, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x)?.slice_rows(start, len)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.val(x)?.dims2("slice_cols")?;
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.val(x)?.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(&[rows, len], data)?;
        self.push("slice_cols", t, Op::SliceCols { x, start }, &[x])
    }

    /// Repeats every row of a 2-D tensor `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let [rows, cols] = self.val(x)?.dims2("repeat_rows")?;
        let src = self.val(x)?.data();
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(&[rows * times, cols], data)?;
        self.push("repeat_rows", t, Op::RepeatRows { x, times }, &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x)?.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x)?.numel();
        if n == 0 {
            return Err(arg_err("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise maximum over same-shape tensors. Ties go to the earliest
    /// input, which also receives the gradient.
    pub fn max_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| arg_err("max_n", "no inputs"))?;
        let shape = self.val(first)?.shape().to_vec();
        for &v in xs {
            if self.val(v)?.shape() != &shape[..] {
                return Err(shape_err("max_n", format!("{:?} vs {shape:?}", self.val(v)?.shape())));
            }
        }
        let mut out = self.val(first)?.data().to_vec();
        let mut argmax = vec![0u32; out.len()];
        for (idx, &v) in xs.iter().enumerate().skip(1) {
            for (j, &val) in self.val(v)?.data().iter().enumerate() {
                if val > out[j] {
                    out[j] = val;
                    argmax[j] = idx as u32;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("max_n", t, Op::MaxN { xs: xs.to_vec(), argmax }, xs)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.val(loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let v_of = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let [m, k] = self.nodes[a.0].value.dims2("matmul").unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                if rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, v_of(*b), ga, m, n, k);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(v_of(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    let [r, c] = self.nodes[x.0].value.dims2("transpose").unwrap();
                    let gx = slot(grads, *x, r * c);
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if rg(*b) {
                    axpy(slot(grads, *b, g.len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v_of(*a), v_of(*b));
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Affine(x, f) => {
                if rg(*x) {
                    axpy(slot(grads, *x, g.len()), g, *f);
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if rg(*b) {
                    let c = self.nodes[b.0].value.numel();
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c.max(1)) {
                        for j in 0..c {
                            gb[j] += row[j];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if rg(*x) {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for s in 0..inner {
                            let base = o * n * inner + s;
                            let mut dot = 0.0;
                            for j in 0..n {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.nodes[gamma.0].value.numel();
                let gam = v_of(*gamma);
                let rows = g.len() / c;
                if rg(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = slot(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g[r * c + j] * gam[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let xv = v_of(*x);
                    let gx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * kernels::gelu_grad(xv[j]);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if rg(*x) {
                    let xv = v_of(*x);
                    let gx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += if xv[j] > 0.0 { g[j] } else { slope * g[j] };
                    }
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let xv = v_of(*x);
                    let gx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                if rg(*x) {
                    let xv = v_of(*x);
                    let gx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * kernels::sigmoid(xv[j]);
                    }
                }
            }
            Op::LogClamped { x, lo, hi } => {
                if rg(*x) {
                    let xv = v_of(*x);
                    let gx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        if xv[j] > *lo && xv[j] < *hi {
                            gx[j] += g[j] / xv[j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let [cin, h, wd] = self.nodes[x.0].value.dims3("conv2d").unwrap();
                let ws = self.nodes[w.0].value.shape();
                let (cout, k) = (ws[0], ws[2]);
                let geom = kernels::ConvGeom::new(h, wd, k, *stride, *pad).unwrap();
                if rg(*x) {
                    let gx = slot(grads, *x, cin * h * wd);
                    kernels::conv2d_grad_input(g, v_of(*w), gx, cin, cout, &geom);
                }
                if rg(*w) {
                    let gw = slot(grads, *w, cout * cin * k * k);
                    kernels::conv2d_grad_weight(g, v_of(*x), gw, cin, cout, &geom);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let plane = geom.oh * geom.ow;
                        let gb = slot(grads, *b, cout);
                        for (co, chunk) in g.chunks(plane).enumerate() {
                            gb[co] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Depthwise { x, w } => {
                let [c, h, wd] = self.nodes[x.0].value.dims3("depthwise").unwrap();
                let k = self.nodes[w.0].value.shape()[1];
                if rg(*x) {
                    let gx = slot(grads, *x, c * h * wd);
                    kernels::depthwise_grad_input(g, v_of(*w), gx, c, h, wd, k);
                }
                if rg(*w) {
                    let gw = slot(grads, *w, c * k * k);
                    kernels::depthwise_grad_weight(g, v_of(*x), gw, c, h, wd, k);
                }
            }
            Op::Upsample { x, factor } => {
                if rg(*x) {
                    let [c, h, w] = self.nodes[x.0].value.dims3("upsample").unwrap();
                    let rows = kernels::interp_table(h, *factor);
                    let cols = kernels::interp_table(w, *factor);
                    let (oh, ow) = (h * factor, w * factor);
                    let gx = slot(grads, *x, c * h * w);
                    for ch in 0..c {
                        let go = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let gs = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                                let v = go[oy * ow + ox];
                                gs[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                                gs[y0 * w + x1] += v * (1.0 - wy) * wx;
                                gs[y1 * w + x0] += v * wy * (1.0 - wx);
                                gs[y1 * w + x1] += v * wy * wx;
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x } => {
                if rg(*x) {
                    let [c, h, w] = self.nodes[x.0].value.dims3("pool").unwrap();
                    let [_, oh, ow] = node.value.dims3("pool").unwrap();
                    let rb = kernels::pool_bins(h, oh);
                    let cb = kernels::pool_bins(w, ow);
                    let gx = slot(grads, *x, c * h * w);
                    for ch in 0..c {
                        for (i, &(r0, r1)) in rb.iter().enumerate() {
                            for (j, &(c0, c1)) in cb.iter().enumerate() {
                                let v = g[(ch * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for yy in r0..r1 {
                                    for xx in c0..c1 {
                                        gx[(ch * h + yy) * w + xx] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.nodes[v.0].value.numel();
                    if rg(v) {
                        axpy(slot(grads, v, n), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &v in xs {
                    let [rows, c] = self.nodes[v.0].value.dims2("concat_cols").unwrap();
                    if rg(v) {
                        let gv = slot(grads, v, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gv[r * c + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let xt = &self.nodes[x.0].value;
                    let stride = xt.numel() / xt.shape()[0].max(1);
                    let gx = slot(grads, *x, xt.numel());
                    axpy(&mut gx[start * stride..start * stride + g.len()], g, 1.0);
                }
            }
            Op::SliceCols { x, start } => {
                if rg(*x) {
                    let [rows, cols] = self.nodes[x.0].value.dims2("slice_cols").unwrap();
                    let len = node.value.shape()[1];
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                if rg(*x) {
                    let [rows, cols] = self.nodes[x.0].value.dims2("repeat_rows").unwrap();
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for t in 0..*times {
                            let src = (r * times + t) * cols;
                            for j in 0..cols {
                                gx[r * cols + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let gx = slot(grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::MaxN { xs, argmax } => {
                for (idx, &v) in xs.iter().enumerate() {
                    if !rg(v) {
                        continue;
                    }
                    let gv = slot(grads, v, g.len());
                    for j in 0..g.len() {
                        if argmax[j] as usize == idx {
                            gv[j] += g[j];
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

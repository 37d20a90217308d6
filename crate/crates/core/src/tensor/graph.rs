//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! parent handles. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, axis_split, matmul_into, matmul_nt_into, matmul_tn_into, sigmoid};
use super::{RngState, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Swish,
    Relu,
    Exp,
    Log,
}

/// Value substituted for masked attention scores.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    DepthwiseConv1d { x: Var, kernel: Var },
    Conv2d { x: Var, weight: Var, bias: Var, stride: usize },
    MaskMul { x: Var, mask: Vec<f64> },
    MaskFill { x: Var, pass: Vec<bool> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    RelGather(Var),
    Fused { inputs: Vec<Var>, local: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Single-owner operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fully_masked_rows: usize,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        msg: msg.into(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    /// Number of attention rows that had every key masked (they fall back to uniform weights).
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| dim_err(op, format!("expected a 2-D tensor, got {:?}", self.shape(v))))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// `x · w + b` with `w: [in × out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = *tx.shape().last().unwrap_or(&0);
        if tr.len() != c || tr.rank() != 1 {
            return Err(shape_err(op, tx, tr));
        }
        Ok(c)
    }

    /// Adds a `[C]` vector to every row of `[.., C]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.row_broadcast(x, bias, "add_row")?;
        let b = self.value(bias).data();
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    /// Multiplies every row of `[.., C]` elementwise by a `[C]` vector.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let c = self.row_broadcast(x, scale, "mul_row")?;
        let s = self.value(scale).data();
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().enumerate().map(|(i, &v)| v * s[i % c]).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, scale]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulRow(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let t = self.value(x);
        if f == Unary::Log {
            if let Some(index) = t.data().iter().position(|&v| !(v > 0.0)) {
                return Err(Error::Numeric { op: "log", index });
            }
        }
        let out = t.map(|v| match f {
            Unary::Sigmoid => sigmoid(v),
            Unary::Swish => v * sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
        });
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Unary(x, f), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Swish).expect("swish is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    // ---------------------------------------------------------------- normalization

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.value(x).rank() {
            return Err(dim_err(op, format!("axis {} out of range for {:?}", axis, self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let out = kernels::softmax_axis(t.data(), t.shape(), axis, false);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let out = kernels::softmax_axis(t.data(), t.shape(), axis, true);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(dim_err("layer_norm", "eps must be positive"));
        }
        let c = self.row_broadcast(x, gamma, "layer_norm")?;
        self.row_broadcast(x, beta, "layer_norm")?;
        let t = self.value(x);
        let rows = t.len() / c.max(1);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Batch normalization over the rows of `[N × C]`.
    ///
    /// With `running = None` the batch statistics are used and returned; with
    /// `Some((mean, var))` the stored statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c) = self.dims2(x, "batch_norm")?;
        self.row_broadcast(x, gamma, "batch_norm")?;
        self.row_broadcast(x, beta, "batch_norm")?;
        if n == 0 {
            return Err(dim_err("batch_norm", "empty batch"));
        }
        let t = self.value(x).data();
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(dim_err("batch_norm", "running statistics width mismatch"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..n {
                    add_into(&mut mean, &t[r * c..(r + 1) * c]);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for j in 0..c {
                        let d = t[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (t[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(vec![n, c], out)?,
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train },
            rg,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    // ---------------------------------------------------------------- convolution

    /// Depthwise 1-D convolution over time with zero "same" padding.
    /// `x: [T × C]`, `kernel: [K × C]`, `K` odd.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = self.dims2(x, "conv1d_depthwise")?;
        let (k, c2) = self.dims2(kernel, "conv1d_depthwise")?;
        if c != c2 {
            return Err(shape_err("conv1d_depthwise", self.value(x), self.value(kernel)));
        }
        if k % 2 == 0 {
            return Err(dim_err("conv1d_depthwise", format!("kernel size {} must be odd", k)));
        }
        let half = k / 2;
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[ti * c + ch] += xd[src * c + ch] * kd[j * c + ch];
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor::new(vec![t, c], out)?, Op::DepthwiseConv1d { x, kernel }, rg))
    }

    /// Strided 2-D cross-correlation without padding.
    /// `x: [Cin × H × W]`, `weight: [Cout × Cin × kh × kw]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be at least 1"));
        }
        let (tx, tw) = (self.value(x), self.value(weight));
        let (&[cin, h, w], &[cout, cin2, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("conv2d", tx, tw));
        };
        if cin != cin2 || self.value(bias).shape() != [cout] {
            return Err(shape_err("conv2d", tx, tw));
        }
        if h < kh || w < kw {
            return Err(dim_err(
                "conv2d",
                format!("input {}x{} smaller than kernel {}x{}", h, w, kh, kw),
            ));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let (xd, wd, bd) = (tx.data(), tw.data(), self.value(bias).data());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for ci in 0..cin {
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wd[((o * cin + ci) * kh + u) * kw + v];
                        for i in 0..ho {
                            let xrow = &xd[(ci * h + i * stride + u) * w..];
                            let orow = &mut plane[i * wo..(i + 1) * wo];
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * xrow[j * stride + v];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d { x, weight, bias, stride },
            rg,
        ))
    }

    // ---------------------------------------------------------------- masking

    /// Inverted dropout: in train mode zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(dim_err("dropout", format!("probability {} outside [0, 1)", p)));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = rng
            .uniforms(self.value(x).len())
            .into_iter()
            .map(|u| if u < p { 0.0 } else { keep })
            .collect();
        Ok(self.mask_mul(x, mask))
    }

    /// Multiplies by a constant elementwise factor.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same size"), Op::MaskMul { x, mask }, rg)
    }

    /// Replaces disallowed entries of a `[R × C]` score matrix with [`MASK_BIAS`].
    /// Rows with no allowed entry are zeroed so a following softmax is uniform.
    pub fn mask_fill(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(x, "mask_fill")?;
        if allow.len() != r * c {
            return Err(dim_err("mask_fill", format!("mask has {} cells, scores {}x{}", allow.len(), r, c)));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut pass = vec![false; r * c];
        let mut full = 0;
        for i in 0..r {
            let row_allow = &allow[i * c..(i + 1) * c];
            if row_allow.iter().all(|a| !a) {
                full += 1;
                continue;
            }
            for j in 0..c {
                let idx = i * c + j;
                if row_allow[j] {
                    out[idx] = xd[idx];
                    pass[idx] = true;
                } else {
                    out[idx] = MASK_BIAS;
                }
            }
        }
        if full > 0 {
            log::warn!("{} attention row(s) fully masked; using uniform weights", full);
        }
        self.fully_masked_rows += full;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MaskFill { x, pass }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(dim_err("slice_cols", format!("columns {}..{} out of {}", start, start + len, c)));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{:?} is not a permutation of rank {}", perm, rank)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let out = permute_data(t.data(), t.shape(), perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table: [V × D]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Vocabulary { id, position, size: v });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Maps `[T × (2T-1)]` scores indexed by relative offset `i - l + T - 1`
    /// onto the `[T × T]` grid: `out[i][l] = x[i][i - l + T - 1]`.
    pub fn rel_gather(&mut self, x: Var) -> Result<Var> {
        let (t, w) = self.dims2(x, "rel_gather")?;
        if t == 0 || w != 2 * t - 1 {
            return Err(dim_err("rel_gather", format!("expected [T x 2T-1], got {:?}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            for l in 0..t {
                out[i * t + l] = xd[i * w + i + t - 1 - l];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![t, t], out)?, Op::RelGather(x), rg))
    }

    /// Scalar computed outside the tape together with its exact local gradients.
    pub fn fused_scalar(&mut self, value: f64, inputs: &[Var], local: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(dim_err("fused_scalar", "one local gradient per input required"));
        }
        for (&v, l) in inputs.iter().zip(&local) {
            if self.value(v).len() != l.len() {
                return Err(dim_err("fused_scalar", "local gradient size mismatch"));
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused { inputs: inputs.to_vec(), local },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut pass);
            }
            pass[i] = Some(g);
        }
        for (i, g) in pass.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! with_slot {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = grad_slot(nodes, pass, $v) {
                    $body
                }
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape()[1];
                with_slot!(*a, |d| matmul_nt_into(g, val(*b).data(), d, m, n, k));
                with_slot!(*b, |d| matmul_tn_into(val(*a).data(), g, d, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                with_slot!(*a, |d| for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                });
            }
            Op::Add(a, b) => {
                with_slot!(*a, |d| add_into(d, g));
                with_slot!(*b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |d| add_into(d, g));
                with_slot!(*b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                with_slot!(*a, |d| for j in 0..g.len() {
                    d[j] += g[j] * bv[j];
                });
                with_slot!(*b, |d| for j in 0..g.len() {
                    d[j] += g[j] * av[j];
                });
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                with_slot!(*x, |d| add_into(d, g));
                with_slot!(*b, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv;
                });
            }
            Op::MulRow(x, s) => {
                let c = val(*s).len();
                let (xv, sv) = (val(*x).data(), val(*s).data());
                with_slot!(*x, |d| for (j, gv) in g.iter().enumerate() {
                    d[j] += gv * sv[j % c];
                });
                with_slot!(*s, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv * xv[j];
                });
            }
            Op::Scale(x, c) => {
                with_slot!(*x, |d| for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv * c;
                });
            }
            Op::Sum(x) => {
                with_slot!(*x, |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                with_slot!(*x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Unary(x, f) => {
                let (xv, yv) = (val(*x).data(), out.data());
                with_slot!(*x, |d| for j in 0..g.len() {
                    let local = match f {
                        Unary::Sigmoid => yv[j] * (1.0 - yv[j]),
                        Unary::Swish => {
                            let s = sigmoid(xv[j]);
                            s + xv[j] * s * (1.0 - s)
                        }
                        Unary::Relu => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => yv[j],
                        Unary::Log => 1.0 / xv[j],
                    };
                    d[j] += g[j] * local;
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                with_slot!(*x, |d| for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                with_slot!(*x, |d| for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let gs: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = val(*gamma).len();
                let gm = val(*gamma).data();
                with_slot!(*gamma, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv * xhat[j];
                });
                with_slot!(*beta, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv;
                });
                with_slot!(*x, |d| for (r, rs) in rstd.iter().enumerate() {
                    let base = r * c;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let dh = g[base + j] * gm[j];
                        m1 += dh;
                        m2 += dh * xhat[base + j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let dh = g[base + j] * gm[j];
                        d[base + j] += rs * (dh - m1 - xhat[base + j] * m2);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let c = rstd.len();
                let n = g.len() / c;
                let gm = val(*gamma).data();
                with_slot!(*gamma, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv * xhat[j];
                });
                with_slot!(*beta, |d| for (j, gv) in g.iter().enumerate() {
                    d[j % c] += gv;
                });
                with_slot!(*x, |d| if *train {
                    let mut m1 = vec![0.0; c];
                    let mut m2 = vec![0.0; c];
                    for r in 0..n {
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            m1[j] += dh;
                            m2[j] += dh * xhat[r * c + j];
                        }
                    }
                    for r in 0..n {
                        for j in 0..c {
                            let dh = g[r * c + j] * gm[j];
                            d[r * c + j] += rstd[j]
                                * (dh - m1[j] / n as f64 - xhat[r * c + j] * m2[j] / n as f64);
                        }
                    }
                } else {
                    for r in 0..n {
                        for j in 0..c {
                            d[r * c + j] += g[r * c + j] * gm[j] * rstd[j];
                        }
                    }
                });
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (t, c) = val(*x).dims2().unwrap();
                let k = val(*kernel).shape()[0];
                let half = k / 2;
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - half as isize;
                            if src >= 0 && src < t as isize {
                                f(ti, j, src as usize);
                            }
                        }
                    }
                };
                with_slot!(*x, |d| taps(&mut |ti, j, src| for ch in 0..c {
                    d[src * c + ch] += g[ti * c + ch] * kd[j * c + ch];
                }));
                with_slot!(*kernel, |d| taps(&mut |ti, j, src| for ch in 0..c {
                    d[j * c + ch] += g[ti * c + ch] * xd[src * c + ch];
                }));
            }
            Op::Conv2d { x, weight, bias, stride } => {
                let s = *stride;
                let (&[cin, h, w], &[cout, _, kh, kw]) = (val(*x).shape(), val(*weight).shape()) else {
                    unreachable!()
                };
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let (xd, wd) = (val(*x).data(), val(*weight).data());
                with_slot!(*bias, |d| for o in 0..cout {
                    d[o] += g[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                });
                with_slot!(*weight, |d| for o in 0..cout {
                    let gp = &g[o * ho * wo..(o + 1) * ho * wo];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let mut acc = 0.0;
                                for i in 0..ho {
                                    let xrow = &xd[(ci * h + i * s + u) * w..];
                                    for j in 0..wo {
                                        acc += gp[i * wo + j] * xrow[j * s + v];
                                    }
                                }
                                d[((o * cin + ci) * kh + u) * kw + v] += acc;
                            }
                        }
                    }
                });
                with_slot!(*x, |d| for o in 0..cout {
                    let gp = &g[o * ho * wo..(o + 1) * ho * wo];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let wv = wd[((o * cin + ci) * kh + u) * kw + v];
                                for i in 0..ho {
                                    let base = (ci * h + i * s + u) * w;
                                    for j in 0..wo {
                                        d[base + j * s + v] += wv * gp[i * wo + j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                with_slot!(*x, |d| for j in 0..g.len() {
                    d[j] += g[j] * mask[j];
                });
            }
            Op::MaskFill { x, pass: keep } => {
                with_slot!(*x, |d| for j in 0..g.len() {
                    if keep[j] {
                        d[j] += g[j];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).shape()[1];
                let (r, len) = out.dims2().unwrap();
                with_slot!(*x, |d| for i in 0..r {
                    add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    with_slot!(p, |d| for i in 0..r {
                        add_into(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => {
                with_slot!(*x, |d| add_into(d, g));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out.shape(), &inv);
                with_slot!(*x, |d| add_into(d, &back));
            }
            Op::GatherRows { table, ids } => {
                let dim = val(*table).shape()[1];
                with_slot!(*table, |d| for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                });
            }
            Op::RelGather(x) => {
                let t = out.shape()[0];
                let w = 2 * t - 1;
                with_slot!(*x, |d| for i in 0..t {
                    for l in 0..t {
                        d[i * w + i + t - 1 - l] += g[i * t + l];
                    }
                });
            }
            Op::Fused { inputs, local } => {
                for (&v, l) in inputs.iter().zip(local) {
                    with_slot!(v, |d| for (dv, lv) in d.iter_mut().zip(l) {
                        *dv += g[0] * lv;
                    });
                }
            }
        }
    }
}

/// Gradient buffer for a parent, or None when the parent is not differentiable.
fn grad_slot<'p>(nodes: &[Node], pass: &'p mut [Option<Vec<f64>>], v: Var) -> Option<&'p mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(pass[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0; rank];
    for _ in 0..x.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

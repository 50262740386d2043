//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op method evaluates its forward pass immediately and appends a node
//! to the tape. Nodes are stored in creation order, which is a topological
//! order by construction. [`Graph::backward`] walks the tape in reverse and
//! leaves gradients on every leaf that requires them.
//!
//! Image tensors use the NHWC layout: `[batch, height, width, channels]`.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    SliceLast {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Sigmoid(Var),
    Swish(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Batch statistics produced by a training-mode batch-norm op.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left on `v` by the last [`Graph::backward`] call. Only leaves
    /// that require a gradient carry one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    /// `a · b` for `a: [m, k]` and `b: [k, n]`, or `b: [n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// 2-D convolution with zero padding. `input: [n, h, w, cin]`,
    /// `weight: [kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[3] != sw[2] || stride == 0 {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let (n, h, w, cin) = (si[0], si[1], si[2], si[3]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho,
            wo,
        };
        let rows = n * ho * wo;
        let ksize = kh * kw * cin;
        let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let cols_owned;
        let cols: &[f64] = if direct {
            self.value(input).data()
        } else {
            cols_owned = im2col(self.value(input).data(), &geom);
            &cols_owned
        };
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            ksize,
            cout,
            cols,
            false,
            self.value(weight).data(),
            false,
            0.0,
            &mut out,
        );
        let keep_cols = self.rg(weight) && !direct;
        let saved = if keep_cols { Some(cols.to_vec()) } else { None };
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            Tensor::new(vec![n, ho, wo, cout], out)?,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    /// 2x2 max-pool with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("max_pool2", &s, &[2, 2]));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * i) * w + 2 * j) * c + ch;
                        let mut best = x[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(vec![n, ho, wo, c], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    /// Spatial mean per channel: `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", &s, &[4]));
        }
        let (n, r, c) = (s[0], s[1] * s[2], s[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for k in 0..r {
                let fiber = &x[(b * r + k) * c..(b * r + k + 1) * c];
                for (acc, v) in o.iter_mut().zip(fiber) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= r as f64;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(input), rg))
    }

    /// Spatial max per channel: `[n, h, w, c] -> [n, c]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_max_pool", &s, &[4]));
        }
        let (n, r, c) = (s[0], s[1] * s[2], s[3]);
        let x = self.value(input).data();
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for b in 0..n {
            for k in 0..r {
                for ch in 0..c {
                    let idx = (b * r + k) * c + ch;
                    if x[idx] > out[b * c + ch] {
                        out[b * c + ch] = x[idx];
                        argmax[b * c + ch] = idx;
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalMaxPool { input, argmax }, rg))
    }

    /// Depth-wise (last axis) concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let rows = ta.len() / ca.max(1);
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..rows {
            out.extend_from_slice(&ta[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b), rg))
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_last(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("slice_last", &s, &[start, end]))?;
        if start >= end || end > c {
            return Err(Error::shape("slice_last", &s, &[start, end]));
        }
        let x = self.value(input).data();
        let rows = x.len() / c;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&x[r * c + start..r * c + end]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { input, start }, rg))
    }

    /// Select entries of the leading axis (rows may repeat).
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", &s, &[]));
        }
        let stride: usize = s[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::Index(format!("gather_rows: row {r} of {}", s[0])));
            }
            out.extend_from_slice(&x[r * stride..(r + 1) * stride]);
        }
        let mut shape = s.clone();
        shape[0] = rows.len();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Swish-1: `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map_unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Argument("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Argument("softmax of empty input".into()));
        }
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(cols) {
            out.extend(softmax(row)?);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Summed cross-entropy `Σ_r -log p[r, y_r]` over rows of a probability
    /// matrix. Labels are zero-based.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let cols = *t.shape().last().unwrap_or(&0);
        let rows = t.len().checked_div(cols).unwrap_or(0);
        if rows != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(cols.max(1)).zip(labels) {
            if y >= cols {
                return Err(Error::Index(format!("label {y} out of range for {cols} classes")));
            }
            loss += -row[y].max(CE_CLAMP).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// L2-normalize every row (last axis). A zero row is a domain error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap_or(&0);
        if cols == 0 {
            return Err(Error::Argument("normalize of empty rows".into()));
        }
        let mut out = Vec::with_capacity(t.len());
        let mut norms = Vec::with_capacity(t.len() / cols);
        for (k, row) in t.data().chunks(cols).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Domain(format!("zero-norm vector at row {k}")));
            }
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { input: x, norms }, rg))
    }

    /// Batch normalization with batch statistics over every axis but the
    /// last. The leading (batch) axis must have at least two entries.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(input).to_vec();
        let c = self.check_bn_shapes(&s, gamma, beta)?;
        if s[0] < 2 {
            return Err(Error::Argument(format!(
                "batch norm in train mode needs batch size >= 2, got {}",
                s[0]
            )));
        }
        let x = self.value(input).data();
        let m = x.len() / c;
        let mut mean = vec![0.0; c];
        for fiber in x.chunks(c) {
            for (acc, v) in mean.iter_mut().zip(fiber) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for fiber in x.chunks(c) {
            for ((acc, v), mu) in var.iter_mut().zip(fiber).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for fiber in x.chunks(c) {
            for ch in 0..c {
                let xh = (fiber[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(s, out)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let c = self.check_bn_shapes(&s, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &s, &[mean.len(), var.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        for fiber in x.chunks(c) {
            for ch in 0..c {
                out.push(g[ch] * ((fiber[ch] - mean[ch]) * inv_std[ch]) + bt[ch]);
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_bn_shapes(&self, s: &[usize], gamma: Var, beta: Var) -> Result<usize> {
        let c = *s.last().ok_or_else(|| Error::shape("batch_norm", s, &[]))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", s, self.shape(gamma)));
        }
        Ok(c)
    }

    /// Reverse pass from a single-element `loss`. Afterwards every leaf with
    /// `requires_grad` holds its gradient (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, gy)?);
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xb) {
                        *g += d * v;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xa) {
                        *g += d * v;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |g| axpy(g, gy, *c)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| axpy(g, gy, c));
                self.acc(grads, *s, |g| {
                    g[0] += gy.iter().zip(xv).map(|(d, v)| d * v).sum::<f64>();
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dY · B^T
                self.acc(grads, *a, |g| gemm(m, n, k, gy, false, bv, !*trans_b, 1.0, g));
                if *trans_b {
                    // B stored n x k: dB = dY^T · A
                    self.acc(grads, *b, |g| gemm(n, m, k, gy, true, av, false, 1.0, g));
                } else {
                    // dB = A^T · dY
                    self.acc(grads, *b, |g| gemm(k, m, n, av, true, gy, false, 1.0, g));
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let rows = geom.n * geom.ho * geom.wo;
                let ksize = geom.kh * geom.kw * geom.cin;
                let direct = cols.is_none() && geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                if self.rg(*weight) {
                    let colv: &[f64] = match cols {
                        Some(c) => c,
                        None if direct => self.value(*input).data(),
                        None => unreachable!("columns kept whenever the weight needs a gradient"),
                    };
                    self.acc(grads, *weight, |g| {
                        gemm(ksize, rows, geom.cout, colv, true, gy, false, 1.0, g)
                    });
                }
                if self.rg(*input) {
                    let wv = self.value(*weight).data();
                    let mut dcols = vec![0.0; rows * ksize];
                    gemm(rows, geom.cout, ksize, gy, false, wv, true, 0.0, &mut dcols);
                    self.acc(grads, *input, |g| {
                        if direct {
                            axpy(g, &dcols, 1.0)
                        } else {
                            col2im_add(&dcols, geom, g)
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                self.acc(grads, *input, |g| {
                    for (d, &idx) in gy.iter().zip(argmax) {
                        g[idx] += d;
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let s = self.shape(*input);
                let (n, r, c) = (s[0], s[1] * s[2], s[3]);
                self.acc(grads, *input, |g| {
                    for b in 0..n {
                        for k in 0..r {
                            for ch in 0..c {
                                g[(b * r + k) * c + ch] += gy[b * c + ch] / r as f64;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = gy.len() / (ca + cb);
                self.acc(grads, *a, |g| {
                    for r in 0..rows {
                        axpy(
                            &mut g[r * ca..(r + 1) * ca],
                            &gy[r * (ca + cb)..r * (ca + cb) + ca],
                            1.0,
                        );
                    }
                });
                self.acc(grads, *b, |g| {
                    for r in 0..rows {
                        axpy(
                            &mut g[r * cb..(r + 1) * cb],
                            &gy[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            1.0,
                        );
                    }
                });
            }
            Op::SliceLast { input, start } => {
                let c = *self.shape(*input).last().unwrap();
                let w = *node.value.shape().last().unwrap();
                self.acc(grads, *input, |g| {
                    for (r, d) in gy.chunks(w).enumerate() {
                        axpy(&mut g[r * c + start..r * c + start + w], d, 1.0);
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let s = self.shape(*input);
                let stride: usize = s[1..].iter().product();
                self.acc(grads, *input, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(
                            &mut g[r * stride..(r + 1) * stride],
                            &gy[k * stride..(k + 1) * stride],
                            1.0,
                        );
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |g| axpy(g, gy, 1.0)),
            Op::Sigmoid(x) => self.acc(grads, *x, |g| {
                for ((g, d), s) in g.iter_mut().zip(gy).zip(y) {
                    *g += d * s * (1.0 - s);
                }
            }),
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        let s = sigmoid(v);
                        *g += d * (s + v * s * (1.0 - s));
                    }
                });
            }
            Op::Exp(x) => self.acc(grads, *x, |g| {
                for ((g, d), e) in g.iter_mut().zip(gy).zip(y) {
                    *g += d * e;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d / v;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |g| {
                    for ((g, d), p) in g.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = d.iter().zip(p).map(|(a, b)| a * b).sum();
                        for ((g, d), p) in g.iter_mut().zip(d).zip(p) {
                            *g += p * (d - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs).data();
                let cols = *self.shape(*probs).last().unwrap();
                self.acc(grads, *probs, |g| {
                    for (r, &lab) in labels.iter().enumerate() {
                        let p = pv[r * cols + lab];
                        if p > CE_CLAMP {
                            g[r * cols + lab] -= gy[0] / p;
                        }
                    }
                });
            }
            Op::NormalizeRows { input, norms } => {
                let cols = *node.value.shape().last().unwrap();
                self.acc(grads, *input, |g| {
                    for (((g, d), yv), norm) in g.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols)).zip(norms) {
                        let dot: f64 = d.iter().zip(yv).map(|(a, b)| a * b).sum();
                        for ((g, d), yv) in g.iter_mut().zip(d).zip(yv) {
                            *g += (d - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (gy.len() / c) as f64;
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                for (d, xh) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_d[ch] += d[ch];
                        sum_dx[ch] += d[ch] * xh[ch];
                    }
                }
                self.acc(grads, *gamma, |g| axpy(g, &sum_dx, 1.0));
                self.acc(grads, *beta, |g| axpy(g, &sum_d, 1.0));
                let gm = self.value(*gamma).data();
                self.acc(grads, *input, |g| {
                    for ((g, d), xh) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            g[ch] += gm[ch] * inv_std[ch] / m * (m * d[ch] - sum_d[ch] - xh[ch] * sum_dx[ch]);
                        }
                    }
                });
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xv = self.value(*input).data();
                let gm = self.value(*gamma).data();
                self.acc(grads, *gamma, |g| {
                    for (d, x) in gy.chunks(c).zip(xv.chunks(c)) {
                        for ch in 0..c {
                            g[ch] += d[ch] * (x[ch] - mean[ch]) * inv_std[ch];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for d in gy.chunks(c) {
                        axpy(g, d, 1.0);
                    }
                });
                self.acc(grads, *input, |g| {
                    for (g, d) in g.chunks_mut(c).zip(gy.chunks(c)) {
                        for ch in 0..c {
                            g[ch] += d[ch] * gm[ch] * inv_std[ch];
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
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

/// Softmax of one vector, computed after subtracting its maximum.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Argument("softmax of empty input".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-log a[y]` with `a[y]` clamped at [`CE_CLAMP`]. `y` is zero-based.
pub fn cross_entropy(a: &[f64], y: usize) -> Result<f64> {
    let p = a
        .get(y)
        .ok_or_else(|| Error::Index(format!("label {y} out of range for {} classes", a.len())))?;
    Ok(-p.max(CE_CLAMP).ln())
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ksize = g.kh * g.kw * g.cin;
    let mut cols = vec![0.0; g.n * g.ho * g.wo * ksize];
    let mut row = 0;
    for b in 0..g.n {
        for i in 0..g.ho {
            for j in 0..g.wo {
                let dst = &mut cols[row * ksize..(row + 1) * ksize];
                for ky in 0..g.kh {
                    let yy = (i * g.stride + ky) as isize - g.pad as isize;
                    if yy < 0 || yy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let xx = (j * g.stride + kx) as isize - g.pad as isize;
                        if xx < 0 || xx >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + yy as usize) * g.w + xx as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ksize = g.kh * g.kw * g.cin;
    let mut row = 0;
    for b in 0..g.n {
        for i in 0..g.ho {
            for j in 0..g.wo {
                let src = &dcols[row * ksize..(row + 1) * ksize];
                for ky in 0..g.kh {
                    let yy = (i * g.stride + ky) as isize - g.pad as isize;
                    if yy < 0 || yy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let xx = (j * g.stride + kx) as isize - g.pad as isize;
                        if xx < 0 || xx >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + yy as usize) * g.w + xx as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        axpy(&mut dx[dst..dst + g.cin], &src[off..off + g.cin], 1.0);
                    }
                }
                row += 1;
            }
        }
    }
}

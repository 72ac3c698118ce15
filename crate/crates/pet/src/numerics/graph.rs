//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every executed operation in order. [`Graph::backward`]
//! walks the tape in exact reverse execution order and populates gradients of
//! every reachable node that requires them. A graph lives on one thread for
//! its forward+backward lifetime; parallelism comes from independent
//! per-sample graphs.

use super::kernels::{mm, mm_nt, mm_tn};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// a[m,k] * b[n,k]^T; saves a transpose when keys are row-major.
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { x: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, kernel: Var, stride: usize, pad: usize },
    BiasAdd { x: Var, bias: Var },
    AvgPool2d { x: Var, k: usize, stride: usize },
    BilinearSample { x: Var, points: Vec<(f64, f64)>, scale: f64 },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    ReduceMax { x: Var, arg: usize },
    ReduceMin { x: Var, arg: usize },
    Huber { pred: Var, target: Var },
    Clamp01 { x: Var },
    /// Fused scaled-dot-product attention over pre-projected q/k/v, all
    /// heads at once; saves the softmax weights for backward and inspection.
    MultiHeadAttn { q: Var, k: Var, v: Var, heads: usize, probs: Tensor },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient of `v` after [`Graph::backward`]; `None` if it was not reached
    /// or does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?} node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor, Op::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    /// Bind a parameter from `store` as a differentiable leaf. The gradient
    /// can be pulled back with [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.value(id).clone().with_requires_grad();
        let v = self.leaf(t)?;
        self.bindings.push((v, id));
        Ok(v)
    }

    /// Add `weight` times each bound parameter's gradient into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, weight: f64) {
        for &(var, id) in &self.bindings {
            if let Some(g) = self.nodes[var.0].tensor.grad() {
                store.add_scaled_grad(id, g, weight);
            }
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(requires);
        self.push(t, op)
    }

    // ---- binary ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 {
            return Err(Error::Dim("matmul expects 2-D operands".into()));
        }
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (k2, n) = (tb.dim(0), tb.dim(1));
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents disagree: {}x{} vs {}x{}",
                m, k, k2, n
            )));
        }
        let mut data = vec![0.0; m * n];
        mm(ta.data(), tb.data(), m, k, n, &mut data);
        let req = self.requires(a) || self.requires(b);
        self.out(vec![m, n], data, req, Op::MatMul { a, b })
    }

    /// `a[m,k] * b[n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 {
            return Err(Error::Dim("matmul_nt expects 2-D operands".into()));
        }
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (n, k2) = (tb.dim(0), tb.dim(1));
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul_nt inner extents disagree: {}x{} vs {}x{}^T",
                m, k, n, k2
            )));
        }
        let mut data = vec![0.0; m * n];
        mm_nt(ta.data(), tb.data(), m, k, n, &mut data);
        let req = self.requires(a) || self.requires(b);
        self.out(vec![m, n], data, req, Op::MatMulNt { a, b })
    }

    fn check_broadcast(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.is_scalar() || tb.is_scalar() {
            Ok(())
        } else {
            Err(Error::Dim(format!(
                "{name}: shapes {:?} and {:?} are neither equal nor scalar-with-tensor",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = broadcast_zip(ta, tb, |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        self.out(shape, data, req, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "sub")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = broadcast_zip(ta, tb, |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        self.out(shape, data, req, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = broadcast_zip(ta, tb, |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        self.out(shape, data, req, Op::Mul { a, b })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Scale { x, c })
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.exp()).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let data = t.data().iter().map(|v| v.ln()).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Log { x })
    }

    pub fn clamp01(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Clamp01 { x })
    }

    /// Elementwise smooth-l1 (Huber at delta = 1) of `pred - target`.
    pub fn huber(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::Dim(format!(
                "huber shapes disagree: {:?} vs {:?}",
                tp.shape(),
                tt.shape()
            )));
        }
        let data = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| {
                let d = p - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .collect();
        let (shape, req) = (tp.shape().to_vec(), self.requires(pred) || self.requires(target));
        self.out(shape, data, req, Op::Huber { pred, target })
    }

    // ---- normalization / reductions ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::Dim(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = softmax_lanes(t, axis, false);
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::Dim(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = softmax_lanes(t, axis, true);
        let (shape, req) = (t.shape().to_vec(), self.requires(x));
        self.out(shape, data, req, Op::LogSoftmax { x, axis })
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// per-channel affine (gain, bias). `eps` sits inside the square root.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().ok_or_else(|| Error::Dim("layernorm on 0-d tensor".into()))?;
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Dim(format!(
                "layernorm gain/bias must have {d} elements, got {}/{}",
                tg.numel(),
                tb.numel()
            )));
        }
        let rows = tx.numel() / d;
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                data[r * d + c] = (row[c] - mean) * inv * tg.data()[c] + tb.data()[c];
            }
        }
        let (shape, req) = (
            tx.shape().to_vec(),
            self.requires(x) || self.requires(gain) || self.requires(bias),
        );
        self.out(shape, data, req, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.out(vec![1], vec![s], req, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let req = self.requires(x);
        self.out(vec![1], vec![s], req, Op::Mean { x })
    }

    /// Max over all elements; gradient flows to the first argmax.
    pub fn reduce_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("reduce_max of empty tensor".into()));
        }
        let (arg, val) = t
            .data()
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        let req = self.requires(x);
        self.out(vec![1], vec![val], req, Op::ReduceMax { x, arg })
    }

    /// Min over all elements; gradient flows to the first argmin.
    pub fn reduce_min(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("reduce_min of empty tensor".into()));
        }
        let (arg, val) = t
            .data()
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |acc, (i, &v)| {
                if v < acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        let req = self.requires(x);
        self.out(vec![1], vec![val], req, Op::ReduceMin { x, arg })
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape(),
                shape
            )));
        }
        let (data, req) = (t.data().to_vec(), self.requires(x));
        self.out(shape.to_vec(), data, req, Op::Reshape { x })
    }

    /// Gather rows of a 2-D tensor; `None` entries produce zero rows.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::Dim("gather_rows expects a 2-D tensor".into()));
        }
        let (n, c) = (t.dim(0), t.dim(1));
        let mut data = vec![0.0; index.len() * c];
        for (i, idx) in index.iter().enumerate() {
            if let Some(src) = idx {
                if *src >= n {
                    return Err(Error::Dim(format!("gather_rows index {src} out of {n} rows")));
                }
                data[i * c..(i + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
        }
        let req = self.requires(x);
        self.out(
            vec![index.len(), c],
            data,
            req,
            Op::GatherRows { x, index: index.to_vec() },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::Dim("slice_cols expects a 2-D tensor".into()));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        if start + len > c {
            return Err(Error::Dim(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let req = self.requires(x);
        self.out(vec![r, len], data, req, Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).dim(1);
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.dim(1) != c {
                return Err(Error::Dim("concat_rows: column counts disagree".into()));
            }
            rows += t.dim(0);
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.out(vec![rows, c], data, req, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let r = self.value(parts[0]).dim(0);
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.dim(0) != r {
                return Err(Error::Dim("concat_cols: row counts disagree".into()));
            }
            cols += t.dim(1);
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.dim(1);
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc]
                    .copy_from_slice(&t.data()[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.out(vec![r, cols], data, req, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Add a per-channel bias over the last axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().ok_or_else(|| Error::Dim("bias_add on 0-d tensor".into()))?;
        if tb.numel() != d {
            return Err(Error::Dim(format!(
                "bias_add: bias has {} elements, last axis is {d}",
                tb.numel()
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % d];
        }
        let (shape, req) = (tx.shape().to_vec(), self.requires(x) || self.requires(bias));
        self.out(shape, data, req, Op::BiasAdd { x, bias })
    }

    // ---- spatial ----

    /// Cross-correlation of `x: [H,W,Cin]` with `kernel: [kh,kw,Cin,Cout]`,
    /// zero padding `pad`, stride `stride`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.ndim() != 3 || tk.ndim() != 4 {
            return Err(Error::Dim("conv2d expects x:[H,W,C], kernel:[kh,kw,Cin,Cout]".into()));
        }
        let (h, w, cin) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let (kh, kw, kcin, cout) = (tk.dim(0), tk.dim(1), tk.dim(2), tk.dim(3));
        if cin != kcin {
            return Err(Error::Dim(format!(
                "conv2d channel counts disagree: input {cin}, kernel {kcin}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let col = im2col(tx.data(), h, w, cin, kh, kw, stride, pad, ho, wo);
        let mut data = vec![0.0; ho * wo * cout];
        mm(&col, tk.data(), ho * wo, kh * kw * cin, cout, &mut data);
        let req = self.requires(x) || self.requires(kernel);
        self.out(vec![ho, wo, cout], data, req, Op::Conv2d { x, kernel, stride, pad })
    }

    /// Mean pooling of `x: [H,W,C]` over k*k patches.
    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k < 1 || stride < 1 {
            return Err(Error::Contract("avgpool2d k and stride must be >= 1".into()));
        }
        let t = self.value(x);
        if t.ndim() != 3 {
            return Err(Error::Dim("avgpool2d expects x:[H,W,C]".into()));
        }
        let (h, w, c) = (t.dim(0), t.dim(1), t.dim(2));
        if h < k || w < k {
            return Err(Error::Dim(format!(
                "avgpool2d kernel {k} larger than input {h}x{w}"
            )));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let mut data = vec![0.0; ho * wo * c];
        let norm = 1.0 / (k * k) as f64;
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = ((oy * stride + ky) * w + ox * stride + kx) * c;
                        let dst = (oy * wo + ox) * c;
                        for ch in 0..c {
                            data[dst + ch] += t.data()[src + ch] * norm;
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        self.out(vec![ho, wo, c], data, req, Op::AvgPool2d { x, k, stride })
    }

    /// Bilinear interpolation of a feature grid `x: [h,w,c]` at image-space
    /// points, where one feature cell spans `scale` image pixels.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)], scale: f64) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 {
            return Err(Error::Dim("bilinear_sample expects x:[h,w,c]".into()));
        }
        let (h, w, c) = (t.dim(0), t.dim(1), t.dim(2));
        let (img_w, img_h) = (w as f64 * scale, h as f64 * scale);
        for &(px, py) in points {
            if !(0.0..=img_w).contains(&px) || !(0.0..=img_h).contains(&py) {
                return Err(Error::Domain(format!(
                    "sample point ({px}, {py}) outside image bounds {img_w}x{img_h}"
                )));
            }
        }
        let mut data = vec![0.0; points.len() * c];
        for (i, &(px, py)) in points.iter().enumerate() {
            let (x0, x1, wx) = grid_mix(px, scale, w);
            let (y0, y1, wy) = grid_mix(py, scale, h);
            for ch in 0..c {
                let v00 = t.data()[(y0 * w + x0) * c + ch];
                let v01 = t.data()[(y0 * w + x1) * c + ch];
                let v10 = t.data()[(y1 * w + x0) * c + ch];
                let v11 = t.data()[(y1 * w + x1) * c + ch];
                data[i * c + ch] =
                    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
        let req = self.requires(x);
        self.out(
            vec![points.len(), c],
            data,
            req,
            Op::BilinearSample { x, points: points.to_vec(), scale },
        )
    }

    /// Scaled dot-product attention of projected `q: [nq,c]` against
    /// `k, v: [nk,c]`, split into `heads` independent heads. Returns `[nq,c]`
    /// (heads re-concatenated in channel order).
    pub fn multi_head_attn(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.ndim() != 2 || tk.ndim() != 2 || tv.ndim() != 2 {
            return Err(Error::Dim("attention expects 2-D q/k/v".into()));
        }
        let (nq, c) = (tq.dim(0), tq.dim(1));
        let nk = tk.dim(0);
        if tk.dim(1) != c || tv.dim(1) != c || tv.dim(0) != nk {
            return Err(Error::Dim(format!(
                "attention shapes disagree: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Contract(format!(
                "channels {c} not divisible by heads {heads}"
            )));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * c];
        for h in 0..heads {
            let hoff = h * d;
            for i in 0..nq {
                let qrow = &tq.data()[i * c + hoff..i * c + hoff + d];
                let prow = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &tk.data()[j * c + hoff..j * c + hoff + d];
                    let mut s = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        s += a * b;
                    }
                    *p = s * scale;
                    if *p > max {
                        max = *p;
                    }
                }
                let mut denom = 0.0;
                for p in prow.iter_mut() {
                    *p = (*p - max).exp();
                    denom += *p;
                }
                let orow = &mut out[i * c + hoff..i * c + hoff + d];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p /= denom;
                    if *p != 0.0 {
                        let vrow = &tv.data()[j * c + hoff..j * c + hoff + d];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += *p * vv;
                        }
                    }
                }
            }
        }
        let probs = Tensor::new(vec![heads, nq, nk], probs)?;
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        self.out(vec![nq, c], out, req, Op::MultiHeadAttn { q, k, v, heads, probs })
    }

    /// Saved softmax weights (`[heads, nq, nk]`) of a fused attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::MultiHeadAttn { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Running it twice on one graph is a
    /// contract error; build a fresh graph per forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; run a new forward pass".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].tensor.requires_grad() {
                self.nodes[i].tensor.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let add_to = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tensor.requires_grad() {
                return;
            }
            let numel = self.nodes[v.0].tensor.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
            f(slot);
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k) = (ta.dim(0), ta.dim(1));
                let n = tb.dim(1);
                add_to(grads, *a, &mut |da| mm_nt(g, tb.data(), m, n, k, da));
                add_to(grads, *b, &mut |db| mm_tn(ta.data(), g, k, m, n, db));
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k) = (ta.dim(0), ta.dim(1));
                let n = tb.dim(0);
                add_to(grads, *a, &mut |da| mm(g, tb.data(), m, n, k, da));
                add_to(grads, *b, &mut |db| mm_tn(g, ta.data(), n, m, k, db));
            }
            Op::Add { a, b } => {
                let (na, nb) = (self.nodes[a.0].tensor.numel(), self.nodes[b.0].tensor.numel());
                add_to(grads, *a, &mut |da| reduce_or_add(da, g, na));
                add_to(grads, *b, &mut |db| reduce_or_add(db, g, nb));
            }
            Op::Sub { a, b } => {
                let (na, nb) = (self.nodes[a.0].tensor.numel(), self.nodes[b.0].tensor.numel());
                add_to(grads, *a, &mut |da| reduce_or_add(da, g, na));
                add_to(grads, *b, &mut |db| {
                    if nb == g.len() {
                        for (d, gv) in db.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    } else {
                        db[0] -= g.iter().sum::<f64>();
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                add_to(grads, *a, &mut |da| mul_backward(da, g, tb.data()));
                add_to(grads, *b, &mut |db| mul_backward(db, g, ta.data()));
            }
            Op::AddScalar { x } => add_to(grads, *x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::Scale { x, c } => add_to(grads, *x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::Relu { x } => {
                let tx = &self.nodes[x.0].tensor;
                add_to(grads, *x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].tensor;
                add_to(grads, *x, &mut |dx| {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp { x } => {
                let y = &self.nodes[i].tensor;
                add_to(grads, *x, &mut |dx| {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y.data()) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Log { x } => {
                let tx = &self.nodes[x.0].tensor;
                add_to(grads, *x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Clamp01 { x } => {
                let tx = &self.nodes[x.0].tensor;
                add_to(grads, *x, &mut |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(tx.data()) {
                        if (0.0..=1.0).contains(xv) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Huber { pred, target } => {
                let (tp, tt) = (&self.nodes[pred.0].tensor, &self.nodes[target.0].tensor);
                let slope = |p: f64, t: f64| {
                    let d = p - t;
                    if d.abs() < 1.0 {
                        d
                    } else {
                        d.signum()
                    }
                };
                add_to(grads, *pred, &mut |dp| {
                    for (((d, gv), &p), &t) in dp.iter_mut().zip(g).zip(tp.data()).zip(tt.data()) {
                        *d += gv * slope(p, t);
                    }
                });
                add_to(grads, *target, &mut |dt| {
                    for (((d, gv), &p), &t) in dt.iter_mut().zip(g).zip(tp.data()).zip(tt.data()) {
                        *d -= gv * slope(p, t);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].tensor;
                let (outer, len, inner) = lane_dims(y.shape(), *axis);
                add_to(grads, *x, &mut |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + ii;
                            let dot: f64 =
                                (0..len).map(|a| g[at(a)] * y.data()[at(a)]).sum();
                            for a in 0..len {
                                let idx = at(a);
                                dx[idx] += y.data()[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[i].tensor;
                let (outer, len, inner) = lane_dims(y.shape(), *axis);
                add_to(grads, *x, &mut |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + ii;
                            let gsum: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                let idx = at(a);
                                dx[idx] += g[idx] - y.data()[idx].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, tg) = (&self.nodes[x.0].tensor, &self.nodes[gain.0].tensor);
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                add_to(grads, *x, &mut |dx| {
                    for r in 0..rows {
                        let row = &tx.data()[r * d..(r + 1) * d];
                        let go = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut m1 = 0.0; // mean(dy*gain)
                        let mut m2 = 0.0; // mean(dy*gain*xhat)
                        for c in 0..d {
                            let dxh = go[c] * tg.data()[c];
                            let xh = (row[c] - mean) * inv;
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let dxh = go[c] * tg.data()[c];
                            let xh = (row[c] - mean) * inv;
                            dx[r * d + c] += inv * (dxh - m1 - xh * m2);
                        }
                    }
                });
                add_to(grads, *gain, &mut |dg| {
                    for r in 0..rows {
                        let row = &tx.data()[r * d..(r + 1) * d];
                        let go = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..d {
                            dg[c] += go[c] * (row[c] - mean) * inv;
                        }
                    }
                });
                add_to(grads, *bias, &mut |db| {
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::BiasAdd { x, bias } => {
                let d = self.nodes[bias.0].tensor.numel();
                add_to(grads, *x, &mut |dx| {
                    for (dv, gv) in dx.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
                add_to(grads, *bias, &mut |db| {
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                });
            }
            Op::Conv2d { x, kernel, stride, pad } => {
                let (tx, tk) = (&self.nodes[x.0].tensor, &self.nodes[kernel.0].tensor);
                let (h, w, cin) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let (kh, kw, _, cout) = (tk.dim(0), tk.dim(1), tk.dim(2), tk.dim(3));
                let y = &self.nodes[i].tensor;
                let (ho, wo) = (y.dim(0), y.dim(1));
                let patch = kh * kw * cin;
                add_to(grads, *kernel, &mut |dk| {
                    let col = im2col(tx.data(), h, w, cin, kh, kw, *stride, *pad, ho, wo);
                    mm_tn(&col, g, patch, ho * wo, cout, dk);
                });
                add_to(grads, *x, &mut |dx| {
                    let mut dcol = vec![0.0; ho * wo * patch];
                    mm_nt(g, tk.data(), ho * wo, cout, patch, &mut dcol);
                    col2im(&dcol, h, w, cin, kh, kw, *stride, *pad, ho, wo, dx);
                });
            }
            Op::AvgPool2d { x, k, stride } => {
                let tx = &self.nodes[x.0].tensor;
                let (_h, w, c) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let y = &self.nodes[i].tensor;
                let (ho, wo) = (y.dim(0), y.dim(1));
                let norm = 1.0 / (k * k) as f64;
                add_to(grads, *x, &mut |dx| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let src = ((oy * stride + ky) * w + ox * stride + kx) * c;
                                    let dst = (oy * wo + ox) * c;
                                    for ch in 0..c {
                                        dx[src + ch] += g[dst + ch] * norm;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { x, points, scale } => {
                let tx = &self.nodes[x.0].tensor;
                let (h, w, c) = (tx.dim(0), tx.dim(1), tx.dim(2));
                add_to(grads, *x, &mut |dx| {
                    for (pi, &(px, py)) in points.iter().enumerate() {
                        let (x0, x1, wx) = grid_mix(px, *scale, w);
                        let (y0, y1, wy) = grid_mix(py, *scale, h);
                        for ch in 0..c {
                            let gv = g[pi * c + ch];
                            dx[(y0 * w + x0) * c + ch] += gv * (1.0 - wy) * (1.0 - wx);
                            dx[(y0 * w + x1) * c + ch] += gv * (1.0 - wy) * wx;
                            dx[(y1 * w + x0) * c + ch] += gv * wy * (1.0 - wx);
                            dx[(y1 * w + x1) * c + ch] += gv * wy * wx;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = self.nodes[x.0].tensor.dim(1);
                add_to(grads, *x, &mut |dx| {
                    for (row, idx) in index.iter().enumerate() {
                        if let Some(src) = idx {
                            for ch in 0..c {
                                dx[src * c + ch] += g[row * c + ch];
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[x.0].tensor.dim(1);
                let r = self.nodes[x.0].tensor.dim(0);
                add_to(grads, *x, &mut |dx| {
                    for row in 0..r {
                        for j in 0..*len {
                            dx[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let numel = self.nodes[p.0].tensor.numel();
                    add_to(grads, p, &mut |dp| {
                        for (d, gv) in dp.iter_mut().zip(&g[off..off + numel]) {
                            *d += gv;
                        }
                    });
                    off += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[parts[0].0].tensor.dim(0);
                let total: usize = parts.iter().map(|&p| self.nodes[p.0].tensor.dim(1)).sum();
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].tensor.dim(1);
                    add_to(grads, p, &mut |dp| {
                        for row in 0..r {
                            for j in 0..pc {
                                dp[row * pc + j] += g[row * total + off + j];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::Reshape { x } => add_to(grads, *x, &mut |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::Sum { x } => add_to(grads, *x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean { x } => {
                let n = self.nodes[x.0].tensor.numel() as f64;
                add_to(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::ReduceMax { x, arg } | Op::ReduceMin { x, arg } => {
                add_to(grads, *x, &mut |dx| {
                    dx[*arg] += g[0];
                });
            }
            Op::MultiHeadAttn { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (
                    &self.nodes[q.0].tensor,
                    &self.nodes[k.0].tensor,
                    &self.nodes[v.0].tensor,
                );
                let (nq, c) = (tq.dim(0), tq.dim(1));
                let nk = tk.dim(0);
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                // dS for all heads, then dQ/dK/dV head by head
                let mut ds = vec![0.0; heads * nq * nk];
                for h in 0..*heads {
                    let hoff = h * d;
                    for i in 0..nq {
                        let prow = &probs.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let grow = &g[i * c + hoff..i * c + hoff + d];
                        let dsrow = &mut ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        // dP[j] = g_row . v_row_j ; then softmax backward
                        let mut dot = 0.0;
                        for (j, dsj) in dsrow.iter_mut().enumerate() {
                            if prow[j] == 0.0 {
                                continue;
                            }
                            let vrow = &tv.data()[j * c + hoff..j * c + hoff + d];
                            let mut dp = 0.0;
                            for (gg, vv) in grow.iter().zip(vrow) {
                                dp += gg * vv;
                            }
                            *dsj = dp;
                            dot += dp * prow[j];
                        }
                        for (j, dsj) in dsrow.iter_mut().enumerate() {
                            *dsj = prow[j] * (*dsj - dot) * scale;
                        }
                    }
                }
                add_to(grads, *q, &mut |dq| {
                    for h in 0..*heads {
                        let hoff = h * d;
                        for i in 0..nq {
                            let dsrow = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let drow = &mut dq[i * c + hoff..i * c + hoff + d];
                            for (j, &dsj) in dsrow.iter().enumerate() {
                                if dsj == 0.0 {
                                    continue;
                                }
                                let krow = &tk.data()[j * c + hoff..j * c + hoff + d];
                                for (o, kk) in drow.iter_mut().zip(krow) {
                                    *o += dsj * kk;
                                }
                            }
                        }
                    }
                });
                add_to(grads, *k, &mut |dk| {
                    for h in 0..*heads {
                        let hoff = h * d;
                        for i in 0..nq {
                            let dsrow = &ds[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let qrow = &tq.data()[i * c + hoff..i * c + hoff + d];
                            for (j, &dsj) in dsrow.iter().enumerate() {
                                if dsj == 0.0 {
                                    continue;
                                }
                                let drow = &mut dk[j * c + hoff..j * c + hoff + d];
                                for (o, qq) in drow.iter_mut().zip(qrow) {
                                    *o += dsj * qq;
                                }
                            }
                        }
                    }
                });
                add_to(grads, *v, &mut |dv| {
                    for h in 0..*heads {
                        let hoff = h * d;
                        for i in 0..nq {
                            let prow = &probs.data()[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let grow = &g[i * c + hoff..i * c + hoff + d];
                            for (j, &p) in prow.iter().enumerate() {
                                if p == 0.0 {
                                    continue;
                                }
                                let drow = &mut dv[j * c + hoff..j * c + hoff + d];
                                for (o, gg) in drow.iter_mut().zip(grow) {
                                    *o += p * gg;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::MatMulNt { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddScalar { .. } => "add_scalar",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Conv2d { .. } => "conv2d",
        Op::BiasAdd { .. } => "bias_add",
        Op::AvgPool2d { .. } => "avgpool2d",
        Op::BilinearSample { .. } => "bilinear_sample",
        Op::GatherRows { .. } => "gather_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Reshape { .. } => "reshape",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::ReduceMax { .. } => "reduce_max",
        Op::ReduceMin { .. } => "reduce_min",
        Op::Huber { .. } => "huber",
        Op::Clamp01 { .. } => "clamp01",
        Op::MultiHeadAttn { .. } => "multi_head_attn",
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Apply `f` elementwise with scalar-vs-tensor broadcast (shapes already checked).
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        (a.shape().to_vec(), data)
    } else if b.is_scalar() {
        let s = b.data()[0];
        (a.shape().to_vec(), a.data().iter().map(|&x| f(x, s)).collect())
    } else {
        let s = a.data()[0];
        (b.shape().to_vec(), b.data().iter().map(|&y| f(s, y)).collect())
    }
}

/// Add `g` into `dst`, summing everything into `dst[0]` when `dst` is scalar
/// on the broadcast side.
fn reduce_or_add(dst: &mut [f64], g: &[f64], numel: usize) {
    if numel == g.len() {
        for (d, gv) in dst.iter_mut().zip(g) {
            *d += gv;
        }
    } else {
        dst[0] += g.iter().sum::<f64>();
    }
}

fn mul_backward(dst: &mut [f64], g: &[f64], other: &[f64]) {
    if dst.len() == g.len() {
        if other.len() == g.len() {
            for ((d, gv), ov) in dst.iter_mut().zip(g).zip(other) {
                *d += gv * ov;
            }
        } else {
            let s = other[0];
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += gv * s;
            }
        }
    } else {
        // dst is the scalar side
        dst[0] += g.iter().zip(other).map(|(gv, ov)| gv * ov).sum::<f64>();
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_lanes(t: &Tensor, axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = lane_dims(t.shape(), axis);
    let mut out = vec![0.0; t.numel()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |a: usize| (o * len + a) * inner + ii;
            let max = (0..len).map(|a| t.data()[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|a| (t.data()[at(a)] - max).exp()).sum();
            for a in 0..len {
                let idx = at(a);
                let z = t.data()[idx] - max;
                out[idx] = if log { z - denom.ln() } else { z.exp() / denom };
            }
        }
    }
    out
}

/// Feature-grid interpolation endpoints for an image-space coordinate.
/// Cell centers follow the half-pixel convention: f = (p + 0.5)/scale - 0.5.
fn grid_mix(p: f64, scale: f64, extent: usize) -> (usize, usize, f64) {
    let f = ((p + 0.5) / scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, f - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let patch = kh * kw * cin;
    let mut col = vec![0.0; ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = (oy * wo + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let d = dst + (ky * kw + kx) * cin;
                    col[d..d + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let patch = kh * kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let src = (oy * wo + ox) * patch;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let s = src + (ky * kw + kx) * cin;
                    for ch in 0..cin {
                        out[dst + ch] += col[s + ch];
                    }
                }
            }
        }
    }
}

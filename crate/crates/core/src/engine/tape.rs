//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in exact reverse
//! order of insertion.

use super::kernels::{self, ConvGeom, Layout};
use super::tensor::Tensor;
use crate::error::{dim_err, param_err, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f32 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance estimate.
    pub var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    Train { eps: f32 },
    Eval { mean: &'a [f32], var: &'a [f32], eps: f32 },
}

enum Op {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f32> },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    AddConst { a: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Sum { a: Var },
    Relu { a: Var },
    MaxPool { a: Var, argmax: Vec<u32> },
    GlobalAvgPool { a: Var, hw: usize },
    Reshape { a: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Quantize { a: Var, lo: f32, hi: f32 },
    SoftmaxT { a: Var, t: f32 },
    CrossEntropy { p: Var, q: Tensor },
    SoftmaxCrossEntropy { z: Var, t: f32, q: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one reverse pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// `(parameter index, gradient)` for every parameter leaf reached by the pass.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.grads[v.0].as_deref().map(|g| (p, g)))
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return dim_err(format!("conv2d expects rank-4 input and kernel, got {x:?} and {w:?}"));
    }
    if x[1] != w[1] {
        return dim_err(format!("conv2d channel mismatch: input {x:?}, kernel {w:?}"));
    }
    if stride == 0 {
        return param_err("conv2d stride must be positive");
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return param_err(format!(
            "conv2d output extent not positive: input {h}x{wd}, kernel {kh}x{kw}, pad {pad}"
        ));
    }
    Ok(ConvGeom {
        n: x[0],
        c: x[1],
        h,
        w: wd,
        f: w[0],
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn softmax_rows(z: &[f32], k: usize, t: f32) -> Vec<f32> {
    let mut out = vec![0.0; z.len()];
    for (row, dst) in z.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / t).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Per-channel `(channels, spatial)` extents of an `[N, C, ...]` activation.
fn channel_extents(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that computes values only; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf tagged with the owning parameter index.
    pub fn param(&mut self, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            1.0,
            self.value(a).data(),
            Layout::row_major(m, k),
            self.value(b).data(),
            Layout::row_major(k, n),
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, needs))
    }

    /// `x·wᵀ` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return dim_err(format!("linear of input {sx:?} with weight {sw:?}"));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        kernels::gemm(
            1.0,
            self.value(x).data(),
            Layout::row_major(n, i),
            self.value(w).data(),
            Layout::row_major(o, i).t(),
            0.0,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w }, needs))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv_geom(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let (out, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.n, geom.f, geom.oh, geom.ow];
        let needs = self.needs(x) || self.needs(w);
        let cols = if needs && self.record { cols } else { Vec::new() };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, geom, cols }, needs))
    }

    /// Adds `b: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        let sb = self.value(b).shape();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return dim_err(format!("bias {sb:?} does not match channels of {sx:?}"));
        }
        let (n, c, s) = channel_extents(sx);
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for ni in 0..n {
            for (ci, &bv) in bias.iter().enumerate() {
                for v in &mut out[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                    *v += bv;
                }
            }
        }
        let shape = sx.to_vec();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("add of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, needs))
    }

    /// `a + c` where `c` is held constant: the gradient passes to `a` unchanged.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return dim_err(format!("add_const of {:?} and {:?}", ta.shape(), c.shape()));
        }
        let out: Vec<f32> = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddConst { a }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mul of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v * s);
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, s }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f32 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(t, Op::Relu { a }, needs)
    }

    /// Non-overlapping `k×k` max pooling (stride `k`, floor on ragged edges).
    pub fn max_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 {
            return dim_err(format!("max_pool2d expects rank 4, got {s:?}"));
        }
        if k == 0 || s[2] < k || s[3] < k {
            return param_err(format!("max_pool2d window {k} invalid for {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let x = self.value(a).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = src[best];
                    argmax[o] = (plane * h * w + best) as u32;
                }
            }
        }
        let needs = self.needs(a);
        let op = Op::MaxPool {
            a,
            argmax: if needs && self.record { argmax } else { Vec::new() },
        };
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), op, needs))
    }

    /// Mean over spatial axes: `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 {
            return dim_err(format!("global_avg_pool expects rank 4, got {s:?}"));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out: Vec<f32> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { a, hw }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    /// `[N, ...]` → `[N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        let rest = s[1..].iter().product();
        self.reshape(a, vec![s[0], rest])
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`.
    ///
    /// Training mode normalizes with batch statistics and returns them so the
    /// caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return dim_err(format!("batch_norm expects at least rank 2, got {sx:?}"));
        }
        let (n, c, s) = channel_extents(&sx);
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return dim_err(format!(
                    "batch_norm affine shape {:?} vs {c} channels",
                    self.value(p).shape()
                ));
            }
        }
        let xs = self.value(x).data();
        let count = (n * s) as f64;
        let (mean, var, stats, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        acc += xs[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    let m = acc / count;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += xs[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = m as f32;
                    var[ci] = (sq / count) as f32;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|&v| (v as f64 * count / (count - 1.0)) as f32).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return dim_err("batch_norm running statistics length mismatch");
                }
                (mean.to_vec(), var.to_vec(), None, eps, false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                for ((o, h), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xs[r]) {
                    *h = (v - mean[ci]) * inv_std[ci];
                    *o = g[ci] * *h + b[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let keep = needs && self.record;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            inv_std,
            train,
        };
        Ok((self.push(Tensor::from_parts(sx, out), op, needs), stats))
    }

    /// Clamp-and-snap quantization with a straight-through gradient inside
    /// `[lo, hi]` and zero gradient where the input was clamped.
    pub fn quantize_ste(&mut self, a: Var, spec: &crate::quant::QuantSpec) -> Var {
        let t = spec.quantize(self.value(a));
        let needs = self.needs(a);
        let (lo, hi) = (spec.q_min, spec.q_max);
        self.push(t, Op::Quantize { a, lo, hi }, needs)
    }

    /// Row-wise softmax of `z / t` over the last axis.
    pub fn softmax_t(&mut self, a: Var, t: f32) -> Result<Var> {
        if !(t > 0.0) {
            return param_err(format!("softmax temperature must be positive, got {t}"));
        }
        let z = self.value(a);
        let k = *z.shape().last().unwrap();
        let out = softmax_rows(z.data(), k, t);
        let shape = z.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxT { a, t }, needs))
    }

    /// Batch-mean cross-entropy `−Σ q·ln max(p, 1e-12)` of probabilities `p`
    /// against fixed target probabilities `q`.
    pub fn cross_entropy(&mut self, p: Var, q: &Tensor) -> Result<Var> {
        let tp = self.value(p);
        if tp.shape() != q.shape() {
            return dim_err(format!("cross_entropy of {:?} against {:?}", tp.shape(), q.shape()));
        }
        let rows = tp.dim0();
        let total: f64 = tp
            .data()
            .iter()
            .zip(q.data())
            .map(|(&pi, &qi)| -(qi as f64) * (pi.max(LOG_FLOOR) as f64).ln())
            .sum();
        let needs = self.needs(p);
        let loss = Tensor::scalar((total / rows as f64) as f32);
        Ok(self.push(loss, Op::CrossEntropy { p, q: q.clone() }, needs))
    }

    /// Fused `cross_entropy(softmax_t(z, t), q)` evaluated through log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, z: Var, t: f32, q: &Tensor) -> Result<Var> {
        if !(t > 0.0) {
            return param_err(format!("softmax temperature must be positive, got {t}"));
        }
        let tz = self.value(z);
        if tz.shape() != q.shape() {
            return dim_err(format!(
                "softmax_cross_entropy of {:?} against {:?}",
                tz.shape(),
                q.shape()
            ));
        }
        let k = *tz.shape().last().unwrap();
        let rows = tz.len() / k;
        let mut total = 0.0f64;
        for (row, qr) in tz.data().chunks(k).zip(q.data().chunks(k)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row
                .iter()
                .map(|&v| (((v - max) / t) as f64).exp())
                .sum::<f64>()
                .ln();
            for (&v, &qi) in row.iter().zip(qr) {
                let log_p = ((v - max) / t) as f64 - lse;
                total -= qi as f64 * log_p.max((LOG_FLOOR as f64).ln());
            }
        }
        let needs = self.needs(z);
        let loss = Tensor::scalar((total / rows as f64) as f32);
        Ok(self.push(loss, Op::SoftmaxCrossEntropy { z, t, q: q.clone() }, needs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                params.push((p, Var(idx)));
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        params.reverse();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    let lb = Layout::row_major(k, n).t();
                    kernels::gemm(1.0, g, Layout::row_major(m, n), self.value(*b).data(), lb, 0.0, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    let la = Layout::row_major(m, k).t();
                    kernels::gemm(1.0, self.value(*a).data(), la, g, Layout::row_major(m, n), 0.0, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, i, o) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * i];
                    let lw = Layout::row_major(o, i);
                    kernels::gemm(1.0, g, Layout::row_major(n, o), self.value(*w).data(), lw, 0.0, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * i];
                    let lg = Layout::row_major(n, o).t();
                    kernels::gemm(1.0, g, lg, self.value(*x).data(), Layout::row_major(n, i), 0.0, &mut dw);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    Some(cols),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let (n, c, s) = channel_extents(self.value(*x).shape());
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            *d += g[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().sum::<f32>();
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddConst { a } | Op::Reshape { a } => self.accumulate(grads, *a, g.to_vec()),
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(va).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { a, s } => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Relu { a } => {
                let da = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::MaxPool { a, argmax } => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    da[src as usize] += gv;
                }
                self.accumulate(grads, *a, da);
            }
            Op::GlobalAvgPool { a, hw } => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (plane, &gv) in da.chunks_mut(*hw).zip(g) {
                    plane.fill(gv / *hw as f32);
                }
                self.accumulate(grads, *a, da);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = channel_extents(self.value(*x).shape());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ci] += gv * h;
                            dbeta[ci] += gv;
                        }
                    }
                }
                if self.needs(*x) {
                    let m = (n * s) as f32;
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                            let k = gam[ci] * inv_std[ci];
                            for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d = if *train {
                                    k * (gv - dbeta[ci] / m - h * dgamma[ci] / m)
                                } else {
                                    k * gv
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Quantize { a, lo, hi } => {
                let da = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxT { a, t } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(da.chunks_mut(k)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / t;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { p, q } => {
                let rows = self.value(*p).dim0() as f32;
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(&pv, &qv)| if pv > LOG_FLOOR { -g[0] * qv / (pv * rows) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
            Op::SoftmaxCrossEntropy { z, t, q } => {
                let tz = self.value(*z);
                let k = *tz.shape().last().unwrap();
                let rows = (tz.len() / k) as f32;
                let probs = softmax_rows(tz.data(), k, *t);
                let mut dz = vec![0.0; probs.len()];
                for ((pr, qr), dr) in probs.chunks(k).zip(q.data().chunks(k)).zip(dz.chunks_mut(k)) {
                    let mass: f32 = qr.iter().sum();
                    for ((d, &pv), &qv) in dr.iter_mut().zip(pr).zip(qr) {
                        *d = g[0] * (pv * mass - qv) / (rows * t);
                    }
                }
                self.accumulate(grads, *z, dz);
            }
        }
    }
}

//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Nodes are only ever appended, so the node index is a
//! topological order and [`Tape::backward`] simply walks it in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Per-channel statistics from a training-mode batch norm, for the caller's
/// running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Elementwise(Var, Var, BinaryOp),
    Broadcast(Var, Var, BinaryOp),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom },
    UpsampleNearest2x(Var),
    UpsampleBilinear(Var, usize),
    AvgPool2x2(Var),
    ConcatChannels(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Reshape(Var),
    TokensToMap(Var),
    MapToTokens(Var),
    Patchify(Var, usize),
    SpatialMean(Var),
    SpatialMax(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    SegLoss { pred: Var, target: Tensor, weight: Option<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when the loss does
    /// not depend on it (or it was recorded without `requires_grad`).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Clamp bound applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---------------------------------------------------------------- linear

    /// `a[..×k] · b[k×n]`. Leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(Error::shape("transpose", format!("rank {} not supported", s.len())));
        }
        let t = transpose_last2(self.value(x));
        Ok(self.push(t, Op::TransposeLast2(x), &[x]))
    }

    // ----------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("elementwise", format!("{sa:?} vs {sb:?}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match op {
            BinaryOp::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            BinaryOp::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        };
        let t = Tensor::new(sa, out)?;
        Ok(self.push(t, Op::Elementwise(a, b, op), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    /// `a ∘ b` where `b` has the rank of `a` and every axis of `b` either
    /// matches `a` or has size 1.
    pub fn broadcast(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match op {
            BinaryOp::Add => ad.iter().zip(&map).map(|(x, &j)| x + bd[j]).collect(),
            BinaryOp::Mul => ad.iter().zip(&map).map(|(x, &j)| x * bd[j]).collect(),
        };
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Broadcast(a, b, op), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = match kind {
            Activation::Relu => self.value(x).map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Gelu => self.value(x).map(|v| v * kernels::normal_cdf(v)),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        self.push(t, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = libm::exp(*e - m);
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let t = Tensor::new(v.shape(), out).unwrap();
        self.push(t, Op::Softmax(x), &[x])
    }

    // ---------------------------------------------------------- normalization

    /// Layer norm over the last axis with affine `gamma`, `beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta {:?}/{:?} for last dim {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> =
            xhat.iter().enumerate().map(|(i, xh)| xh * g[i % d] + b[i % d]).collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Batch norm over axis 1 of a `B×C×H×W` tensor using the statistics of
    /// this batch. Returns the batch mean and unbiased variance alongside.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (bs, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        let hw = h * w;
        let count = (bs * hw) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..bs {
                s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for b in 0..bs {
                q += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let out = self.affine_norm(x, gamma, beta, &mean, &inv_std, c, hw, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        self.affine_norm(x, gamma, beta, mean, &inv_std, c, h * w, false)
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!("gamma/beta {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        c: usize,
        hw: usize,
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / hw) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = *xh * g[ch] + bt[ch];
        }
        let t = Tensor::new(self.shape(x), out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), batch_stats };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    // --------------------------------------------------------------- spatial

    /// Cross-correlation with zero padding. `kernel` is `Cout×Cin×kh×kw` with
    /// odd spatial extents.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (bs, cin, h, w) = self.value(x).dims4("conv2d")?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {cin} channels, kernel {:?} expects {kcin}", self.shape(x), self.shape(kernel)),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} must be odd, stride {stride} > 0")));
        }
        let out_dim = |n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * padding;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("({n}+2·{padding}−{k})/{stride}+1 is not integral"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: out_dim(h, kh)?,
            wo: out_dim(w, kw)?,
        };
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), bs, cout, &geom);
        let t = Tensor::new(&[bs, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    pub fn upsample2x_nearest(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("upsample2x_nearest")?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; bs * c * h2 * w2];
        for plane in 0..bs * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(plane * h2 + y) * w2 + xx] = xv[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[bs, c, h2, w2], out)?;
        Ok(self.push(t, Op::UpsampleNearest2x(x), &[x]))
    }

    /// Bilinear resampling by an integer factor with half-pixel centres and
    /// edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("upsample_bilinear")?;
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "factor must be positive"));
        }
        let (ty, tx) = (kernels::bilinear_taps(h, factor), kernels::bilinear_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * c * ho * wo];
        for plane in 0..bs * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    out[(plane * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let t = Tensor::new(&[bs, c, ho, wo], out)?;
        Ok(self.push(t, Op::UpsampleBilinear(x, factor), &[x]))
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("avg_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2x2", format!("odd spatial dims {h}×{w}")));
        }
        let xv = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; bs * c * ho * wo];
        for plane in 0..bs * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let at = |dy: usize, dx: usize| xv[(plane * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(plane * ho + y) * wo + xx] =
                        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25;
                }
            }
        }
        let t = Tensor::new(&[bs, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2x2(x), &[x]))
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C×1×1`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("spatial_mean")?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[bs, c, 1, 1], out)?;
        Ok(self.push(t, Op::SpatialMean(x), &[x]))
    }

    /// Max over the spatial axes: `B×C×H×W → B×C×1×1`. Ties resolve to the
    /// first position.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("spatial_max")?;
        let hw = h * w;
        let mut arg = Vec::with_capacity(bs * c);
        let mut out = Vec::with_capacity(bs * c);
        for (p, plane) in self.value(x).data().chunks(hw).enumerate() {
            let (i, m) = argmax(plane.iter().copied());
            arg.push(p * hw + i);
            out.push(m);
        }
        let t = Tensor::new(&[bs, c, 1, 1], out)?;
        Ok(self.push(t, Op::SpatialMax(x, arg), &[x]))
    }

    /// Mean across channels: `B×C×H×W → B×1×H×W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("channel_mean")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * hw];
        for b in 0..bs {
            for ch in 0..c {
                let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, v) in out[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        let t = Tensor::new(&[bs, 1, h, w], out)?;
        Ok(self.push(t, Op::ChannelMean(x), &[x]))
    }

    /// Max across channels: `B×C×H×W → B×1×H×W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("channel_max")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * hw);
        let mut arg = Vec::with_capacity(bs * hw);
        for b in 0..bs {
            for p in 0..hw {
                let (i, m) = argmax((0..c).map(|ch| xv[(b * c + ch) * hw + p]));
                arg.push((b * c + i) * hw + p);
                out.push(m);
            }
        }
        let t = Tensor::new(&[bs, 1, h, w], out)?;
        Ok(self.push(t, Op::ChannelMax(x, arg), &[x]))
    }

    // ------------------------------------------------------------ structural

    /// Concatenation along axis 1 of `B×C×H×W` tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (bs, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut ctot = 0;
        for &v in xs {
            let (b2, c2, h2, w2) = self.value(v).dims4("concat_channels")?;
            if (b2, h2, w2) != (bs, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match {:?} outside the channel axis", self.shape(v), self.shape(first)),
                ));
            }
            ctot += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(bs * ctot * hw);
        for b in 0..bs {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let t = Tensor::new(&[bs, ctot, h, w], out)?;
        Ok(self.push(t, Op::ConcatChannels(xs.to_vec()), xs))
    }

    /// Concatenation along the last axis.
    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut dtot = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(Error::shape("concat_lastdim", format!("{s:?} vs {:?}", self.shape(first))));
            }
            dtot += s[lead.len()];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * dtot);
        for r in 0..rows {
            for &v in xs {
                let d = *self.shape(v).last().unwrap();
                out.extend_from_slice(&self.value(v).data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(dtot);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ConcatLast(xs.to_vec()), xs))
    }

    /// Channels `start..start + len` of a `B×C×H×W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * len * hw);
        for b in 0..bs {
            out.extend_from_slice(&xv[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let t = Tensor::new(&[bs, len, h, w], out)?;
        Ok(self.push(t, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `B×N×D` tokens laid out on a `rows×cols` grid → `B×D×rows×cols` map.
    pub fn tokens_to_map(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != rows * cols {
            return Err(Error::shape("tokens_to_map", format!("{s:?} on a {rows}×{cols} grid")));
        }
        let (bs, n, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            for t in 0..n {
                for c in 0..d {
                    out[(b * d + c) * n + t] = xv[(b * n + t) * d + c];
                }
            }
        }
        let t = Tensor::new(&[bs, d, rows, cols], out)?;
        Ok(self.push(t, Op::TokensToMap(x), &[x]))
    }

    /// `B×D×H×W` map → `B×(H·W)×D` tokens in row-major grid order.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (bs, d, h, w) = self.value(x).dims4("map_to_tokens")?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..bs {
            for c in 0..d {
                for t in 0..n {
                    out[(b * n + t) * d + c] = xv[(b * d + c) * n + t];
                }
            }
        }
        let t = Tensor::new(&[bs, n, d], out)?;
        Ok(self.push(t, Op::MapToTokens(x), &[x]))
    }

    /// Cuts a `B×C×H×W` image into non-overlapping `p×p` patches, giving
    /// `B×N×(C·p·p)` with patches in row-major grid order and each patch
    /// flattened channel-major.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4("patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape("patchify", format!("patch size {p} does not divide {h}×{w}")));
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let d = c * p * p;
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * n * d];
        for b in 0..bs {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let dst = &mut out[(b * n + tok) * d..(b * n + tok + 1) * d];
                    for ch in 0..c {
                        for py in 0..p {
                            let src = ((b * c + ch) * h + gy * p + py) * w + gx * p;
                            dst[(ch * p + py) * p..(ch * p + py + 1) * p]
                                .copy_from_slice(&xv[src..src + p]);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[bs, n, d], out)?;
        Ok(self.push(t, Op::Patchify(x, p), &[x]))
    }

    // ------------------------------------------------------------------ loss

    /// Segmentation loss of a `B×1×H×W` probability map against a binary
    /// target: per image, soft IoU `1 − Σyp / Σ(y + p − yp)` plus the
    /// pixel-mean binary cross-entropy, averaged over the batch. An optional
    /// non-negative pixel weight map (same shape) weights both terms.
    pub fn seg_loss(&mut self, pred: Var, target: &Tensor, weight: Option<&Tensor>) -> Result<Var> {
        let ps = self.shape(pred);
        if ps != target.shape() {
            return Err(Error::shape("seg_loss", format!("prediction {ps:?} vs target {:?}", target.shape())));
        }
        if let Some(wm) = weight {
            if wm.shape() != ps {
                return Err(Error::shape("seg_loss", format!("weight map {:?} vs {ps:?}", wm.shape())));
            }
        }
        if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract("seg_loss: ground truth must be strictly binary".into()));
        }
        let loss = seg_loss_value(self.value(pred), target, weight);
        if !loss.is_finite() {
            return Err(Error::NonFinite("seg_loss".into()));
        }
        let op = Op::SegLoss { pred, target: target.clone(), weight: weight.cloned() };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    // -------------------------------------------------------------- backward

    /// Gradients of scalar `loss` with respect to every recorded value that
    /// requires one. Nodes are visited in exact reverse recording order and
    /// gradients accumulate additively across uses.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let t = Tensor::new(self.shape(v), data).expect("gradient shape");
            self.acc(grads, v, t);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (k, n) = (self.shape(b)[0], self.shape(b)[1]);
                let m = self.value(a).len() / k;
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_a_bt_acc(gd, self.value(b).data(), &mut da, m, k, n);
                    self.acc_data(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_at_b_acc(self.value(a).data(), gd, &mut db, m, k, n);
                    self.acc_data(grads, b, db);
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::gemm_a_bt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc_data(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::gemm_at_b_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.acc_data(grads, b, db);
                }
            }
            &Op::TransposeLast2(x) => self.acc(grads, x, transpose_last2(g)),
            &Op::Elementwise(a, b, op) => match op {
                BinaryOp::Add => {
                    self.acc(grads, a, g.clone());
                    self.acc(grads, b, g.clone());
                }
                BinaryOp::Mul => {
                    let (ad, bd) = (self.value(a).data(), self.value(b).data());
                    self.acc_data(grads, a, gd.iter().zip(bd).map(|(g, y)| g * y).collect());
                    self.acc_data(grads, b, gd.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            },
            &Op::Broadcast(a, b, op) => {
                let map = broadcast_map(self.shape(a), self.shape(b)).expect("checked in forward");
                let bd = self.value(b).data();
                let ad = self.value(a).data();
                match op {
                    BinaryOp::Add => self.acc(grads, a, g.clone()),
                    BinaryOp::Mul => self.acc_data(
                        grads,
                        a,
                        gd.iter().zip(&map).map(|(g, &j)| g * bd[j]).collect(),
                    ),
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; bd.len()];
                    for (i, &j) in map.iter().enumerate() {
                        db[j] += match op {
                            BinaryOp::Add => gd[i],
                            BinaryOp::Mul => gd[i] * ad[i],
                        };
                    }
                    self.acc_data(grads, b, db);
                }
            }
            &Op::Scale(x, c) => self.acc(grads, x, g.map(|v| v * c)),
            &Op::Sum(x) => self.acc(grads, x, Tensor::full(self.shape(x), gd[0])),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.acc(grads, x, Tensor::full(self.shape(x), gd[0] / n));
            }
            &Op::Act(x, kind) => {
                let xv = self.value(x).data();
                let d: Vec<f64> = match kind {
                    Activation::Relu => gd
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Gelu => gd
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| g * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x)))
                        .collect(),
                    Activation::Sigmoid => gd
                        .iter()
                        .zip(out.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect(),
                };
                self.acc_data(grads, x, d);
            }
            &Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0; gd.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                self.acc_data(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let rg = &gd[r * d..(r + 1) * d];
                    let rx = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgamma[j] += rg[j] * rx[j];
                        dbeta[j] += rg[j];
                        let dxh = rg[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * rx[j];
                    }
                    for j in 0..d {
                        let dxh = rg[j] * gm[j];
                        dx[r * d + j] = is * (dxh - s1 / d as f64 - rx[j] * s2 / d as f64);
                    }
                }
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *gamma, dgamma);
                self.acc_data(grads, *beta, dbeta);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let (bs, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (g, xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += g * xh;
                    dbeta[ch] += g;
                }
                if self.requires_grad(*x) {
                    let count = (bs * hw) as f64;
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (g, xh))| {
                            let ch = (i / hw) % c;
                            let dxh = g * gm[ch];
                            if *batch_stats {
                                // Σdxh = γ·dβ, Σdxh·x̂ = γ·dγ per channel.
                                inv_std[ch]
                                    * (dxh - gm[ch] * dbeta[ch] / count - xh * gm[ch] * dgamma[ch] / count)
                            } else {
                                dxh * inv_std[ch]
                            }
                        })
                        .collect();
                    self.acc_data(grads, *x, dx);
                }
                self.acc_data(grads, *gamma, dgamma);
                self.acc_data(grads, *beta, dbeta);
            }
            &Op::Conv2d { x, kernel, ref geom } => {
                let bs = self.shape(x)[0];
                let cout = self.shape(kernel)[0];
                let mut dx = self.requires_grad(x).then(|| vec![0.0; self.value(x).len()]);
                let mut dk = self.requires_grad(kernel).then(|| vec![0.0; self.value(kernel).len()]);
                kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(kernel).data(),
                    gd,
                    bs,
                    cout,
                    geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc_data(grads, x, dx);
                }
                if let Some(dk) = dk {
                    self.acc_data(grads, kernel, dk);
                }
            }
            &Op::UpsampleNearest2x(x) => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0; self.value(x).len()];
                for (i, g) in gd.iter().enumerate() {
                    let xx = i % (2 * w);
                    let y = (i / (2 * w)) % (2 * h);
                    let plane = i / (4 * h * w);
                    dx[(plane * h + y / 2) * w + xx / 2] += g;
                }
                self.acc_data(grads, x, dx);
            }
            &Op::UpsampleBilinear(x, factor) => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let (ty, tx) = (kernels::bilinear_taps(h, factor), kernels::bilinear_taps(w, factor));
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; self.value(x).len()];
                for plane in 0..s[0] * s[1] {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let g = gd[(plane * ho + oy) * wo + ox];
                            dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += g * fy * (1.0 - fx);
                            dst[y1 * w + x1] += g * fy * fx;
                        }
                    }
                }
                self.acc_data(grads, x, dx);
            }
            &Op::AvgPool2x2(x) => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let dx: Vec<f64> = (0..self.value(x).len())
                    .map(|i| {
                        let xx = i % w;
                        let y = (i / w) % h;
                        let plane = i / (h * w);
                        gd[(plane * (h / 2) + y / 2) * (w / 2) + xx / 2] * 0.25
                    })
                    .collect();
                self.acc_data(grads, x, dx);
            }
            &Op::SpatialMean(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let dx: Vec<f64> = (0..self.value(x).len()).map(|i| gd[i / hw] / hw as f64).collect();
                self.acc_data(grads, x, dx);
            }
            Op::SpatialMax(x, arg) | Op::ChannelMax(x, arg) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (g, &j) in gd.iter().zip(arg) {
                    dx[j] += g;
                }
                self.acc_data(grads, *x, dx);
            }
            &Op::ChannelMean(x) => {
                let s = self.shape(x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let dx: Vec<f64> = (0..self.value(x).len())
                    .map(|i| {
                        let b = i / (c * hw);
                        gd[b * hw + i % hw] / c as f64
                    })
                    .collect();
                self.acc_data(grads, x, dx);
            }
            Op::ConcatChannels(xs) => {
                let s = out.shape();
                let (bs, ctot, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(bs * c * hw);
                        for b in 0..bs {
                            dx.extend_from_slice(&gd[(b * ctot + offset) * hw..(b * ctot + offset + c) * hw]);
                        }
                        self.acc_data(grads, v, dx);
                    }
                    offset += c;
                }
            }
            Op::ConcatLast(xs) => {
                let dtot = *out.shape().last().unwrap();
                let rows = out.len() / dtot;
                let mut offset = 0;
                for &v in xs {
                    let d = *self.shape(v).last().unwrap();
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(rows * d);
                        for r in 0..rows {
                            dx.extend_from_slice(&gd[r * dtot + offset..r * dtot + offset + d]);
                        }
                        self.acc_data(grads, v, dx);
                    }
                    offset += d;
                }
            }
            &Op::SliceChannels { x, start } => {
                let s = self.shape(x);
                let (bs, c, hw) = (s[0], s[1], s[2] * s[3]);
                let len = out.shape()[1];
                let mut dx = vec![0.0; self.value(x).len()];
                for b in 0..bs {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&gd[b * len * hw..(b + 1) * len * hw]);
                }
                self.acc_data(grads, x, dx);
            }
            &Op::Reshape(x) => self.acc_data(grads, x, gd.to_vec()),
            &Op::TokensToMap(x) => {
                let s = self.shape(x);
                let (bs, n, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; gd.len()];
                for b in 0..bs {
                    for t in 0..n {
                        for c in 0..d {
                            dx[(b * n + t) * d + c] = gd[(b * d + c) * n + t];
                        }
                    }
                }
                self.acc_data(grads, x, dx);
            }
            &Op::MapToTokens(x) => {
                let s = self.shape(x);
                let (bs, d, n) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; gd.len()];
                for b in 0..bs {
                    for c in 0..d {
                        for t in 0..n {
                            dx[(b * d + c) * n + t] = gd[(b * n + t) * d + c];
                        }
                    }
                }
                self.acc_data(grads, x, dx);
            }
            &Op::Patchify(x, p) => {
                let s = self.shape(x);
                let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (gh, gw) = (h / p, w / p);
                let (n, d) = (gh * gw, c * p * p);
                let mut dx = vec![0.0; self.value(x).len()];
                for b in 0..bs {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let tok = gy * gw + gx;
                            let src = &gd[(b * n + tok) * d..(b * n + tok + 1) * d];
                            for ch in 0..c {
                                for py in 0..p {
                                    let dst = ((b * c + ch) * h + gy * p + py) * w + gx * p;
                                    dx[dst..dst + p]
                                        .copy_from_slice(&src[(ch * p + py) * p..(ch * p + py + 1) * p]);
                                }
                            }
                        }
                    }
                }
                self.acc_data(grads, x, dx);
            }
            Op::SegLoss { pred, target, weight } => {
                let dp = seg_loss_grad(self.value(*pred), target, weight.as_ref());
                self.acc_data(grads, *pred, dp.into_iter().map(|v| v * gd[0]).collect());
            }
        }
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = t.len() / (m * n);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = d[b * m * n + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out).unwrap()
}

/// For every flat index of `a`, the flat index of the broadcast operand `b`.
fn broadcast_map(sa: &[usize], sb: &[usize]) -> Result<Vec<usize>> {
    if sa.len() != sb.len() || sa.iter().zip(sb).any(|(&x, &y)| y != x && y != 1) {
        return Err(Error::shape("broadcast", format!("cannot broadcast {sb:?} onto {sa:?}")));
    }
    let r = sa.len();
    let mut bstride = vec![0usize; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        bstride[i] = if sb[i] == 1 { 0 } else { acc };
        acc *= sb[i];
    }
    let n: usize = sa.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += bstride[ax];
            if idx[ax] < sa[ax] {
                break;
            }
            cur -= bstride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

/// Per-image (intersection, union, bce_sum, weight_sum).
fn seg_loss_terms(pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> Vec<[f64; 4]> {
    let bs = pred.shape()[0];
    let per = pred.len() / bs;
    (0..bs)
        .map(|b| {
            let mut t = [0.0; 4];
            for n in b * per..(b + 1) * per {
                let (p, y) = (pred.data()[n], target.data()[n]);
                let w = weight.map_or(1.0, |wm| wm.data()[n]);
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                t[0] += w * y * p;
                t[1] += w * (y + p - y * p);
                t[2] -= w * (y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc));
                t[3] += w;
            }
            t
        })
        .collect()
}

pub(crate) fn seg_loss_value(pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> f64 {
    let terms = seg_loss_terms(pred, target, weight);
    let total: f64 = terms
        .iter()
        .map(|&[inter, union, bce, wsum]| {
            let iou = if union > 0.0 { 1.0 - inter / union } else { 0.0 };
            let bce = if wsum > 0.0 { bce / wsum } else { 0.0 };
            iou + bce
        })
        .sum();
    total / terms.len() as f64
}

fn seg_loss_grad(pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> Vec<f64> {
    let terms = seg_loss_terms(pred, target, weight);
    let bs = terms.len();
    let per = pred.len() / bs;
    let mut out = vec![0.0; pred.len()];
    for (b, &[inter, union, _, wsum]) in terms.iter().enumerate() {
        for n in b * per..(b + 1) * per {
            let (p, y) = (pred.data()[n], target.data()[n]);
            let w = weight.map_or(1.0, |wm| wm.data()[n]);
            let mut d = 0.0;
            if union > 0.0 {
                // d/dp [−I/U] with dI/dp = w·y, dU/dp = w·(1 − y)
                d -= w * (y * union - inter * (1.0 - y)) / (union * union);
            }
            if wsum > 0.0 && p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                d -= w * (y / p - (1.0 - y) / (1.0 - p)) / wsum;
            }
            out[n] = d / bs as f64;
        }
    }
    out
}

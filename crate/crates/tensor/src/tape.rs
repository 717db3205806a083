use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch-norm running statistics (not trained by gradient descent).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    AddChannel { x: Var, b: Var },
    MulChannel { x: Var, s: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    MaxPool { x: Var, arg: Vec<usize> },
    GlobalAvgPool(Var),
    ReflectPad(Var, usize),
    MinMaxNorm { x: Var, spans: Vec<Option<(usize, usize, f64)>> },
    Attention { q: Var, k: Var, v: Var, lse: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannel { .. } => "add_channel",
            Op::MulChannel { .. } => "mul_channel",
            Op::BatchNorm { .. } | Op::BatchNormEval { .. } => "batchnorm",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::PixelUnshuffle(..) => "pixel_unshuffle",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::ReflectPad(..) => "reflect_pad",
            Op::MinMaxNorm { .. } => "minmax_normalize",
            Op::Attention { .. } => "attention",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Log(x, _)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::PixelShuffle(x, _)
            | Op::PixelUnshuffle(x, _)
            | Op::GlobalAvgPool(x)
            | Op::ReflectPad(x, _) => vec![*x],
            Op::Softmax { x, .. } | Op::MaxPool { x, .. } | Op::MinMaxNorm { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::AddChannel { x, b } => vec![*x, *b],
            Op::MulChannel { x, s } => vec![*x, *s],
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every primitive validates shapes, computes its value eagerly and rejects
/// non-finite results. Nodes are appended in creation order, so walking the
/// tape backwards visits every node after all of its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf does not require gradients
    /// or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but unreachable leaves yield zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: op.name(), index });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: "leaf", index });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(TensorError::invalid("div", "division by zero"));
        }
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    /// `x + c` for a scalar constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor
    /// is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(floor).ln());
        self.push(t, Op::Log(x, floor))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in 0..len {
                    let e = (src[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    out[idx(a)] /= s;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} except axis {axis}"), s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let t = kernels::conv2d(self.value(x), self.value(k), stride, pad)?;
        self.push(t, Op::Conv2d { x, k, stride, pad })
    }

    /// Adds `b[c]` to every element of channel `c` of a `[N, C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let shape = tx.shape();
        if shape.len() < 2 || tb.shape() != [shape[1]] {
            return Err(TensorError::shape("add_channel", "bias [C] matching input channels", tb.shape()));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = tx.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::AddChannel { x, b })
    }

    /// Scales channel `c` of sample `n` by `s[n, c, 0, 0]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let [n, c, h, w] = tx.dims4("mul_channel")?;
        if ts.shape() != [n, c, 1, 1] {
            return Err(TensorError::shape("mul_channel", format!("[{n}, {c}, 1, 1]"), ts.shape()));
        }
        let hw = h * w;
        let mut out = tx.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v *= ts.data()[i / hw];
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push(t, Op::MulChannel { x, s })
    }

    /// Batch normalisation over `(N, H, W)` per channel. Train mode uses the
    /// batch statistics and folds them into `stats` with momentum 0.1
    /// (unbiased variance); eval mode reads `stats` only.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: NormMode) -> Result<Var> {
        let c = match self.shape(x) {
            &[_, c, _, _] => c,
            s => return Err(TensorError::shape("batchnorm", "[N, C, H, W]", s)),
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::shape("batchnorm", format!("[{c}]"), self.shape(p)));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::invalid("batchnorm", format!("running stats sized for {} channels, input has {c}", stats.mean.len())));
        }
        let eps = RunningStats::EPS;
        match mode {
            NormMode::Train => {
                let tx = self.value(x);
                let m = tx.numel() / c;
                let bn = kernels::batchnorm_train(tx, self.value(gamma).data(), self.value(beta).data(), eps)?;
                let mom = RunningStats::MOMENTUM;
                let unbias = m as f64 / (m as f64 - 1.0);
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * bn.mean[ch];
                    stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * bn.var[ch] * unbias;
                }
                self.push(bn.y, Op::BatchNorm { x, gamma, beta, xhat: bn.xhat, inv_std: bn.inv_std })
            }
            NormMode::Eval => {
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let tx = self.value(x);
                let (g, b) = (self.value(gamma).data(), self.value(beta).data());
                let inner = tx.numel() / tx.shape()[0] / c;
                let data = tx
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / inner) % c;
                        g[ch] * (v - stats.mean[ch]) * inv_std[ch] + b[ch]
                    })
                    .collect();
                let t = Tensor::new(tx.shape(), data)?;
                let mean = stats.mean.clone();
                self.push(t, Op::BatchNormEval { x, gamma, beta, mean, inv_std })
            }
        }
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x).pixel_shuffle(r)?;
        self.push(t, Op::PixelShuffle(x, r))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x).pixel_unshuffle(r)?;
        self.push(t, Op::PixelUnshuffle(x, r))
    }

    /// Max pooling with window and stride `size`, no padding.
    pub fn maxpool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (t, arg) = kernels::maxpool(self.value(x), size)?;
        self.push(t, Op::MaxPool { x, arg })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("global_avg_pool")?;
        let hw = h * w;
        let data = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(&[n, c, 1, 1], data)?;
        self.push(t, Op::GlobalAvgPool(x))
    }

    /// Mirror padding without edge repeat (`[a b c]` pads to `b a b c b`).
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims4("reflect_pad")?;
        if pad >= h || pad >= w {
            return Err(TensorError::invalid("reflect_pad", format!("pad {pad} needs spatial size > {pad}, got {h}x{w}")));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0; n * c * hp * wp];
        for plane in 0..n * c {
            let src = &t.data()[plane * h * w..][..h * w];
            let dst = &mut out[plane * hp * wp..][..hp * wp];
            for y in 0..hp {
                let sy = reflect(y as isize - pad as isize, h);
                for xx in 0..wp {
                    let sx = reflect(xx as isize - pad as isize, w);
                    dst[y * wp + xx] = src[sy * w + sx];
                }
            }
        }
        let t = Tensor::new(&[n, c, hp, wp], out)?;
        self.push(t, Op::ReflectPad(x, pad))
    }

    /// Per-sample min-max rescaling to `[0, 1]` over all non-batch axes.
    /// Samples with a constant value map to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let mut out = vec![0.0; t.numel()];
        let mut spans = Vec::with_capacity(n);
        for b in 0..n {
            let s = &t.data()[b * per..][..per];
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in s.iter().enumerate() {
                if v < s[lo] {
                    lo = i;
                }
                if v > s[hi] {
                    hi = i;
                }
            }
            let range = s[hi] - s[lo];
            if range > 0.0 {
                for (o, &v) in out[b * per..][..per].iter_mut().zip(s) {
                    *o = (v - s[lo]) / range;
                }
                spans.push(Some((b * per + lo, b * per + hi, range)));
            } else {
                spans.push(None);
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        self.push(t, Op::MinMaxNorm { x, spans })
    }

    /// Softmax dot-product attention; see [`kernels::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (t, lse) = kernels::attention(self.value(q), self.value(k), self.value(v))?;
        self.push(t, Op::Attention { q, k, v, lse })
    }

    /// Digest of every branch taken by the non-smooth ops on the tape: signs
    /// at `relu`, `leaky_relu` and `abs`, clamping at `log`, argmax at
    /// `maxpool` and the extreme positions at `minmax_normalize`. Two
    /// evaluations with equal digests lie on the same smooth piece.
    pub fn branch_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let signs = |x: Var, h: &mut DefaultHasher, pred: &dyn Fn(f64) -> bool| {
                i.hash(h);
                for &v in self.value(x).data() {
                    pred(v).hash(h);
                }
            };
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => signs(*x, &mut h, &|v| v > 0.0),
                Op::Log(x, floor) => signs(*x, &mut h, &|v| v < *floor),
                Op::MaxPool { arg, .. } => (i, arg).hash(&mut h),
                Op::MinMaxNorm { spans, .. } => {
                    i.hash(&mut h);
                    for s in spans {
                        s.map(|(lo, hi, _)| (lo, hi)).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let nd = &self.nodes[i];
                match (g, &nd.op) {
                    (Some(g), Op::Leaf) if nd.requires_grad => Some(Tensor::new(nd.value.shape(), g).expect("gradient shape")),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(*b) {
                    add_into_owned(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    add_into_owned(&mut grads[a.0], d);
                }
                if rg(*b) {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    add_into_owned(&mut grads[b.0], d);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if rg(*a) {
                    let d = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                    add_into_owned(&mut grads[a.0], d);
                }
                if rg(*b) {
                    let d = g.iter().zip(out).zip(bv).map(|((g, q), y)| -g * q / y).collect();
                    add_into_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(x, f) => add_into_owned(&mut grads[x.0], g.iter().map(|v| v * f).collect()),
            Op::Offset(x) | Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Relu(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::LeakyRelu(x, slope) => {
                let d = g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Log(x, floor) => {
                let d = g.iter().zip(val(*x)).map(|(g, &x)| if x > *floor { g / x } else { 0.0 }).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Abs(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 }).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                add_into_owned(&mut grads[x.0], vec![g[0]; len]);
            }
            Op::Mean(x) => {
                let len = val(*x).len();
                add_into_owned(&mut grads[x.0], vec![g[0] / len as f64; len]);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[idx(a)] * out[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    if rg(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..][..chunk]);
                        }
                        add_into_owned(&mut grads[p.0], d);
                    }
                    offset += chunk;
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    *stride,
                    *pad,
                    g,
                    rg(*x),
                    rg(*k),
                )?;
                if let Some(dx) = dx {
                    add_into_owned(&mut grads[x.0], dx);
                }
                if let Some(dk) = dk {
                    add_into_owned(&mut grads[k.0], dk);
                }
            }
            Op::AddChannel { x, b } => {
                if rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if rg(*b) {
                    let shape = node.value.shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut d = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        d[(i / inner) % c] += gv;
                    }
                    add_into_owned(&mut grads[b.0], d);
                }
            }
            Op::MulChannel { x, s } => {
                let shape = node.value.shape();
                let hw = shape[2] * shape[3];
                let sv = val(*s);
                if rg(*x) {
                    let d = g.iter().enumerate().map(|(i, g)| g * sv[i / hw]).collect();
                    add_into_owned(&mut grads[x.0], d);
                }
                if rg(*s) {
                    let xv = val(*x);
                    let mut d = vec![0.0; sv.len()];
                    for (i, gv) in g.iter().enumerate() {
                        d[i / hw] += gv * xv[i];
                    }
                    add_into_owned(&mut grads[s.0], d);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_train_backward(node.value.shape(), xhat, inv_std, val(*gamma), g);
                if rg(*x) {
                    add_into_owned(&mut grads[x.0], dx);
                }
                if rg(*gamma) {
                    add_into_owned(&mut grads[gamma.0], dgamma);
                }
                if rg(*beta) {
                    add_into_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner = shape[2] * shape[3];
                let gm = val(*gamma);
                let xv = val(*x);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    let ch = (i / inner) % c;
                    dx[i] = gv * gm[ch] * inv_std[ch];
                    dgamma[ch] += gv * (xv[i] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gv;
                }
                if rg(*x) {
                    add_into_owned(&mut grads[x.0], dx);
                }
                if rg(*gamma) {
                    add_into_owned(&mut grads[gamma.0], dgamma);
                }
                if rg(*beta) {
                    add_into_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::PixelShuffle(x, r) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                add_into_owned(&mut grads[x.0], gt.pixel_unshuffle(*r)?.into_data());
            }
            Op::PixelUnshuffle(x, r) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                add_into_owned(&mut grads[x.0], gt.pixel_shuffle(*r)?.into_data());
            }
            Op::MaxPool { x, arg } => {
                let mut d = vec![0.0; val(*x).len()];
                for (gv, &i) in g.iter().zip(arg) {
                    d[i] += gv;
                }
                add_into_owned(&mut grads[x.0], d);
            }
            Op::GlobalAvgPool(x) => {
                let len = val(*x).len();
                let hw = len / g.len();
                let d = (0..len).map(|i| g[i / hw] / hw as f64).collect();
                add_into_owned(&mut grads[x.0], d);
            }
            Op::ReflectPad(x, pad) => {
                let [n, c, h, w] = self.value(*x).dims4("reflect_pad")?;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut d = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..hp {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..wp {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            d[plane * h * w + sy * w + sx] += g[plane * hp * wp + y * wp + xx];
                        }
                    }
                }
                add_into_owned(&mut grads[x.0], d);
            }
            Op::MinMaxNorm { x, spans } => {
                let len = out.len();
                let per = len / spans.len();
                let mut d = vec![0.0; len];
                for (b, span) in spans.iter().enumerate() {
                    let Some((lo, hi, range)) = *span else { continue };
                    let mut to_min = 0.0;
                    let mut to_max = 0.0;
                    for i in b * per..(b + 1) * per {
                        d[i] += g[i] / range;
                        to_min += g[i] * (out[i] - 1.0) / range;
                        to_max -= g[i] * out[i] / range;
                    }
                    d[lo] += to_min;
                    d[hi] += to_max;
                }
                add_into_owned(&mut grads[x.0], d);
            }
            Op::Attention { q, k, v, lse } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(self.value(*q), self.value(*k), self.value(*v), &node.value, lse, g)?;
                if rg(*q) {
                    add_into_owned(&mut grads[q.0], dq);
                }
                if rg(*k) {
                    add_into_owned(&mut grads[k.0], dk);
                }
                if rg(*v) {
                    add_into_owned(&mut grads[v.0], dv);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        let sq = tape.square(x).unwrap();
        let f = tape.sum(sq).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        let c = tape.constant(Tensor::scalar(4.0)).unwrap();
        let f = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(f).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1e300), true).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul", index: 0 });
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 1, 1], 0.3)).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        assert!(tape.value(s).data().iter().all(|&w| w == 0.2));
    }

    #[test]
    fn global_avg_pool_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).item(), 2.5);
    }

    #[test]
    fn batchnorm_train_normalises_channels() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 37 % 17) as f64).sqrt() * 3.0 + 1.0))
            .unwrap();
        let g = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Train).unwrap();
        let yd = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| yd[(n * 2 + ch) * 16..][..16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // running stats moved away from their (0, 1) initialisation
        assert!(stats.mean.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64)).unwrap();
        let g = tape.constant(Tensor::zeros(&[2])).unwrap();
        let b = tape.constant(Tensor::new(&[2], vec![0.25, -1.5]).unwrap()).unwrap();
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Train).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let want = if (i / 9) % 2 == 0 { 0.25 } else { -1.5 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn batchnorm_zero_variance_channel_is_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0)).unwrap();
        let g = tape.constant(Tensor::full(&[1], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let mut stats = RunningStats::new(1);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_pad_layout() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!(tape.reflect_pad(x, 1).is_err());
        let x = tape.constant(Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let p = tape.reflect_pad(x, 1).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 4, 5]);
        assert_eq!(&tape.value(p).data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn minmax_constant_sample_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.7)).unwrap();
        let y = tape.minmax_normalize(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_along_channels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 1, 1, 2], 1.0)).unwrap();
        let b = tape.constant(Tensor::full(&[2, 2, 1, 2], 2.0)).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 1, 2]);
        assert_eq!(tape.value(c).data(), &[1., 1., 2., 2., 2., 2., 1., 1., 2., 2., 2., 2.]);
        let bad = tape.constant(Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        assert!(tape.concat(&[a, bad], 1).is_err());
    }
}

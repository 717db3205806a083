//! Forward and backward kernels for the heavier primitives. These work on
//! raw tensors; the tape in `tape.rs` wires them into the gradient graph.

use crate::error::{Result, TensorError};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Self)> {
        let [n, c, h, w] = match x {
            &[n, c, h, w] => [n, c, h, w],
            _ => return Err(TensorError::shape("conv2d", "input [N, C, H, W]", x)),
        };
        let [f, kc, kh, kw] = match k {
            &[f, kc, kh, kw] => [f, kc, kh, kw],
            _ => return Err(TensorError::shape("conv2d", "kernel [F, C, kh, kw]", k)),
        };
        if kc != c {
            return Err(TensorError::shape("conv2d", format!("kernel with {c} input channels"), k));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok((n, f, Self { c, h, w, kh, kw, stride, pad, ho, wo }))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let l = g.out_len();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * l..][..l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.out_len();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * l..][..l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, f, g) = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
    let in_len = g.c * g.h * g.w;
    let (p, l) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; n * f * l];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * l] };
    for b in 0..n {
        let xb = &x.data()[b * in_len..][..in_len];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm_nn(f, p, l, k.data(), src, &mut out[b * f * l..][..f * l], false);
    }
    Tensor::new(&[n, f, g.ho, g.wo], out)
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    dout: &[f64],
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let (n, f, g) = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
    let in_len = g.c * g.h * g.w;
    let (p, l) = (g.patch_len(), g.out_len());
    let mut dx = want_dx.then(|| vec![0.0; x.numel()]);
    let mut dk = want_dk.then(|| vec![0.0; k.numel()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * l] };
    let mut dcols = if want_dx && !g.is_pointwise() { vec![0.0; p * l] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data()[b * in_len..][..in_len];
        let db = &dout[b * f * l..][..f * l];
        if let Some(dk) = dk.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            gemm_nt(f, l, p, db, src, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..][..in_len];
            if g.is_pointwise() {
                gemm_tn(p, f, l, k.data(), db, dxb, false);
            } else {
                gemm_tn(p, f, l, k.data(), db, &mut dcols, false);
                col2im_add(&dcols, &g, dxb);
            }
        }
    }
    Ok((dx, dk))
}

/// Non-overlapping max pooling; returns the pooled tensor and the flat input
/// index chosen for every output cell (first maximum in row-major order).
pub(crate) fn maxpool(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4("maxpool")?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(TensorError::invalid(
            "maxpool",
            format!("spatial size {h}x{w} not divisible by pool size {size}"),
        ));
    }
    let (ho, wo) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub(crate) struct BatchNormTrain {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<BatchNormTrain> {
    let [n, c, h, w] = x.dims4("batchnorm")?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(TensorError::invalid(
            "batchnorm",
            format!("train mode needs at least 2 values per channel, got {m}"),
        ));
    }
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xd[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m as f64;
        let mut v = 0.0;
        for b in 0..n {
            v += xd[(b * c + ch) * hw..][..hw].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    Ok(BatchNormTrain {
        y: Tensor::new(x.shape(), y)?,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn batchnorm_train_backward(
    shape: &[usize],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            // dxhat = dy·γ; sums of dxhat and dxhat·xhat are γ·dβ and γ·dγ.
            let k = gamma[ch] * inv_std[ch] / m;
            for i in o..o + hw {
                dx[i] = k * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// The attention row kernels are compiled twice: once for the baseline
// target and once with AVX2 enabled, picked at run time. No FMA is enabled,
// so both builds round identically.
macro_rules! dispatch {
    ($name:ident($($arg:expr),* $(,)?)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                unsafe { avx2::$name($($arg),*) }
            } else {
                portable::$name($($arg),*)
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            portable::$name($($arg),*)
        }
    }};
}

mod portable {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    pub(super) fn attention_rows(q: &[f64], k: &[f64], v: &[f64], d: usize, dv: usize, l: usize, out: &mut [f64], lse: &mut [f64]) {
        attention_rows_impl(q, k, v, d, dv, l, out, lse)
    }

    pub(super) fn attention_rows_backward(f: &AttnRows, g: AttnGrads) {
        attention_rows_backward_impl(f, g)
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn attention_rows(q: &[f64], k: &[f64], v: &[f64], d: usize, dv: usize, l: usize, out: &mut [f64], lse: &mut [f64]) {
        attention_rows_impl(q, k, v, d, dv, l, out, lse)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn attention_rows_backward(f: &AttnRows, g: AttnGrads) {
        attention_rows_backward_impl(f, g)
    }
}

/// Four-way accumulated dot product.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y = alpha · x`.
#[inline(always)]
fn scaled_copy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = alpha * xv;
    }
}

/// `y += alpha · x`.
#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline(always)]
fn row_max(row: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let chunks = row.chunks_exact(4);
    let tail = chunks.remainder().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for c in chunks {
        for t in 0..4 {
            if c[t] > acc[t] {
                acc[t] = c[t];
            }
        }
    }
    acc.iter().cloned().fold(tail, f64::max)
}

#[inline(always)]
fn row_sum(row: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = row.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for t in 0..4 {
            acc[t] += c[t];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Query rows handled together, so each key/value channel row is reused from
/// cache across the block.
const ROW_BLOCK: usize = 4;

/// Fills row `t` of `s` (rows of length `l`) with the logits `q_{i+t} · k_j`.
#[inline(always)]
fn logits_rows(q: &[f64], k: &[f64], d: usize, l: usize, i: usize, s: &mut [f64]) {
    let rows = s.len() / l;
    if d == 0 {
        s.fill(0.0);
        return;
    }
    for c in 0..d {
        let kc = &k[c * l..][..l];
        for (t, row) in s.chunks_exact_mut(l).enumerate().take(rows) {
            let a = q[c * l + i + t];
            if c == 0 {
                scaled_copy(a, kc, row);
            } else {
                axpy(a, kc, row);
            }
        }
    }
}

/// Replaces every `x` in `row` with `exp(x − shift)` for `x ≤ shift`.
///
/// Branch-free Cody–Waite reduction plus a degree-12 Taylor polynomial, so
/// the loop vectorises; agrees with `f64::exp` to a few ulp. Arguments below
/// `-708` flush to zero.
#[inline(always)]
pub(crate) fn exp_shifted(row: &mut [f64], shift: f64) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5·2^52: adding it rounds to an integer held in the low mantissa bits.
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
    ];
    for v in row.iter_mut() {
        let raw = *v - shift;
        let x = raw.max(-708.0);
        let t = x * LOG2E + MAGIC;
        let k = t - MAGIC;
        let r = (x - k * LN2_HI) - k * LN2_LO;
        // Estrin's scheme keeps the dependency chain short
        let r2 = r * r;
        let r4 = r2 * r2;
        let q0 = (C[0] + C[1] * r) + (C[2] + C[3] * r) * r2;
        let q1 = (C[4] + C[5] * r) + (C[6] + C[7] * r) * r2;
        let q2 = (C[8] + C[9] * r) + (C[10] + C[11] * r) * r2;
        let p = (q0 + q1 * r4) + (q2 + C[12] * r4) * (r4 * r4);
        let ki = t.to_bits().wrapping_sub(MAGIC.to_bits());
        let scale = f64::from_bits(ki.wrapping_add(1023) << 52);
        let keep = if raw >= -708.0 { 1.0 } else { 0.0 };
        *v = p * scale * keep;
    }
}

/// Dot-product attention over the last axis. `q`, `k`: `[N, D, L]`, `v`:
/// `[N, Dv, L]`; output `[N, Dv, L]` with column `i` equal to
/// `Σ_j softmax_j(q_i · k_j) v_j`. Also returns the per-row log-sum-exp,
/// which lets the backward pass rebuild the attention rows without storing
/// the `L × L` matrix.
pub(crate) fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, d, l, dv) = attention_dims(q, k, v)?;
    let mut out = vec![0.0; n * dv * l];
    let mut lse = vec![0.0; n * l];
    for b in 0..n {
        let ob = &mut out[b * dv * l..][..dv * l];
        let args = (&q.data()[b * d * l..][..d * l], &k.data()[b * d * l..][..d * l], &v.data()[b * dv * l..][..dv * l]);
        dispatch!(attention_rows(args.0, args.1, args.2, d, dv, l, ob, &mut lse[b * l..][..l]));
    }
    Ok((Tensor::new(&[n, dv, l], out)?, lse))
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn attention_rows_impl(q: &[f64], k: &[f64], v: &[f64], d: usize, dv: usize, l: usize, out: &mut [f64], lse: &mut [f64]) {
    let mut s = vec![0.0; ROW_BLOCK * l];
    let mut totals = [0.0; ROW_BLOCK];
    for i in (0..l).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(l - i);
        let block = &mut s[..rows * l];
        logits_rows(q, k, d, l, i, block);
        for (t, row) in block.chunks_exact_mut(l).enumerate() {
            let m = row_max(row);
            exp_shifted(row, m);
            totals[t] = row_sum(row);
            lse[i + t] = m + totals[t].ln();
        }
        for c in 0..dv {
            let vc = &v[c * l..][..l];
            for (t, row) in block.chunks_exact(l).enumerate() {
                out[c * l + i + t] = dot(row, vc) / totals[t];
            }
        }
    }
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, d, l) = match q.shape() {
        &[n, d, l] => (n, d, l),
        s => return Err(TensorError::shape("attention", "query [N, D, L]", s)),
    };
    if k.shape() != q.shape() {
        return Err(TensorError::shape("attention", format!("key {:?}", q.shape()), k.shape()));
    }
    let dv = match v.shape() {
        &[vn, dv, vl] if vn == n && vl == l => dv,
        s => return Err(TensorError::shape("attention", format!("value [{n}, Dv, {l}]"), s)),
    };
    Ok((n, d, l, dv))
}

/// Returns (dq, dk, dv). Attention rows are rebuilt from `lse` one query
/// at a time.
pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    lse: &[f64],
    dout: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, d, l, dv) = attention_dims(q, k, v)?;
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; k.numel()];
    let mut dvv = vec![0.0; v.numel()];
    for b in 0..n {
        let qs = d * l;
        let vs = dv * l;
        let fwd = AttnRows {
            q: &q.data()[b * qs..][..qs],
            k: &k.data()[b * qs..][..qs],
            v: &v.data()[b * vs..][..vs],
            out: &out.data()[b * vs..][..vs],
            dout: &dout[b * vs..][..vs],
            lse: &lse[b * l..][..l],
            d,
            dv,
            l,
        };
        let grads = AttnGrads { dq: &mut dq[b * qs..][..qs], dk: &mut dk[b * qs..][..qs], dv: &mut dvv[b * vs..][..vs] };
        dispatch!(attention_rows_backward(&fwd, grads));
    }
    Ok((dq, dk, dvv))
}

struct AttnRows<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    out: &'a [f64],
    dout: &'a [f64],
    lse: &'a [f64],
    d: usize,
    dv: usize,
    l: usize,
}

struct AttnGrads<'a> {
    dq: &'a mut [f64],
    dk: &'a mut [f64],
    dv: &'a mut [f64],
}

#[inline(always)]
fn attention_rows_backward_impl(f: &AttnRows, g: AttnGrads) {
    let (d, dv, l) = (f.d, f.dv, f.l);
    let mut p = vec![0.0; ROW_BLOCK * l];
    let mut ds = vec![0.0; ROW_BLOCK * l];
    let mut delta = [0.0; ROW_BLOCK];
    for i in (0..l).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(l - i);
        let (pb, db) = (&mut p[..rows * l], &mut ds[..rows * l]);
        logits_rows(f.q, f.k, d, l, i, pb);
        for (t, row) in pb.chunks_exact_mut(l).enumerate() {
            exp_shifted(row, f.lse[i + t]);
        }
        // dP_ij = dO_i · v_j, delta_i = dO_i · O_i
        if dv == 0 {
            db.fill(0.0);
        }
        delta[..rows].fill(0.0);
        for c in 0..dv {
            let vc = &f.v[c * l..][..l];
            let gdv = &mut g.dv[c * l..][..l];
            for (t, (prow, drow)) in pb.chunks_exact(l).zip(db.chunks_exact_mut(l)).enumerate() {
                let go = f.dout[c * l + i + t];
                delta[t] += go * f.out[c * l + i + t];
                if c == 0 {
                    scaled_copy(go, vc, drow);
                } else {
                    axpy(go, vc, drow);
                }
                axpy(go, prow, gdv);
            }
        }
        for (t, (prow, drow)) in pb.chunks_exact(l).zip(db.chunks_exact_mut(l)).enumerate() {
            for (x, &pv) in drow.iter_mut().zip(prow) {
                *x = pv * (*x - delta[t]);
            }
        }
        for c in 0..d {
            let kc = &f.k[c * l..][..l];
            let gdk = &mut g.dk[c * l..][..l];
            for (t, drow) in db.chunks_exact(l).enumerate() {
                g.dq[c * l + i + t] = dot(drow, kc);
                axpy(f.q[c * l + i + t], drow, gdk);
            }
        }
    }
}

//! Slice-level forward and backward kernels shared by the eager ops and the
//! tape.

use super::scalar::{s, Scalar};

/// `a (m×k) · b (k×n)`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    S::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out, false);
    out
}

/// `a (m×k) · bᵀ` where `b` is stored `n×k`; accumulates into `out`.
pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    S::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), out, true);
}

/// `aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`; accumulates into `out`.
pub fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    S::gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), out, true);
}

/// Zero-padded "same" cross-correlation.
///
/// `x: R×C_in×T`, `w: C_out×C_in×K`, `bias: C_out`, output `R×C_out×T`.
pub fn conv1d_same<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    rows: usize,
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * c_out * t];
    for r in 0..rows {
        for o in 0..c_out {
            let dst = &mut out[(r * c_out + o) * t..(r * c_out + o + 1) * t];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..c_in {
                let src = &x[(r * c_in + i) * t..(r * c_in + i + 1) * t];
                let ker = &w[(o * c_in + i) * k..(o * c_in + i + 1) * k];
                for (kk, &wv) in ker.iter().enumerate() {
                    let (out, inp) = tap_ranges(kk, k, t);
                    for (d, &sv) in dst[out].iter_mut().zip(&src[inp]) {
                        *d += wv * sv;
                    }
                }
            }
        }
    }
    out
}

/// Output and input index ranges that tap `kk` of a size-`k` "same" kernel
/// connects: output `t` reads input `t + kk − k/2`.
fn tap_ranges(kk: usize, k: usize, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let pad = k / 2;
    let lo = pad.saturating_sub(kk);
    let hi = (t + pad).saturating_sub(kk).min(t);
    if lo >= hi {
        return (0..0, 0..0);
    }
    (lo..hi, lo + kk - pad..hi + kk - pad)
}

/// Gradients of [`conv1d_same`] given upstream `gy`; each output slot is
/// optional and accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_same_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gy: &[S],
    rows: usize,
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
    mut gx: Option<&mut [S]>,
    mut gw: Option<&mut [S]>,
    mut gb: Option<&mut [S]>,
) {
    for r in 0..rows {
        for o in 0..c_out {
            let g = &gy[(r * c_out + o) * t..(r * c_out + o + 1) * t];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += g.iter().copied().sum::<S>();
            }
            for i in 0..c_in {
                let xo = (r * c_in + i) * t;
                let wo = (o * c_in + i) * k;
                for kk in 0..k {
                    let (out, inp) = tap_ranges(kk, k, t);
                    let g = &g[out];
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[wo + kk] += g.iter().zip(&x[xo..xo + t][inp.clone()]).map(|(&a, &b)| a * b).sum::<S>();
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[wo + kk];
                        for (d, &gv) in gx[xo..xo + t][inp].iter_mut().zip(g) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Layer normalization over contiguous slices of length `width`.
///
/// Returns `(y, x_hat, inv_std)` so the backward pass can reuse them.
pub fn layer_norm<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    width: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let slices = x.len() / width;
    let mut y = vec![S::zero(); x.len()];
    let mut x_hat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); slices];
    let inv_w = s::<S>(1.0 / width as f64);
    for r in 0..slices {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<S>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_w;
        let istd = S::one() / (var + s(eps)).sqrt();
        inv_std[r] = istd;
        for j in 0..width {
            let h = (row[j] - mean) * istd;
            x_hat[r * width + j] = h;
            y[r * width + j] = gamma[j] * h + beta[j];
        }
    }
    (y, x_hat, inv_std)
}

/// Backward of [`layer_norm`]; returns the input gradient and accumulates the
/// affine gradients when requested.
pub fn layer_norm_backward<S: Scalar>(
    gy: &[S],
    x_hat: &[S],
    inv_std: &[S],
    gamma: &[S],
    width: usize,
    mut g_gamma: Option<&mut [S]>,
    mut g_beta: Option<&mut [S]>,
) -> Vec<S> {
    let slices = gy.len() / width;
    let inv_w = s::<S>(1.0 / width as f64);
    let mut gx = vec![S::zero(); gy.len()];
    let mut gxh = vec![S::zero(); width];
    for r in 0..slices {
        let base = r * width;
        let mut mean_g = S::zero();
        let mut mean_gh = S::zero();
        for j in 0..width {
            let g = gy[base + j];
            let h = x_hat[base + j];
            if let Some(gg) = g_gamma.as_deref_mut() {
                gg[j] += g * h;
            }
            if let Some(gb) = g_beta.as_deref_mut() {
                gb[j] += g;
            }
            gxh[j] = g * gamma[j];
            mean_g += gxh[j];
            mean_gh += gxh[j] * h;
        }
        mean_g *= inv_w;
        mean_gh *= inv_w;
        for j in 0..width {
            gx[base + j] = inv_std[r] * (gxh[j] - mean_g - x_hat[base + j] * mean_gh);
        }
    }
    gx
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnShape {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Scaled dot-product attention over `q, k, v: (batch·tokens) × (heads·head_dim)`.
///
/// Returns the output (same layout) and the attention probabilities
/// `batch × heads × tokens × tokens`.
pub fn attention<S: Scalar>(q: &[S], k: &[S], v: &[S], shape: AttnShape) -> (Vec<S>, Vec<S>) {
    let AttnShape {
        batch,
        tokens: n,
        heads,
        head_dim: dh,
        causal,
    } = shape;
    let width = shape.width();
    let scale = s::<S>(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::zero(); batch * n * width];
    let mut probs = vec![S::zero(); batch * heads * n * n];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            for i in 0..n {
                let qi = &q[(b * n + i) * width + h * dh..][..dh];
                let limit = if causal { i + 1 } else { n };
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = S::neg_infinity();
                for j in 0..limit {
                    let kj = &k[(b * n + j) * width + h * dh..][..dh];
                    let dot: S = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum();
                    row[j] = dot * scale;
                    max = max.max(row[j]);
                }
                let mut total = S::zero();
                for r in row.iter_mut().take(limit) {
                    *r = (*r - max).exp();
                    total += *r;
                }
                for r in row.iter_mut().take(limit) {
                    *r /= total;
                }
                let oi = &mut out[(b * n + i) * width + h * dh..][..dh];
                for j in 0..limit {
                    let vj = &v[(b * n + j) * width + h * dh..][..dh];
                    let pij = row[j];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]: returns `(dq, dk, dv)`.
pub fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    gout: &[S],
    shape: AttnShape,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let AttnShape {
        batch,
        tokens: n,
        heads,
        head_dim: dh,
        causal,
    } = shape;
    let width = shape.width();
    let scale = s::<S>(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); n];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            for i in 0..n {
                let limit = if causal { i + 1 } else { n };
                let go = &gout[(b * n + i) * width + h * dh..][..dh];
                let row = &p[i * n..(i + 1) * n];
                let mut weighted = S::zero();
                for j in 0..limit {
                    let off = (b * n + j) * width + h * dh;
                    let vj = &v[off..off + dh];
                    dp[j] = go.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                    weighted += dp[j] * row[j];
                    for (d, &g) in dv[off..off + dh].iter_mut().zip(go) {
                        *d += row[j] * g;
                    }
                }
                let qi_off = (b * n + i) * width + h * dh;
                for j in 0..limit {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let kj_off = (b * n + j) * width + h * dh;
                    for d in 0..dh {
                        dq[qi_off + d] += ds * k[kj_off + d];
                        dk[kj_off + d] += ds * q[qi_off + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU used by GPT-2.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let inner = s::<S>(GELU_C) * (x + s::<S>(GELU_A) * x * x * x);
    s::<S>(0.5) * x * (S::one() + inner.tanh())
}

/// `max(v, floor)` that lets NaN through, unlike `f32::max`.
#[inline]
pub fn clamp_below<S: Scalar>(v: S, floor: S) -> S {
    if v < floor {
        floor
    } else {
        v
    }
}

/// `(gelu(x), gelu'(x))` sharing one `tanh`.
#[inline]
pub fn gelu_with_grad<S: Scalar>(x: S) -> (S, S) {
    let inner = s::<S>(GELU_C) * (x + s::<S>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = s::<S>(GELU_C) * (S::one() + s::<S>(3.0 * GELU_A) * x * x);
    let y = s::<S>(0.5) * x * (S::one() + t);
    let d = s::<S>(0.5) * (S::one() + t) + s::<S>(0.5) * x * (S::one() - t * t) * d_inner;
    (y, d)
}


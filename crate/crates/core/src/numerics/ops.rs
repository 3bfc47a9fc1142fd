//! Eager tensor operations. The differentiable versions live on
//! [`Graph`](super::Graph) and share the same kernels.

use rand::Rng;

use super::kernels::{self, AttnShape};
use super::rng::seeded;
use super::scalar::{s, Scalar};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention masking mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMask {
    #[default]
    Causal,
    #[serde(alias = "none")]
    Full,
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::from_vec(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(dim_err!("cannot multiply {a:?} by {b:?}")),
    }
}

pub(crate) fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "convolution kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let ([rows, c_in, t], [c_out, c_in_w, k]) = (x, w) else {
        return Err(dim_err!("conv1d expects x: R×C×T and kernels: O×C×K, got {x:?}, {w:?}"));
    };
    check_kernel_size(*k)?;
    if c_in != c_in_w || b != [*c_out] {
        return Err(dim_err!("conv1d channel mismatch: x {x:?}, kernels {w:?}, bias {b:?}"));
    }
    Ok((*rows, *c_in, *c_out, *t, *k))
}

/// Zero-padded cross-correlation that preserves the time length.
pub fn conv1d_same<S: Scalar>(x: &Tensor<S>, kernels: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, c_in, c_out, t, k) = conv_dims(x.shape(), kernels.shape(), bias.shape())?;
    let out = kernels::conv1d_same(x.data(), kernels.data(), bias.data(), rows, c_in, c_out, t, k);
    Tensor::from_vec(&[rows, c_out, t], out)
}

/// Layer normalization over the last axis.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let width = *x.shape().last().expect("tensor has rank >= 1");
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(dim_err!(
            "layer_norm affine params {:?}/{:?} do not match axis length {width}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gamma.data(), beta.data(), width, eps);
    Tensor::from_vec(x.shape(), y)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| kernels::clamp_below(v, S::zero()))
}

/// Scaled dot-product attention over `heads × tokens × d_head` inputs.
pub fn softmax_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: AttentionMask,
) -> Result<Tensor<S>> {
    let [heads, tokens, dh] = *q.shape() else {
        return Err(dim_err!("attention expects heads×tokens×d_head, got {:?}", q.shape()));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(dim_err!("attention Q/K/V shapes differ"));
    }
    let shape = AttnShape {
        batch: heads,
        tokens,
        heads: 1,
        head_dim: dh,
        causal: mask == AttentionMask::Causal,
    };
    let (out, _) = kernels::attention(q.data(), k.data(), v.data(), shape);
    Tensor::from_vec(q.shape(), out)
}

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted dropout keep-mask: entries are `0` or `1/(1-p)`.
pub(crate) fn dropout_mask<S: Scalar>(n: usize, p: f64, rng: &mut impl Rng) -> Vec<S> {
    let keep = s::<S>(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
        .collect()
}

pub fn dropout<S: Scalar>(x: &Tensor<S>, p: f64, training: bool, seed: u64) -> Result<Tensor<S>> {
    check_dropout(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<S>(x.numel(), p, &mut seeded(seed));
    let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Tensor::from_vec(x.shape(), data)
}

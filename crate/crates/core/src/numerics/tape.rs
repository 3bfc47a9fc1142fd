//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards visits every node after
//! all of its consumers.

use super::kernels::{self, AttnShape};
use super::ops::{self, AttentionMask};
use super::param::{ParamId, ParamStore};
use super::rng::{seeded, Rng};
use super::scalar::{s, Scalar};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Floor(Var, S),
    /// Input and the local derivative saved by the forward pass.
    Gelu(Var, Vec<S>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<S>,
        inv_std: Vec<S>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    GraphAggregate {
        adj: Tensor<S>,
        x: Var,
    },
    ChannelExpand {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    SwapLast(Var),
    SelectChannel(Var, usize),
    MeanChannels(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<S>,
    },
    Dropout(Var, Vec<S>),
    AddPositional(Var, Var, usize),
    Sum(Var),
    Mean(Var),
    Mae(Var, Tensor<S>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    training: bool,
    rng: Rng,
    min_kink: f64,
}

impl<S: Scalar> Graph<S> {
    /// `training` enables dropout; `seed` fixes its masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: seeded(seed),
            min_kink: f64::INFINITY,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Smallest distance of any ReLU, floor or absolute-value input to its
    /// kink seen so far.
    pub fn kink_margin(&self) -> f64 {
        self.min_kink
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn track_kinks<'a>(&mut self, distances: impl Iterator<Item = &'a S>) {
        for d in distances {
            self.min_kink = self.min_kink.min(d.as_f64().abs());
        }
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; only trainable ones get gradients.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(bias) != [width] {
            return Err(dim_err!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(width) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v += bb);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.track_kinks(value.data().iter());
        let out = ops::relu(&value);
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Elementwise `max(x, floor)`.
    pub fn floor(&mut self, x: Var, floor: S) -> Var {
        let value = self.value(x).clone();
        let dist: Vec<S> = value.data().iter().map(|&v| v - floor).collect();
        self.track_kinks(dist.iter());
        let out = value.map(|v| kernels::clamp_below(v, floor));
        let ng = self.needs(x);
        self.push(out, Op::Floor(x, floor), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ng = self.needs(x);
        let xv = self.value(x);
        let (out, slope) = if ng {
            let (y, d): (Vec<S>, Vec<S>) = xv.data().iter().map(|&v| kernels::gelu_with_grad(v)).unzip();
            (Tensor::from_vec(xv.shape(), y).expect("same shape"), d)
        } else {
            (xv.map(kernels::gelu), Vec::new())
        };
        self.push(out, Op::Gelu(x, slope), ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(dim_err!(
                "layer_norm params {:?}/{:?} do not match axis length {width}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (y, x_hat, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            width,
            eps,
        );
        let out = Tensor::from_vec(self.shape(x), y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv1d_same(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv1d { x, w, b }, ng))
    }

    /// Multiplies every consecutive block of `N` rows of `x` by the constant
    /// `N×N` matrix `adj`.
    pub fn graph_aggregate(&mut self, adj: &Tensor<S>, x: Var) -> Result<Var> {
        let n = adj.shape()[0];
        let &[rows, width] = self.shape(x) else {
            return Err(dim_err!("graph_aggregate expects a matrix, got {:?}", self.shape(x)));
        };
        if adj.shape() != [n, n] || rows % n != 0 {
            return Err(dim_err!(
                "adjacency {:?} does not match {rows} node rows",
                adj.shape()
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); rows * width];
        for (src, dst) in xv.chunks(n * width).zip(out.chunks_mut(n * width)) {
            S::gemm(n, n, width, adj.data(), (n as isize, 1), src, (width as isize, 1), dst, false);
        }
        let out = Tensor::from_vec(&[rows, width], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GraphAggregate { adj: adj.clone(), x }, ng))
    }

    /// `out[r, f, t] = x[r, t] · w[0, f] + b[f]` for `x: R×T`, `w: 1×F`, `b: F`.
    pub fn channel_expand(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let &[rows, t] = self.shape(x) else {
            return Err(dim_err!("channel_expand expects R×T, got {:?}", self.shape(x)));
        };
        let &[1, f] = self.shape(w) else {
            return Err(dim_err!("channel weight must be 1×F, got {:?}", self.shape(w)));
        };
        if self.shape(b) != [f] {
            return Err(dim_err!("channel bias must have length {f}"));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * f * t);
        for r in 0..rows {
            let row = &xv[r * t..(r + 1) * t];
            for c in 0..f {
                out.extend(row.iter().map(|&v| v * wv[c] + bv[c]));
            }
        }
        let out = Tensor::from_vec(&[rows, f, t], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::ChannelExpand { x, w, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Transposes the last two axes of a rank-3 tensor.
    pub fn swap_last_axes(&mut self, x: Var) -> Result<Var> {
        let &[r, a, b] = self.shape(x) else {
            return Err(dim_err!("swap_last_axes expects rank 3, got {:?}", self.shape(x)));
        };
        let out = Tensor::from_vec(&[r, b, a], swap_last(self.value(x).data(), r, a, b))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SwapLast(x), ng))
    }

    /// `x: R×C×D → R×D`, keeping channel `channel`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let &[rows, c, d] = self.shape(x) else {
            return Err(dim_err!("select_channel expects R×C×D, got {:?}", self.shape(x)));
        };
        if channel >= c {
            return Err(dim_err!("channel {channel} out of range for {c} channels"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            out.extend_from_slice(&xv[(r * c + channel) * d..(r * c + channel + 1) * d]);
        }
        let out = Tensor::from_vec(&[rows, d], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SelectChannel(x, channel), ng))
    }

    /// `x: R×C×D → R×D`, averaging over channels.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let &[rows, c, d] = self.shape(x) else {
            return Err(dim_err!("mean_channels expects R×C×D, got {:?}", self.shape(x)));
        };
        let xv = self.value(x).data();
        let inv = s::<S>(1.0 / c as f64);
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            for ch in 0..c {
                let src = &xv[(r * c + ch) * d..(r * c + ch + 1) * d];
                out[r * d..(r + 1) * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, &v)| *o += v * inv);
            }
        }
        let out = Tensor::from_vec(&[rows, d], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanChannels(x), ng))
    }

    /// Multi-head attention over `q, k, v: (batch·tokens) × width`, with
    /// heads laid out as contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize, mask: AttentionMask) -> Result<Var> {
        let &[rows, width] = self.shape(q) else {
            return Err(dim_err!("attention expects a matrix, got {:?}", self.shape(q)));
        };
        if self.shape(k) != [rows, width] || self.shape(v) != [rows, width] {
            return Err(dim_err!("attention Q/K/V shapes differ"));
        }
        if tokens == 0 || rows % tokens != 0 || heads == 0 || width % heads != 0 {
            return Err(dim_err!(
                "cannot split {rows}×{width} into {tokens} tokens and {heads} heads"
            ));
        }
        let shape = AttnShape {
            batch: rows / tokens,
            tokens,
            heads,
            head_dim: width / heads,
            causal: mask == AttentionMask::Causal,
        };
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
        );
        let out = Tensor::from_vec(&[rows, width], out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        ops::check_dropout(p)?;
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<S>(self.value(x).numel(), p, &mut self.rng);
        let out = Tensor::from_vec(
            self.shape(x),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&a, &m)| a * m)
                .collect(),
        )?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Adds row `i` of `pos` to token `i` of every block of `tokens` rows.
    pub fn add_positional(&mut self, x: Var, pos: Var, tokens: usize) -> Result<Var> {
        let &[rows, width] = self.shape(x) else {
            return Err(dim_err!("add_positional expects a matrix"));
        };
        let &[max_tokens, pw] = self.shape(pos) else {
            return Err(dim_err!("positional table must be a matrix"));
        };
        if pw != width || tokens > max_tokens || rows % tokens != 0 {
            return Err(dim_err!(
                "positional table {:?} incompatible with {rows}×{width} and {tokens} tokens",
                self.shape(pos)
            ));
        }
        let pv = self.value(pos).data().to_vec();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(width).enumerate() {
            let p = &pv[(r % tokens) * width..][..width];
            row.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        let ng = self.needs(x) || self.needs(pos);
        Ok(self.push(out, Op::AddPositional(x, pos, tokens), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / s(v.numel() as f64));
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let p = self.value(pred).clone();
        let diff = p.zip_map(target, |a, b| a - b)?;
        self.track_kinks(diff.data().iter());
        let loss = diff.data().iter().map(|d| d.abs()).sum::<S>() / s(diff.numel() as f64);
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mae(pred, target.clone()), ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_bt_acc(g, val(*b), m, n, k, ga);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_at_acc(val(*a), g, k, m, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*bias) {
                    let width = shape(*bias)[0];
                    let gb = slot(grads, *bias, width);
                    for row in g.chunks(width) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
            Op::Relu(x) => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > S::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Floor(x, floor) => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > *floor {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(x, slope) => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gv), &dv) in gx.iter_mut().zip(g).zip(slope) {
                    *d += gv * dv;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let width = shape(*gamma)[0];
                let mut gg = needs(*gamma).then(|| vec![S::zero(); width]);
                let mut gb = needs(*beta).then(|| vec![S::zero(); width]);
                let gx = kernels::layer_norm_backward(
                    g,
                    x_hat,
                    inv_std,
                    val(*gamma),
                    width,
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if needs(*x) {
                    add_into(slot(grads, *x, gx.len()), &gx);
                }
                if let Some(gg) = gg {
                    add_into(slot(grads, *gamma, width), &gg);
                }
                if let Some(gb) = gb {
                    add_into(slot(grads, *beta, width), &gb);
                }
            }
            Op::Conv1d { x, w, b } => {
                let (rows, c_in, t) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let (c_out, k) = (shape(*w)[0], shape(*w)[2]);
                let mut gx = needs(*x).then(|| vec![S::zero(); rows * c_in * t]);
                let mut gw = needs(*w).then(|| vec![S::zero(); c_out * c_in * k]);
                let mut gb = needs(*b).then(|| vec![S::zero(); c_out]);
                kernels::conv1d_same_backward(
                    val(*x),
                    val(*w),
                    g,
                    rows,
                    c_in,
                    c_out,
                    t,
                    k,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        add_into(slot(grads, v, part.len()), &part);
                    }
                }
            }
            Op::GraphAggregate { adj, x } => {
                let n = adj.shape()[0];
                let width = shape(*x)[1];
                let gx = slot(grads, *x, g.len());
                for (src, dst) in g.chunks(n * width).zip(gx.chunks_mut(n * width)) {
                    S::gemm(n, n, width, adj.data(), (1, n as isize), src, (width as isize, 1), dst, true);
                }
            }
            Op::ChannelExpand { x, w, b } => {
                let (rows, t) = (shape(*x)[0], shape(*x)[1]);
                let f = shape(*b)[0];
                let (xv, wv) = (val(*x), val(*w));
                if needs(*x) {
                    let gx = slot(grads, *x, rows * t);
                    for r in 0..rows {
                        for c in 0..f {
                            let gr = &g[(r * f + c) * t..][..t];
                            for (d, &gv) in gx[r * t..(r + 1) * t].iter_mut().zip(gr) {
                                *d += gv * wv[c];
                            }
                        }
                    }
                }
                if needs(*w) || needs(*b) {
                    let mut gw = vec![S::zero(); f];
                    let mut gb = vec![S::zero(); f];
                    for r in 0..rows {
                        let xr = &xv[r * t..(r + 1) * t];
                        for c in 0..f {
                            let gr = &g[(r * f + c) * t..][..t];
                            gw[c] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>();
                            gb[c] += gr.iter().copied().sum::<S>();
                        }
                    }
                    if needs(*w) {
                        add_into(slot(grads, *w, f), &gw);
                    }
                    if needs(*b) {
                        add_into(slot(grads, *b, f), &gb);
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::SwapLast(x) => {
                let (r, a, b) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let back = swap_last(g, r, b, a);
                add_into(slot(grads, *x, g.len()), &back);
            }
            Op::SelectChannel(x, channel) => {
                let (rows, c, d) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let gx = slot(grads, *x, rows * c * d);
                for r in 0..rows {
                    add_into(&mut gx[(r * c + channel) * d..][..d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::MeanChannels(x) => {
                let (rows, c, d) = (shape(*x)[0], shape(*x)[1], shape(*x)[2]);
                let inv = s::<S>(1.0 / c as f64);
                let gx = slot(grads, *x, rows * c * d);
                for r in 0..rows {
                    for ch in 0..c {
                        let dst = &mut gx[(r * c + ch) * d..][..d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(o, &v)| *o += v * inv);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape: attn,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, *attn);
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        add_into(slot(grads, var, part.len()), &part);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::AddPositional(x, pos, tokens) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(*pos) {
                    let (max_tokens, width) = (shape(*pos)[0], shape(*pos)[1]);
                    let gp = slot(grads, *pos, max_tokens * width);
                    for (r, row) in g.chunks(width).enumerate() {
                        add_into(&mut gp[(r % *tokens) * width..][..width], row);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let share = g[0] / s(n as f64);
                slot(grads, *x, n).iter_mut().for_each(|d| *d += share);
            }
            Op::Mae(pred, target) => {
                let n = target.numel();
                let share = g[0] / s(n as f64);
                let gp = slot(grads, *pred, n);
                for ((d, &p), &t) in gp.iter_mut().zip(val(*pred)).zip(target.data()) {
                    if p > t {
                        *d += share;
                    } else if p < t {
                        *d -= share;
                    }
                }
            }
        }
    }
}

fn swap_last<S: Scalar>(src: &[S], r: usize, a: usize, b: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for rr in 0..r {
        let base = rr * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = src[base + i * b + j];
            }
        }
    }
    out
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every trainable parameter leaf into the store.
    pub fn accumulate_into(&self, graph: &Graph<S>, store: &mut ParamStore<S>) {
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                if node.needs_grad {
                    store.accumulate_grad(*id, g);
                }
            }
        }
    }
}

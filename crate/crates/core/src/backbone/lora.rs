use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::stream;
use crate::numerics::{init, ops, s, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

const C_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if self.rank > width {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds projection width {width}",
                self.rank
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        ops::check_dropout(self.dropout)
    }
}

/// Low-rank update `(alpha/r)·dropout(h0)·B·C` with `B: d×r` zero and
/// `C: r×k` Gaussian at construction.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub b: ParamId,
    pub c: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        d: usize,
        k: usize,
        cfg: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(d.min(k))?;
        let b = store.add(format!("{prefix}.lora_b"), Tensor::zeros(&[d, cfg.rank]), true)?;
        let c_name = format!("{prefix}.lora_c");
        let c = store.add(
            &c_name,
            init::normal(&[cfg.rank, k], C_INIT_STD, &mut stream(seed, &c_name)),
            true,
        )?;
        Ok(Self {
            b,
            c,
            scale: cfg.scale(),
            dropout: cfg.dropout,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, h0: Var) -> Result<Var> {
        let dropped = g.dropout(h0, self.dropout)?;
        let b = g.param(store, self.b);
        let c = g.param(store, self.c);
        let low = g.matmul(dropped, b)?;
        let delta = g.matmul(low, c)?;
        Ok(g.scale(delta, s(self.scale)))
    }
}

/// `h0·W0 + (alpha/r)·dropout(h0)·B·C`, eager and without bias.
pub fn lora_projection<S: Scalar>(
    h0: &Tensor<S>,
    w0: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    cfg: &LoraConfig,
    training: bool,
    seed: u64,
) -> Result<Tensor<S>> {
    let d = w0.shape()[0];
    let k = w0.shape()[1];
    if b.shape() != [d, cfg.rank] || c.shape() != [cfg.rank, k] {
        return Err(Error::Config(format!(
            "adapter shapes {:?}/{:?} do not match W0 {:?} at rank {}",
            b.shape(),
            c.shape(),
            w0.shape(),
            cfg.rank
        )));
    }
    let mut g = Graph::new(training, seed);
    let h = g.input(h0.clone());
    let w = g.input(w0.clone());
    let bv = g.input(b.clone());
    let cv = g.input(c.clone());
    let base = g.matmul(h, w)?;
    let dropped = g.dropout(h, cfg.dropout)?;
    let low = g.matmul(dropped, bv)?;
    let delta = g.matmul(low, cv)?;
    let delta = g.scale(delta, s(cfg.scale()));
    let out = g.add(base, delta)?;
    Ok(g.value(out).clone())
}

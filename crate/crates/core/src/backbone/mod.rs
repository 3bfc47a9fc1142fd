//! GPT-2-style decoder stack with frozen base weights and low-rank adapters
//! on the query and key projections.

mod checkpoint;
mod lora;

pub use checkpoint::{load_params, load_params_matching, save_params, trainable_report, TrainableReport};
pub use lora::{lora_projection, LoraAdapter, LoraConfig};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::ops::AttentionMask;
use crate::numerics::rng::stream;
use crate::numerics::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var, LAYER_NORM_EPS};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    None,
    Learned,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    #[default]
    Tiny,
    Gpt2Small,
}

impl std::str::FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "gpt2-small" => Ok(Self::Gpt2Small),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?} (expected tiny or gpt2-small)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    #[serde(default)]
    pub attention_mask: AttentionMask,
    #[serde(default)]
    pub positional: Positional,
    pub max_tokens: usize,
}

impl BackboneConfig {
    pub fn new(layers: usize, heads: usize, width: usize) -> Self {
        Self {
            layers,
            heads,
            width,
            ffn_width: 4 * width,
            attention_mask: AttentionMask::Causal,
            positional: Positional::None,
            max_tokens: 1024,
        }
    }

    pub fn tiny() -> Self {
        Self::new(2, 4, 64)
    }

    pub fn gpt2_small() -> Self {
        Self::new(12, 12, 768)
    }

    pub fn preset(p: BackbonePreset) -> Self {
        match p {
            BackbonePreset::Tiny => Self::tiny(),
            BackbonePreset::Gpt2Small => Self::gpt2_small(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.ffn_width == 0 || self.max_tokens == 0 {
            return Err(Error::Config(format!("backbone dimensions must be positive: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        weight: Tensor<S>,
        bias: Tensor<S>,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), weight, trainable)?,
            bias: store.add(format!("{prefix}.bias"), bias, trainable)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn dims<S: Scalar>(&self, store: &ParamStore<S>) -> (usize, usize) {
        let s = store.value(self.weight).shape();
        (s[0], s[1])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[width]), false)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width]), false)?,
        })
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc: Linear,
    pub proj: Linear,
    pub lora_q: Option<LoraAdapter>,
    pub lora_k: Option<LoraAdapter>,
}

fn frozen_linear<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Linear> {
    let name = format!("{prefix}.weight");
    let w = init::normal(&[d_in, d_out], INIT_STD, &mut stream(seed, &name));
    Linear::new(store, prefix, w, Tensor::zeros(&[d_out]), false)
}

impl TransformerBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, i: usize, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let d = cfg.width;
        let p = |part: &str| format!("block.{i}.{part}");
        Ok(Self {
            ln1: LayerNormParams::new(store, &p("ln1"), d)?,
            q: frozen_linear(store, &p("attn.q"), d, d, seed)?,
            k: frozen_linear(store, &p("attn.k"), d, d, seed)?,
            v: frozen_linear(store, &p("attn.v"), d, d, seed)?,
            o: frozen_linear(store, &p("attn.o"), d, d, seed)?,
            ln2: LayerNormParams::new(store, &p("ln2"), d)?,
            fc: frozen_linear(store, &p("ffn.fc"), d, cfg.ffn_width, seed)?,
            proj: frozen_linear(store, &p("ffn.proj"), cfg.ffn_width, d, seed)?,
            lora_q: None,
            lora_k: None,
        })
    }

    fn projection<S: Scalar>(
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        h0: Var,
        base: &Linear,
        adapter: Option<&LoraAdapter>,
    ) -> Result<Var> {
        let h = base.forward(g, store, h0)?;
        match adapter {
            Some(a) => {
                let delta = a.forward(g, store, h0)?;
                g.add(h, delta)
            }
            None => Ok(h),
        }
    }

    /// `x: (batch·tokens)×D`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        tokens: usize,
        cfg: &BackboneConfig,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let q = Self::projection(g, store, h, &self.q, self.lora_q.as_ref())?;
        let k = Self::projection(g, store, h, &self.k, self.lora_k.as_ref())?;
        let v = self.v.forward(g, store, h)?;
        let a = g.attention(q, k, v, tokens, cfg.heads, cfg.attention_mask)?;
        let a = self.o.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.proj.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    pub positional: Option<ParamId>,
    pub lora: Option<LoraConfig>,
}

impl Backbone {
    /// Builds a randomly initialized, fully frozen stack.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(store, i, &config, seed))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNormParams::new(store, "ln_f", config.width)?;
        let positional = match config.positional {
            Positional::None => None,
            Positional::Learned => Some(store.add(
                "pos.weight",
                init::normal(&[config.max_tokens, config.width], INIT_STD, &mut stream(seed, "pos.weight")),
                false,
            )?),
        };
        Ok(Self {
            config,
            blocks,
            ln_f,
            positional,
            lora: None,
        })
    }

    /// Adds trainable adapters to every query and key projection.
    pub fn attach_lora<S: Scalar>(&mut self, store: &mut ParamStore<S>, lora: LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("adapters are already attached".into()));
        }
        lora.validate(self.config.width)?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let d = self.config.width;
            block.lora_q = Some(LoraAdapter::new(store, &format!("block.{i}.attn.q"), d, d, &lora, seed)?);
            block.lora_k = Some(LoraAdapter::new(store, &format!("block.{i}.attn.k"), d, d, &lora, seed)?);
        }
        self.lora = Some(lora);
        Ok(())
    }

    pub fn adapter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| usize::from(b.lora_q.is_some()) + usize::from(b.lora_k.is_some()))
            .sum()
    }

    /// `x: (batch·tokens)×D` → same shape, after every block and the final
    /// layer norm.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, tokens: usize) -> Result<Var> {
        let &[rows, width] = g.shape(x) else {
            return Err(dim_err!("backbone expects a token matrix, got {:?}", g.shape(x)));
        };
        if width != self.config.width {
            return Err(dim_err!("tokens have width {width}, backbone expects {}", self.config.width));
        }
        if tokens > self.config.max_tokens {
            return Err(Error::Capacity(format!(
                "{tokens} tokens exceed the backbone limit of {}",
                self.config.max_tokens
            )));
        }
        if tokens == 0 || rows % tokens != 0 {
            return Err(dim_err!("{rows} rows do not split into sequences of {tokens} tokens"));
        }
        let mut h = x;
        if let Some(pos) = self.positional {
            let p = g.param(store, pos);
            h = g.add_positional(h, p, tokens)?;
        }
        for block in &self.blocks {
            h = block.forward(g, store, h, tokens, &self.config)?;
        }
        self.ln_f.forward(g, store, h)
    }
}

/// Eager single-sequence forward in inference mode: `tokens: N×D` → `N×D`.
pub fn backbone_forward<S: Scalar>(backbone: &Backbone, store: &ParamStore<S>, tokens: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new(false, 0);
    let x = g.input(tokens.clone());
    let n = tokens.shape()[0];
    let y = backbone.forward(&mut g, store, x, n)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests;

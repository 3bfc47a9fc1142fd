//! The end-to-end forecaster: embedding, backbone, linear head and the
//! training loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{load_params, load_params_matching, save_params, Backbone, BackboneConfig, Linear, LoraConfig};
use crate::dataio::{NormStats, TensorContainer};
use crate::embedding::{ChannelReduction, EmbeddingConfig, InputEmbedding, LnAxis};
use crate::error::{dim_err, Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::numerics::rng::stream;
use crate::numerics::{init, s, Graph, ParamStore, Scalar, Tensor, Var};

const CONFIG_KEY: &str = "model_config";
const NORM_KEY: &str = "norm_stats";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_steps: usize,
    pub horizon: usize,
    pub channels: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub ln_axis: LnAxis,
    #[serde(default)]
    pub reduction: ChannelReduction,
    pub graph_embedding: bool,
    pub sequence_embedding: bool,
    pub backbone: BackboneConfig,
    /// `None` leaves the backbone without adapters.
    pub lora: Option<LoraConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_steps: 12,
            horizon: 12,
            channels: 64,
            kernel_size: 3,
            ln_axis: LnAxis::default(),
            reduction: ChannelReduction::default(),
            graph_embedding: true,
            sequence_embedding: true,
            backbone: BackboneConfig::tiny(),
            lora: Some(LoraConfig::default()),
        }
    }
}

impl ModelConfig {
    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            channels: self.channels,
            input_steps: self.input_steps,
            width: self.backbone.width,
            kernel_size: self.kernel_size,
            ln_axis: self.ln_axis,
            reduction: self.reduction,
            graph_embedding: self.graph_embedding,
            sequence_embedding: self.sequence_embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_steps == 0 || self.horizon == 0 {
            return Err(Error::Config("input and output lengths must be at least 1".into()));
        }
        self.backbone.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TpllmModel {
    pub config: ModelConfig,
    pub embedding: InputEmbedding,
    pub backbone: Backbone,
    pub head: Linear,
    /// Normalized value of zero flow; predictions never fall below it.
    pub zero_level: f64,
}

impl TpllmModel {
    /// Builds every parameter into `store`. Parameter values depend only on
    /// `seed` and the parameter's name, so toggling adapters or ablations
    /// leaves the shared tensors identical.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let embedding = InputEmbedding::new(store, config.embedding(), seed)?;
        let mut backbone = Backbone::new(store, config.backbone.clone(), seed)?;
        if let Some(lora) = &config.lora {
            backbone.attach_lora(store, lora.clone(), seed)?;
        }
        let d = config.backbone.width;
        let bound = 1.0 / (d as f64).sqrt();
        let head = Linear::new(
            store,
            "head",
            init::uniform(&[d, config.horizon], bound, &mut stream(seed, "head.weight")),
            init::uniform(&[config.horizon], bound, &mut stream(seed, "head.bias")),
            true,
        )?;
        Ok(Self {
            config,
            embedding,
            backbone,
            head,
            zero_level: 0.0,
        })
    }

    pub fn with_norm(mut self, norm: &NormStats) -> Self {
        self.zero_level = norm.zero_level();
        self
    }

    /// Attaches adapters to a model built without them.
    pub fn attach_lora<S: Scalar>(&mut self, store: &mut ParamStore<S>, lora: LoraConfig, seed: u64) -> Result<()> {
        self.backbone.attach_lora(store, lora.clone(), seed)?;
        self.config.lora = Some(lora);
        Ok(())
    }

    /// `x: (B·N)×T` normalized histories, node-major within each sample →
    /// `(B·N)×T'`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adj: &NormalizedAdjacency<S>,
    ) -> Result<Var> {
        let tokens = self.embedding.forward(g, store, x, adj)?;
        self.forward_tokens(g, store, tokens, adj.n_nodes())
    }

    /// Runs from the fused `R×F×D` tensor onward.
    pub fn forward_from_fused<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, m: Var, nodes: usize) -> Result<Var> {
        let tokens = self.embedding.select(g, m)?;
        self.forward_tokens(g, store, tokens, nodes)
    }

    fn forward_tokens<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: Var, nodes: usize) -> Result<Var> {
        let h = self.backbone.forward(g, store, tokens, nodes)?;
        let y = self.head.forward(g, store, h)?;
        Ok(g.floor(y, s(self.zero_level)))
    }

    /// Inference on one sample: `x: N×T` normalized → `N×T'` normalized.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>, adj: &NormalizedAdjacency<S>) -> Result<Tensor<S>> {
        if x.shape() != [adj.n_nodes(), self.config.input_steps] {
            return Err(dim_err!(
                "input {:?} does not match {} nodes × {} steps",
                x.shape(),
                adj.n_nodes(),
                self.config.input_steps
            ));
        }
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv, adj)?;
        Ok(g.value(y).clone())
    }

    /// Replaces the frozen transformer weights with converted pretrained ones
    /// named per the checkpoint scheme; adapters, embedding and head stay as
    /// they are. Every base tensor must be present.
    pub fn load_backbone_weights<S: Scalar>(&self, store: &mut ParamStore<S>, path: impl AsRef<Path>) -> Result<usize> {
        let c = TensorContainer::load(path)?;
        let is_base = |name: &str| {
            (name.starts_with("block.") || name.starts_with("ln_f.") || name.starts_with("pos."))
                && !name.contains(".lora_")
        };
        let mut only_base = TensorContainer::new();
        for (name, t) in c.tensors {
            if is_base(&name) {
                only_base.insert(name, t);
            }
        }
        load_params_matching(store, &only_base, is_base)
    }

    /// Writes all parameters plus the config and normalizer to `path`.
    pub fn save_checkpoint<S: Scalar>(&self, store: &ParamStore<S>, norm: &NormStats, path: impl AsRef<Path>) -> Result<()> {
        let mut c = TensorContainer::new();
        save_params(store, &mut c);
        c.metadata.insert(CONFIG_KEY.into(), serde_json::to_string(&self.config).expect("config serializes"));
        c.metadata.insert(NORM_KEY.into(), serde_json::to_string(norm).expect("norm serializes"));
        c.save(path)
    }

    /// Rebuilds a model from a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Self, ParamStore<S>, NormStats)> {
        let c = TensorContainer::load(path)?;
        let config: ModelConfig = read_meta(&c, CONFIG_KEY)?;
        Self::from_container(&c, config)
    }

    /// Loads a checkpoint into the architecture described by `config`;
    /// disagreement between the two is a checkpoint error.
    pub fn load_checkpoint_as<S: Scalar>(path: impl AsRef<Path>, config: ModelConfig) -> Result<(Self, ParamStore<S>, NormStats)> {
        let c = TensorContainer::load(path)?;
        Self::from_container(&c, config)
    }

    fn from_container<S: Scalar>(c: &TensorContainer, config: ModelConfig) -> Result<(Self, ParamStore<S>, NormStats)> {
        let norm: NormStats = read_meta(c, NORM_KEY)?;
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, 0)?.with_norm(&norm);
        load_params(&mut store, c)?;
        Ok((model, store, norm))
    }
}

fn read_meta<T: for<'de> Deserialize<'de>>(c: &TensorContainer, key: &str) -> Result<T> {
    let raw = c
        .metadata
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key}")))?;
    serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad {key} metadata: {e}")))
}

/// Mean absolute error over every element.
pub fn loss_mae<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if pred.shape() != target.shape() {
        return Err(dim_err!("loss shapes differ: {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<S>();
    Ok(total / s(pred.numel() as f64))
}

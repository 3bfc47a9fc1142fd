//! Input embedding: graph and sequence embeddings are fused, normalized,
//! projected from the time axis to the backbone width, and reduced to one
//! token per sensor.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{GcnLayer, NormalizedAdjacency};
use crate::numerics::ops::check_kernel_size;
use crate::numerics::rng::stream;
use crate::numerics::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var, LAYER_NORM_EPS};

/// Axis the fusion layer norm runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LnAxis {
    /// Each channel's `T`-step sequence.
    Time,
    /// The `F` channels at each time step. Normalizing over time would erase
    /// the level of every sequence before the projection sees it.
    #[default]
    Channel,
}

/// How `M: N×F×D` becomes one token per node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelReduction {
    /// Keep channel `F−1`.
    #[default]
    Last,
    /// Average over channels. Under channel-axis layer norm this is
    /// input-independent until `gamma` departs from a constant.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub channels: usize,
    pub input_steps: usize,
    pub width: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub ln_axis: LnAxis,
    #[serde(default)]
    pub reduction: ChannelReduction,
    #[serde(default = "yes")]
    pub graph_embedding: bool,
    #[serde(default = "yes")]
    pub sequence_embedding: bool,
}

fn yes() -> bool {
    true
}

impl EmbeddingConfig {
    pub fn new(channels: usize, input_steps: usize, width: usize) -> Self {
        Self {
            channels,
            input_steps,
            width,
            kernel_size: 3,
            ln_axis: LnAxis::default(),
            reduction: ChannelReduction::default(),
            graph_embedding: true,
            sequence_embedding: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.input_steps == 0 || self.width == 0 {
            return Err(Error::Config(format!("embedding dimensions must be positive: {self:?}")));
        }
        if !self.graph_embedding && !self.sequence_embedding {
            return Err(Error::Config(
                "at least one of the graph and sequence embeddings must be enabled".into(),
            ));
        }
        check_kernel_size(self.kernel_size)
    }
}

/// `SE_F`: a single-input-channel 1-D convolution with `F` filters.
#[derive(Clone, Debug)]
pub struct SequenceEmbedding {
    pub kernels: ParamId,
    pub bias: ParamId,
}

impl SequenceEmbedding {
    fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize, kernel_size: usize, seed: u64) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let bound = 1.0 / (kernel_size as f64).sqrt();
        let kernels = store.add(&name, init::uniform(&[channels, 1, kernel_size], bound, &mut stream(seed, &name)), true)?;
        let name = format!("{prefix}.bias");
        let bias = store.add(&name, init::uniform(&[channels], bound, &mut stream(seed, &name)), true)?;
        Ok(Self { kernels, bias })
    }

    /// `x: R×T` → `R×F×T`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let &[rows, t] = g.shape(x) else {
            return Err(dim_err!("sequence embedding expects R×T, got {:?}", g.shape(x)));
        };
        let x3 = g.reshape(x, &[rows, 1, t])?;
        let w = g.param(store, self.kernels);
        let b = g.param(store, self.bias);
        g.conv1d_same(x3, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct InputEmbedding {
    pub config: EmbeddingConfig,
    pub gcn: Option<GcnLayer>,
    pub conv: Option<SequenceEmbedding>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl InputEmbedding {
    /// Registers parameters under `embed.*`.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: EmbeddingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.channels;
        let t = config.input_steps;
        let gcn = config
            .graph_embedding
            .then(|| GcnLayer::new(store, "embed.gcn", f, seed))
            .transpose()?;
        let conv = config
            .sequence_embedding
            .then(|| SequenceEmbedding::new(store, "embed.conv", f, config.kernel_size, seed))
            .transpose()?;
        let ln_width = match config.ln_axis {
            LnAxis::Time => t,
            LnAxis::Channel => f,
        };
        let ln_gamma = store.add("embed.ln.gamma", Tensor::ones(&[ln_width]), true)?;
        let ln_beta = store.add("embed.ln.beta", Tensor::zeros(&[ln_width]), true)?;
        let bound = 1.0 / (t as f64).sqrt();
        let proj_weight = store.add(
            "embed.proj.weight",
            init::uniform(&[t, config.width], bound, &mut stream(seed, "embed.proj.weight")),
            true,
        )?;
        let proj_bias = store.add(
            "embed.proj.bias",
            init::uniform(&[config.width], bound, &mut stream(seed, "embed.proj.bias")),
            true,
        )?;
        Ok(Self {
            config,
            gcn,
            conv,
            ln_gamma,
            ln_beta,
            proj_weight,
            proj_bias,
        })
    }

    /// `LN(ReLU(GE + SE))`, `R×F×T`; either input may be absent under
    /// ablation.
    fn fuse_normalized<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, ge: Option<Var>, se: Option<Var>) -> Result<Var> {
        let summed = match (ge, se) {
            (Some(a), Some(b)) => g.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("fuse needs at least one embedding".into())),
        };
        if g.shape(summed).len() != 3 {
            return Err(dim_err!("fuse expects R×F×T, got {:?}", g.shape(summed)));
        }
        let activated = g.relu(summed);
        let gamma = g.param(store, self.ln_gamma);
        let beta = g.param(store, self.ln_beta);
        match self.config.ln_axis {
            LnAxis::Time => g.layer_norm(activated, gamma, beta, LAYER_NORM_EPS),
            LnAxis::Channel => {
                let swapped = g.swap_last_axes(activated)?;
                let normed = g.layer_norm(swapped, gamma, beta, LAYER_NORM_EPS)?;
                g.swap_last_axes(normed)
            }
        }
    }

    /// Maps the last axis `T → D` row by row.
    fn project<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let t = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / t;
        let flat = g.reshape(x, &[rows, t])?;
        let w = g.param(store, self.proj_weight);
        let b = g.param(store, self.proj_bias);
        let projected = g.matmul(flat, w)?;
        let projected = g.add_bias(projected, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.config.width;
        g.reshape(projected, &out_shape)
    }

    /// `M = Linear_D(LN(ReLU(GE + SE)))`, `R×F×T → R×F×D`.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, ge: Option<Var>, se: Option<Var>) -> Result<Var> {
        let normed = self.fuse_normalized(g, store, ge, se)?;
        self.project(g, store, normed)
    }

    /// `R×F×W → R×W`.
    pub fn select<S: Scalar>(&self, g: &mut Graph<S>, m: Var) -> Result<Var> {
        match self.config.reduction {
            ChannelReduction::Last => {
                let f = g.shape(m)[1];
                g.select_channel(m, f - 1)
            }
            ChannelReduction::Mean => g.mean_channels(m),
        }
    }

    /// `x: (B·N)×T` normalized history → `(B·N)×D` tokens.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adj: &NormalizedAdjacency<S>,
    ) -> Result<Var> {
        let t = g.shape(x)[1];
        if t != self.config.input_steps {
            return Err(dim_err!(
                "history has {t} steps, embedding expects {}",
                self.config.input_steps
            ));
        }
        let ge = self.gcn.as_ref().map(|l| l.forward(g, store, x, adj)).transpose()?;
        let se = self.conv.as_ref().map(|c| c.forward(g, store, x)).transpose()?;
        // The projection acts on each channel row independently, so selecting
        // (or averaging) channels before projecting gives the same tokens as
        // select(fuse(..)) without projecting the discarded channels.
        let normed = self.fuse_normalized(g, store, ge, se)?;
        let kept = self.select(g, normed)?;
        self.project(g, store, kept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency_matrix;

    fn set(store: &mut ParamStore<f64>, id: ParamId, t: Tensor<f64>) {
        store.get_mut(id).value = t;
    }

    fn embedding(config: EmbeddingConfig) -> (ParamStore<f64>, InputEmbedding) {
        let mut store = ParamStore::new();
        let e = InputEmbedding::new(&mut store, config, 5).unwrap();
        (store, e)
    }

    #[test]
    fn identity_filters_replicate_input() {
        let (mut store, e) = embedding(EmbeddingConfig::new(3, 4, 8));
        let conv = e.conv.clone().unwrap();
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + 1] = 1.0;
        }
        set(&mut store, conv.kernels, Tensor::from_vec(&[3, 1, 3], k).unwrap());
        set(&mut store, conv.bias, Tensor::zeros(&[3]));
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5], vec![0.0, 4.0, 1.0, 2.0]]).unwrap();
        let mut g = Graph::new(false, 0);
        let xv = g.input(x.clone());
        let se = conv.forward(&mut g, &store, xv).unwrap();
        let out = g.value(se);
        for n in 0..2 {
            for c in 0..3 {
                for t in 0..4 {
                    assert_eq!(out.at3(n, c, t), x.at2(n, t));
                }
            }
        }
    }

    #[test]
    fn constant_bias_on_zero_input() {
        let (mut store, e) = embedding(EmbeddingConfig::new(2, 5, 8));
        let conv = e.conv.clone().unwrap();
        set(&mut store, conv.bias, Tensor::from_vec(&[2], vec![0.25, -3.0]).unwrap());
        let mut g = Graph::new(false, 0);
        let xv = g.input(Tensor::zeros(&[3, 5]));
        let se = conv.forward(&mut g, &store, xv).unwrap();
        for n in 0..3 {
            for t in 0..5 {
                assert_eq!(g.value(se).at3(n, 0, t), 0.25);
                assert_eq!(g.value(se).at3(n, 1, t), -3.0);
            }
        }
    }

    #[test]
    fn sequence_embedding_matches_hand_convolution() {
        let (mut store, e) = embedding(EmbeddingConfig::new(1, 3, 4));
        let conv = e.conv.clone().unwrap();
        set(&mut store, conv.kernels, Tensor::ones(&[1, 1, 3]));
        set(&mut store, conv.bias, Tensor::zeros(&[1]));
        let mut g = Graph::new(false, 0);
        let xv = g.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let se = conv.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(se).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn cancelling_inputs_yield_projection_bias() {
        for axis in [LnAxis::Time, LnAxis::Channel] {
            let mut cfg = EmbeddingConfig::new(2, 4, 8);
            cfg.ln_axis = axis;
            let (store, e) = embedding(cfg);
            let se_val = Tensor::from_vec(&[3, 2, 4], (0..24).map(|i| i as f64 - 7.5).collect()).unwrap();
            let mut g = Graph::new(false, 0);
            let se = g.input(se_val.clone());
            let ge = g.input(se_val.map(|v| -v));
            let m = e.fuse(&mut g, &store, Some(ge), Some(se)).unwrap();
            let out = g.value(m).clone();
            assert_eq!(out.shape(), &[3, 2, 8]);
            let bias = store.value(e.proj_bias);
            for r in 0..3 {
                for c in 0..2 {
                    for d in 0..8 {
                        assert_eq!(out.at3(r, c, d), bias.data()[d]);
                    }
                }
            }
        }
    }

    #[test]
    fn cancelling_inputs_with_zero_bias_give_zero() {
        let (mut store, e) = embedding(EmbeddingConfig::new(2, 4, 8));
        set(&mut store, e.proj_bias, Tensor::zeros(&[8]));
        let mut g = Graph::new(false, 0);
        let se = g.input(Tensor::full(&[1, 2, 4], 3.0));
        let ge = g.input(Tensor::full(&[1, 2, 4], -3.0));
        let m = e.fuse(&mut g, &store, Some(ge), Some(se)).unwrap();
        assert_eq!(g.value(m), &Tensor::zeros(&[1, 2, 8]));
    }

    #[test]
    fn fuse_shape_contract() {
        let (store, e) = embedding(EmbeddingConfig::new(2, 4, 8));
        let mut g = Graph::new(false, 0);
        let a = g.input(Tensor::full(&[3, 2, 4], 0.5));
        let b = g.input(Tensor::from_vec(&[3, 2, 4], (0..24).map(f64::from).collect()).unwrap());
        let m = e.fuse(&mut g, &store, Some(a), Some(b)).unwrap();
        assert_eq!(g.shape(m), &[3, 2, 8]);
        let bad = g.input(Tensor::zeros(&[3, 2, 5]));
        assert!(e.fuse(&mut g, &store, Some(a), Some(bad)).is_err());
    }

    #[test]
    fn selection() {
        let (_, e) = embedding(EmbeddingConfig::new(3, 4, 2));
        let m_val = Tensor::from_vec(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let mut g = Graph::new(false, 0);
        let m = g.input(m_val.clone());
        let tokens = e.select(&mut g, m).unwrap();
        let mut expected = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                expected.push(m_val.at3(i, 2, j));
            }
        }
        assert_eq!(g.value(tokens).data(), expected.as_slice());

        let single = g.input(Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = e.select(&mut g, single).unwrap();
        assert_eq!(g.value(t).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sevens = g.input(Tensor::from_vec(&[2, 3, 2], vec![1.0, 1.0, 2.0, 2.0, 7.0, 7.0, 3.0, 3.0, 4.0, 4.0, 7.0, 7.0]).unwrap());
        let t = e.select(&mut g, sevens).unwrap();
        assert_eq!(g.value(t), &Tensor::full(&[2, 2], 7.0));
    }

    #[test]
    fn forward_equals_select_of_fuse() {
        let adj = normalize_adjacency_matrix(&Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        for axis in [LnAxis::Time, LnAxis::Channel] {
            for reduction in [ChannelReduction::Last, ChannelReduction::Mean] {
                let mut cfg = EmbeddingConfig::new(5, 6, 7);
                cfg.ln_axis = axis;
                cfg.reduction = reduction;
                let (store, e) = embedding(cfg);
                let x_val = Tensor::from_vec(&[4, 6], (0..24).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
                let mut g = Graph::new(false, 0);
                let x = g.input(x_val);
                let fast = e.forward(&mut g, &store, x, &adj).unwrap();
                let ge = e.gcn.as_ref().unwrap().forward(&mut g, &store, x, &adj).unwrap();
                let se = e.conv.as_ref().unwrap().forward(&mut g, &store, x).unwrap();
                let m = e.fuse(&mut g, &store, Some(ge), Some(se)).unwrap();
                let slow = e.select(&mut g, m).unwrap();
                assert!(g.value(fast).max_abs_diff(g.value(slow)) < 1e-12);
            }
        }
    }

    #[test]
    fn full_embedding_shapes_and_ablations() {
        let adj = normalize_adjacency_matrix(&Tensor::zeros(&[3, 3])).unwrap();
        for (ge, se) in [(true, true), (true, false), (false, true)] {
            let mut cfg = EmbeddingConfig::new(4, 12, 16);
            cfg.graph_embedding = ge;
            cfg.sequence_embedding = se;
            let (store, e) = embedding(cfg);
            assert_eq!(store.by_name("embed.gcn.weight").is_some(), ge);
            assert_eq!(store.by_name("embed.conv.weight").is_some(), se);
            let mut g = Graph::new(false, 0);
            let x = g.input(Tensor::from_vec(&[6, 12], (0..72).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let tokens = e.forward(&mut g, &store, x, &adj).unwrap();
            assert_eq!(g.shape(tokens), &[6, 16]);
            assert!(g.value(tokens).is_finite());
        }
        let mut cfg = EmbeddingConfig::new(4, 12, 16);
        cfg.graph_embedding = false;
        cfg.sequence_embedding = false;
        assert!(InputEmbedding::new(&mut ParamStore::<f64>::new(), cfg, 0).is_err());
    }
}

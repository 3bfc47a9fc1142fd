//! Run configuration: defaults, overlaid by a TOML (or JSON) file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpllm_core::backbone::{BackboneConfig, BackbonePreset, LoraConfig, Positional};
use tpllm_core::dataio::{AdjacencyMode, SplitSpec};
use tpllm_core::embedding::{ChannelReduction, LnAxis};
use tpllm_core::model::ModelConfig;
use tpllm_core::numerics::ops::AttentionMask;
use tpllm_core::train::OptimizerConfig;
use tpllm_core::{Error, Result};

/// Directory searched for `series.csv` and `edges.csv` when paths are not
/// given.
pub const DATA_DIR_ENV: &str = "TPLLM_DATA_DIR";
pub const DEFAULT_SERIES_FILE: &str = "series.csv";
pub const DEFAULT_EDGES_FILE: &str = "edges.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub adjacency_mode: AdjacencyMode,
    pub sigma: Option<f64>,
    pub few_shot: bool,
    pub input_steps: usize,
    pub horizon: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub ln_axis: LnAxis,
    pub reduction: ChannelReduction,
    pub backbone: BackbonePreset,
    pub attention_mask: AttentionMask,
    pub positional: Positional,
    /// Converted pretrained backbone weights in the checkpoint format.
    pub backbone_weights: Option<PathBuf>,
    pub rank: usize,
    pub alpha: f64,
    pub lora_dropout: f64,
    pub no_lora: bool,
    pub no_graph_embedding: bool,
    pub no_sequence_embedding: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub with_baselines: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lora = LoraConfig::default();
        let opt = OptimizerConfig::default();
        Self {
            series: None,
            adjacency: None,
            adjacency_mode: AdjacencyMode::Binary,
            sigma: None,
            few_shot: false,
            input_steps: 12,
            horizon: 12,
            channels: 64,
            kernel_size: 3,
            ln_axis: LnAxis::default(),
            reduction: ChannelReduction::default(),
            backbone: BackbonePreset::Tiny,
            attention_mask: AttentionMask::Causal,
            positional: Positional::None,
            backbone_weights: None,
            rank: lora.rank,
            alpha: lora.alpha,
            lora_dropout: lora.dropout,
            no_lora: false,
            no_graph_embedding: false,
            no_sequence_embedding: false,
            epochs: opt.epochs,
            batch_size: opt.batch_size,
            learning_rate: opt.learning_rate,
            grad_clip: None,
            seed: 42,
            out: PathBuf::from("run"),
            with_baselines: false,
        }
    }
}

impl RunConfig {
    /// Reads a config file; `.json` files are parsed as JSON, anything else
    /// as TOML. Missing keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if ![3, 6, 12].contains(&self.horizon) {
            return Err(Error::Config(format!("horizon must be 3, 6 or 12, got {}", self.horizon)));
        }
        self.model_config().validate()?;
        self.optimizer().validate()?;
        if !self.no_lora {
            self.lora().validate(self.backbone_config().width)?;
        }
        Ok(())
    }

    pub fn series_path(&self) -> Result<PathBuf> {
        resolve(self.series.as_ref(), DEFAULT_SERIES_FILE, "series")
    }

    pub fn adjacency_path(&self) -> Result<PathBuf> {
        resolve(self.adjacency.as_ref(), DEFAULT_EDGES_FILE, "adjacency")
    }

    pub fn split_spec(&self) -> SplitSpec {
        if self.few_shot {
            SplitSpec::few_shot()
        } else {
            SplitSpec::full_sample()
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.lora_dropout,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let mut b = BackboneConfig::preset(self.backbone);
        b.attention_mask = self.attention_mask;
        b.positional = self.positional;
        b
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_steps: self.input_steps,
            horizon: self.horizon,
            channels: self.channels,
            kernel_size: self.kernel_size,
            ln_axis: self.ln_axis,
            reduction: self.reduction,
            graph_embedding: !self.no_graph_embedding,
            sequence_embedding: !self.no_sequence_embedding,
            backbone: self.backbone_config(),
            lora: (!self.no_lora).then(|| self.lora()),
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            ..OptimizerConfig::default()
        }
    }
}

fn resolve(explicit: Option<&PathBuf>, file: &str, what: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(Path::new(&dir).join(file)),
        None => Err(Error::Config(format!(
            "no {what} path given (use --{what} or set {DATA_DIR_ENV})"
        ))),
    }
}

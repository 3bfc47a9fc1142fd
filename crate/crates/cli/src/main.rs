//! `tpllm`: prepare data, train, evaluate, predict, run ablations and rank
//! sweeps.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tpllm_core::backbone::BackbonePreset;
use tpllm_core::dataio::AdjacencyMode;
use tpllm_core::embedding::{ChannelReduction, LnAxis};
use tpllm_core::numerics::ops::AttentionMask;
use tpllm_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "tpllm", version, about = "Traffic flow forecasting with a LoRA-adapted transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic ring fixture, or summarize a dataset.
    Prepare(PrepareArgs),
    /// Train a model and write config, checkpoint, history and metrics.
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Evaluate(RunArgs),
    /// Write per-node predicted and true test series.
    Predict(PredictArgs),
    /// Train the full model and its three single-component ablations.
    Ablate(RunArgs),
    /// Train one model per LoRA rank.
    SweepRank(SweepArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_horizon(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(h @ (3 | 6 | 12)) => Ok(h),
        _ => Err(format!("horizon must be 3, 6 or 12, got {s}")),
    }
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML or JSON config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    series: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<AdjacencyMode>)]
    adjacency_mode: Option<AdjacencyMode>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    few_shot: bool,
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_lora: bool,
    #[arg(long)]
    no_graph_embedding: bool,
    #[arg(long)]
    no_sequence_embedding: bool,
    #[arg(long, value_parser = parse_enum::<BackbonePreset>)]
    backbone: Option<BackbonePreset>,
    /// Converted pretrained backbone weights.
    #[arg(long)]
    backbone_weights: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<AttentionMask>)]
    attention_mask: Option<AttentionMask>,
    #[arg(long, value_parser = parse_enum::<LnAxis>)]
    ln_axis: Option<LnAxis>,
    #[arg(long, value_parser = parse_enum::<ChannelReduction>)]
    reduction: Option<ChannelReduction>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Checkpoint to evaluate or predict with; for `train`, initial weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    with_baselines: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Prediction step (1-based) written to the CSVs.
    #[arg(long, default_value_t = 1)]
    step: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32, 48, 64])]
    ranks: Vec<usize>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the synthetic ring fixture to the output directory.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
}

impl RunArgs {
    /// Defaults, then `base` (a run directory's saved config), then
    /// `--config`, then flags.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => base.unwrap_or_default(),
        };
        macro_rules! set {
            ($($field:ident <- $arg:ident),* $(,)?) => {
                $(if let Some(v) = self.$arg.clone() { c.$field = v; })*
            };
        }
        set!(
            adjacency_mode <- adjacency_mode,
            horizon <- horizon,
            rank <- rank,
            alpha <- alpha,
            backbone <- backbone,
            attention_mask <- attention_mask,
            ln_axis <- ln_axis,
            reduction <- reduction,
            channels <- channels,
            epochs <- epochs,
            batch_size <- batch_size,
            learning_rate <- lr,
            seed <- seed,
            out <- out,
        );
        if self.series.is_some() {
            c.series = self.series.clone();
        }
        if self.adjacency.is_some() {
            c.adjacency = self.adjacency.clone();
        }
        if self.sigma.is_some() {
            c.sigma = self.sigma;
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        if self.backbone_weights.is_some() {
            c.backbone_weights = self.backbone_weights.clone();
        }
        c.few_shot |= self.few_shot;
        c.no_lora |= self.no_lora;
        c.no_graph_embedding |= self.no_graph_embedding;
        c.no_sequence_embedding |= self.no_sequence_embedding;
        c.with_baselines |= self.with_baselines;
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Numerical(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a.run, a.synthetic, a.nodes, a.steps),
        Command::Train(a) => a.resolve(None).and_then(|c| commands::train(&c, a.checkpoint.as_deref())),
        Command::Evaluate(a) => commands::evaluate_cmd(&a),
        Command::Predict(a) => commands::predict(&a.run, a.step),
        Command::Ablate(a) => a.resolve(None).and_then(|c| commands::ablate(&c)),
        Command::SweepRank(a) => a.run.resolve(None).and_then(|c| commands::sweep_rank(&c, &a.ranks)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use tpllm_core::backbone::trainable_report;
use tpllm_core::dataio::synthetic::{ring_fixture, SyntheticSpec};
use tpllm_core::dataio::{load_adjacency, load_series, RoadNetwork, SeriesFormat};
use tpllm_core::model::TpllmModel;
use tpllm_core::numerics::ParamStore;
use tpllm_core::train::{self, evaluate, predict_range, reference_predictors, Dataset};
use tpllm_core::{Error, Result};

use crate::config::RunConfig;
use crate::report::{
    write_json, Ablation, AblationRow, AdjacencyInfo, Evaluation, Prepare, SplitInfo, Sweep, SweepRow, TrainMetrics,
};
use crate::RunArgs;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";

type Store = ParamStore<f32>;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_network(cfg: &RunConfig, nodes: usize) -> Result<RoadNetwork> {
    load_adjacency(cfg.adjacency_path()?, nodes, cfg.adjacency_mode, cfg.sigma)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, RoadNetwork)> {
    let path = cfg.series_path()?;
    if !path.exists() {
        return Err(Error::Data(format!("series not found: {}", path.display())));
    }
    let series = load_series(&path, SeriesFormat::from_path(&path))?;
    let network = load_network(cfg, series.nodes())?;
    let data = Dataset::new(series, &network, cfg.input_steps, cfg.horizon, &cfg.split_spec())?;
    log::info!(
        "split train {:?} val {:?} test {:?} (fingerprint {})",
        data.splits.train,
        data.splits.val,
        data.splits.test,
        data.splits.fingerprint()
    );
    Ok((data, network))
}

fn split_info(cfg: &RunConfig, data: &Dataset) -> SplitInfo {
    SplitInfo::new(&data.splits, data.windows().len(), cfg.few_shot)
}

fn edge_count(network: &RoadNetwork) -> usize {
    let n = network.n_nodes;
    let a = network.adjacency.data();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| a[i * n + j] > 0.0).count()
}

pub fn prepare(args: &RunArgs, synthetic: bool, nodes: usize, steps: usize) -> Result<()> {
    let mut cfg = args.resolve(None)?;
    if synthetic {
        let spec = SyntheticSpec {
            nodes,
            steps,
            seed: cfg.seed,
            ..SyntheticSpec::default()
        };
        create_dir(&cfg.out)?;
        let (series, network) = ring_fixture(&spec);
        let series_path = cfg.out.join(crate::config::DEFAULT_SERIES_FILE);
        let edges_path = cfg.out.join(crate::config::DEFAULT_EDGES_FILE);
        series.write_csv(&series_path)?;
        network.write_edges(&edges_path)?;
        log::info!("wrote {} and {}", series_path.display(), edges_path.display());
        cfg.series = Some(series_path);
        cfg.adjacency = Some(edges_path);
    }
    let (data, network) = load_dataset(&cfg)?;
    let report = Prepare {
        steps: data.series.steps(),
        nodes: data.nodes(),
        interval_seconds: data.series.interval_seconds,
        input_steps: data.input_steps,
        horizon: data.horizon,
        split: split_info(&cfg, &data),
        norm: data.norm,
        adjacency: AdjacencyInfo {
            nodes: network.n_nodes,
            edges: edge_count(&network),
            ignored_self_edges: network.ignored_self_edges,
        },
    };
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("prepare.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn build_model(cfg: &RunConfig, data: &Dataset, warm_start: Option<&Path>) -> Result<(TpllmModel, Store)> {
    let (model, mut store) = match warm_start {
        Some(path) => {
            let (model, store, _) = TpllmModel::load_checkpoint_as::<f32>(path, cfg.model_config())?;
            (model, store)
        }
        None => {
            let mut store = Store::new();
            let model = TpllmModel::new(&mut store, cfg.model_config(), cfg.seed)?;
            (model, store)
        }
    };
    if let (Some(weights), None) = (&cfg.backbone_weights, warm_start) {
        let n = model.load_backbone_weights(&mut store, weights)?;
        log::info!("loaded {n} backbone tensors from {}", weights.display());
    }
    Ok((model.with_norm(&data.norm), store))
}

/// Trains into `cfg.out` and returns the metrics written there.
fn train_into(cfg: &RunConfig, data: &Dataset, warm_start: Option<&Path>) -> Result<TrainMetrics> {
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), cfg)?;
    let (model, mut store) = build_model(cfg, data, warm_start)?;
    let trainable = trainable_report(&store);
    log::info!(
        "{} of {} parameters trainable ({:.4}%)",
        trainable.trainable_count,
        trainable.total_count,
        100.0 * trainable.fraction
    );
    let state = train::train(&model, &mut store, data, &cfg.optimizer(), cfg.seed)?;
    model.save_checkpoint(&store, &data.norm, cfg.out.join(CHECKPOINT_FILE))?;
    state.write_history_csv(cfg.out.join(HISTORY_FILE))?;
    let baselines = if cfg.with_baselines {
        Some(reference_predictors(data, data.splits.test.clone())?)
    } else {
        None
    };
    let metrics = TrainMetrics {
        seed: cfg.seed,
        split: split_info(cfg, data),
        norm: data.norm,
        training: (&state).into(),
        trainable,
        validation: evaluate(&model, &store, data, data.splits.val.clone())?,
        test: evaluate(&model, &store, data, data.splits.test.clone())?,
        baselines,
    };
    write_json(&cfg.out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn train(cfg: &RunConfig, warm_start: Option<&Path>) -> Result<()> {
    let (data, _) = load_dataset(cfg)?;
    let metrics = train_into(cfg, &data, warm_start)?;
    println!("{}", serde_json::to_string_pretty(&metrics.test).expect("report serializes"));
    Ok(())
}

/// Config for a checkpoint-based command: the run's saved `config.json`
/// (when no `--config` is given) under the command-line flags.
fn checkpoint_config(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let base_dir = args.out.clone().unwrap_or_else(|| RunConfig::default().out);
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| base_dir.join(CHECKPOINT_FILE));
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("checkpoint not found: {}", checkpoint.display())));
    }
    let saved = checkpoint.with_file_name(CONFIG_FILE);
    let base = if saved.exists() {
        Some(RunConfig::from_file(&saved)?)
    } else {
        None
    };
    Ok((args.resolve(base)?, checkpoint))
}

fn load_trained(cfg: &RunConfig, checkpoint: &Path, data: &Dataset) -> Result<(TpllmModel, Store)> {
    let (model, store, _) = TpllmModel::load_checkpoint_as::<f32>(checkpoint, cfg.model_config())?;
    Ok((model.with_norm(&data.norm), store))
}

pub fn evaluate_cmd(args: &RunArgs) -> Result<()> {
    let (cfg, checkpoint) = checkpoint_config(args)?;
    let (data, _) = load_dataset(&cfg)?;
    let (model, store) = load_trained(&cfg, &checkpoint, &data)?;
    let baselines = if cfg.with_baselines {
        Some(reference_predictors(&data, data.splits.test.clone())?)
    } else {
        None
    };
    let report = Evaluation {
        seed: cfg.seed,
        split: split_info(&cfg, &data),
        test: evaluate(&model, &store, &data, data.splits.test.clone())?,
        baselines,
    };
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("evaluation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

/// Writes `predictions/node_<id>.csv` with the true and predicted flow of
/// every test window at prediction step `step`, keyed by the target's
/// offset in seconds from the start of the series.
pub fn predict(args: &RunArgs, step: usize) -> Result<()> {
    let (cfg, checkpoint) = checkpoint_config(args)?;
    if step == 0 || step > cfg.horizon {
        return Err(Error::Config(format!("--step must be in 1..={}, got {step}", cfg.horizon)));
    }
    let (data, _) = load_dataset(&cfg)?;
    let (model, store) = load_trained(&cfg, &checkpoint, &data)?;
    let range = data.splits.test.clone();
    let (pred, target) = predict_range(&model, &store, &data, range.clone())?;
    let (n, h) = (data.nodes(), data.horizon);
    let dir = cfg.out.join("predictions");
    create_dir(&dir)?;
    for (node, id) in data.series.node_ids.iter().enumerate() {
        let path = dir.join(format!("node_{id}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut write = |rec: [String; 3]| w.write_record(&rec).map_err(|e| Error::Data(format!("{}: {e}", path.display())));
        write(["timestamp".into(), "true".into(), "predicted".into()])?;
        for (i, k) in range.clone().enumerate() {
            let at = i * n * h + node * h + step - 1;
            let row = k + data.input_steps + step - 1;
            let seconds = row as u64 * u64::from(data.series.interval_seconds);
            write([seconds.to_string(), target[at].to_string(), pred[at].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    log::info!("wrote {} node files to {}", n, dir.display());
    Ok(())
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "no-se", "no-ge", "no-lora"];

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (data, _) = load_dataset(cfg)?;
    let mut runs = Vec::new();
    for variant in ABLATION_VARIANTS {
        let mut v = cfg.clone();
        v.out = cfg.out.join(variant);
        match variant {
            "no-se" => v.no_sequence_embedding = true,
            "no-ge" => v.no_graph_embedding = true,
            "no-lora" => v.no_lora = true,
            _ => {}
        }
        log::info!("ablation variant {variant}");
        let m = train_into(&v, &data, None)?;
        let avg = m.test.average();
        runs.push(AblationRow {
            variant: variant.into(),
            mae: avg.mae,
            rmse: avg.rmse,
            mape: avg.mape,
            trainable_count: m.trainable.trainable_count,
            backbone_trainable: m.trainable.backbone_trainable,
            trainable_tensors: m.trainable.trainable_tensors,
        });
    }
    let report = Ablation {
        seed: cfg.seed,
        split_fingerprint: data.splits.fingerprint(),
        runs,
    };
    write_json(&cfg.out.join("ablation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn sweep_rank(cfg: &RunConfig, ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Config(format!("ranks must be positive integers, got {ranks:?}")));
    }
    let (data, _) = load_dataset(cfg)?;
    let mut rows = Vec::new();
    for &rank in ranks {
        let mut v = cfg.clone();
        v.rank = rank;
        v.no_lora = false;
        v.out = cfg.out.join(format!("rank_{rank}"));
        v.validate()?;
        log::info!("rank sweep r={rank}");
        let m = train_into(&v, &data, None)?;
        let avg = m.test.average();
        rows.push(SweepRow {
            rank,
            mae: avg.mae,
            rmse: avg.rmse,
            mape: avg.mape,
            trainable_count: m.trainable.trainable_count,
        });
    }
    let report = Sweep {
        seed: cfg.seed,
        split_fingerprint: data.splits.fingerprint(),
        rows,
    };
    write_json(&cfg.out.join("sweep.json"), &report)?;
    let path = cfg.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    #[derive(serde::Serialize)]
    struct CsvRow {
        rank: usize,
        mae: f64,
        rmse: f64,
        mape: f64,
    }
    for r in &report.rows {
        let row = CsvRow { rank: r.rank, mae: r.mae, rmse: r.rmse, mape: r.mape };
        w.serialize(row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

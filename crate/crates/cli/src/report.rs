//! JSON artifacts written by the commands. Each has a schema under
//! `schemas/`.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tpllm_core::backbone::TrainableReport;
use tpllm_core::dataio::{NormStats, SplitRanges};
use tpllm_core::train::{MetricsReport, ReferenceReports, TrainState};
use tpllm_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub windows: usize,
    pub few_shot: bool,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub fingerprint: String,
}

impl SplitInfo {
    pub fn new(splits: &SplitRanges, windows: usize, few_shot: bool) -> Self {
        Self {
            windows,
            few_shot,
            train: splits.train.clone(),
            val: splits.val.clone(),
            test: splits.test.clone(),
            fingerprint: splits.fingerprint(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub steps: usize,
    pub initial_val_mae: f64,
    pub best_val_mae: f64,
    pub best_epoch: Option<usize>,
}

impl From<&TrainState> for TrainingSummary {
    fn from(s: &TrainState) -> Self {
        Self {
            epochs: s.history.len(),
            steps: s.steps,
            initial_val_mae: s.initial_val_mae,
            best_val_mae: s.best_val_mae,
            best_epoch: s.best_epoch,
        }
    }
}

/// `metrics.json` of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub split: SplitInfo,
    pub norm: NormStats,
    pub training: TrainingSummary,
    pub trainable: TrainableReport,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<ReferenceReports>,
}

/// `evaluation.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub seed: u64,
    pub split: SplitInfo,
    pub test: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<ReferenceReports>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub trainable_count: usize,
    pub backbone_trainable: usize,
    pub trainable_tensors: Vec<String>,
}

/// `ablation.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub seed: u64,
    pub split_fingerprint: String,
    pub runs: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub trainable_count: usize,
}

/// `sweep.json`; `sweep.csv` carries the rank and metric columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub seed: u64,
    pub split_fingerprint: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyInfo {
    pub nodes: usize,
    pub edges: usize,
    pub ignored_self_edges: usize,
}

/// `prepare.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prepare {
    pub steps: usize,
    pub nodes: usize,
    pub interval_seconds: u32,
    pub input_steps: usize,
    pub horizon: usize,
    pub split: SplitInfo,
    pub norm: NormStats,
    pub adjacency: AdjacencyInfo,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

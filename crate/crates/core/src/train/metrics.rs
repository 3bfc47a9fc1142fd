use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Targets at or below this flow are left out of MAPE.
pub const MAPE_MIN_TARGET: f64 = 1.0;

/// Prediction steps reported individually when the horizon reaches them.
pub const REPORTED_STEPS: [usize; 3] = [3, 6, 12];

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    (pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64).sqrt()
}

/// Mean absolute percentage error in percent over entries whose target
/// exceeds [`MAPE_MIN_TARGET`]; 0 when no entry qualifies.
pub fn mape(pred: &[f64], target: &[f64]) -> f64 {
    let (sum, count) = pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > MAPE_MIN_TARGET)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + ((p - t) / t).abs(), c + 1));
    if count == 0 {
        0.0
    } else {
        100.0 * sum / count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `"step 3"`, `"step 6"`, `"step 12"` or `"average"`.
    pub label: String,
    /// 1-based prediction step; absent for the average row.
    pub step: Option<usize>,
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

impl MetricRow {
    fn new(label: String, step: Option<usize>, pred: &[f64], target: &[f64]) -> Self {
        Self {
            label,
            step,
            mae: mae(pred, target),
            rmse: rmse(pred, target),
            mape: mape(pred, target),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon: usize,
    pub samples: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    /// `pred` and `target` hold `samples` blocks of `N×T'` values in original
    /// units.
    pub fn from_predictions(pred: &[f64], target: &[f64], horizon: usize) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(dim_err!("{} predictions for {} targets", pred.len(), target.len()));
        }
        if pred.is_empty() {
            return Err(Error::Config("cannot evaluate an empty split".into()));
        }
        if horizon == 0 || pred.len() % horizon != 0 {
            return Err(dim_err!("{} values do not divide into horizon {horizon}", pred.len()));
        }
        let mut rows = Vec::new();
        for step in REPORTED_STEPS.into_iter().filter(|&s| s <= horizon) {
            let pick = |v: &[f64]| v.iter().skip(step - 1).step_by(horizon).copied().collect::<Vec<_>>();
            rows.push(MetricRow::new(format!("step {step}"), Some(step), &pick(pred), &pick(target)));
        }
        rows.push(MetricRow::new("average".into(), None, pred, target));
        Ok(Self {
            horizon,
            samples: pred.len() / horizon,
            rows,
        })
    }

    pub fn average(&self) -> &MetricRow {
        self.rows.last().expect("report always has an average row")
    }
}

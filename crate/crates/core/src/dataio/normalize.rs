use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::series::TrafficSeries;

/// Global z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation; always positive.
    pub std: f64,
}

impl NormStats {
    /// Fits on series rows `train_rows` only.
    pub fn fit(series: &TrafficSeries, train_rows: Range<usize>) -> Result<Self> {
        if train_rows.is_empty() || train_rows.end > series.steps() {
            return Err(Error::Config(format!(
                "normalizer range {train_rows:?} invalid for {} steps",
                series.steps()
            )));
        }
        let n = series.nodes();
        let slice = &series.values.data()[train_rows.start * n..train_rows.end * n];
        Self::fit_values(slice)
    }

    pub fn fit_values(values: &[f64]) -> Result<Self> {
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Data("training slice is constant (std = 0)".into()));
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn invert_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    /// Normalized value that corresponds to zero flow.
    pub fn zero_level(&self) -> f64 {
        self.apply_value(0.0)
    }

    pub fn apply(&self, t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| self.apply_value(v))
    }

    pub fn invert(&self, t: &Tensor<f64>) -> Tensor<f64> {
        t.map(|v| self.invert_value(v))
    }

    pub fn apply_series(&self, series: &TrafficSeries) -> TrafficSeries {
        TrafficSeries {
            values: self.apply(&series.values),
            interval_seconds: series.interval_seconds,
            node_ids: series.node_ids.clone(),
        }
    }
}

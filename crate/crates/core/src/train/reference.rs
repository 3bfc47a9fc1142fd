use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataio::synthetic::STEPS_PER_DAY;
use crate::error::Result;

use super::data::{window_rows, Dataset};
use super::metrics::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReports {
    pub persistence: MetricsReport,
    pub historical_average: MetricsReport,
}

/// Per-node, per-slot-of-day mean over the training rows, falling back to the
/// node's training mean for slots the training rows never visit.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    nodes: usize,
    profile: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(data: &Dataset) -> Self {
        let rows = window_rows(&data.splits.train, data.input_steps, data.horizon);
        Self::fit_rows(data, rows)
    }

    fn fit_rows(data: &Dataset, rows: Range<usize>) -> Self {
        let n = data.nodes();
        let mut sum = vec![0.0; n * STEPS_PER_DAY];
        let mut count = vec![0usize; n * STEPS_PER_DAY];
        let mut node_sum = vec![0.0; n];
        let row_count = rows.len() as f64;
        for t in rows {
            let slot = t % STEPS_PER_DAY;
            for i in 0..n {
                let v = data.series.get(t, i);
                sum[i * STEPS_PER_DAY + slot] += v;
                count[i * STEPS_PER_DAY + slot] += 1;
                node_sum[i] += v;
            }
        }
        let profile = (0..n * STEPS_PER_DAY)
            .map(|j| match count[j] {
                0 => node_sum[j / STEPS_PER_DAY] / row_count,
                c => sum[j] / c as f64,
            })
            .collect();
        Self { nodes: n, profile }
    }

    pub fn predict(&self, step: usize, node: usize) -> f64 {
        debug_assert!(node < self.nodes);
        self.profile[node * STEPS_PER_DAY + step % STEPS_PER_DAY]
    }
}

/// Node-major `N×T'` blocks per window in original units.
fn collect(data: &Dataset, range: Range<usize>, mut f: impl FnMut(usize, usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let w = data.windows();
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    for k in range {
        w.target(k, &mut target);
        for i in 0..data.nodes() {
            for h in 0..data.horizon {
                pred.push(f(k, i, h));
            }
        }
    }
    (pred, target)
}

pub fn persistence(data: &Dataset, range: Range<usize>) -> Result<MetricsReport> {
    let last = data.input_steps - 1;
    let (pred, target) = collect(data, range, |k, i, _| data.series.get(k + last, i));
    MetricsReport::from_predictions(&pred, &target, data.horizon)
}

pub fn historical_average(data: &Dataset, range: Range<usize>) -> Result<MetricsReport> {
    let ha = HistoricalAverage::fit(data);
    let (pred, target) = collect(data, range, |k, i, h| ha.predict(k + data.input_steps + h, i));
    MetricsReport::from_predictions(&pred, &target, data.horizon)
}

/// Both reference predictors on window range `range`.
pub fn reference_predictors(data: &Dataset, range: Range<usize>) -> Result<ReferenceReports> {
    Ok(ReferenceReports {
        persistence: persistence(data, range.clone())?,
        historical_average: historical_average(data, range)?,
    })
}

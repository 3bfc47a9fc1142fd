use std::ops::Range;

use crate::dataio::{chronological_split, make_windows, window_count, NormStats, RoadNetwork, SplitRanges, SplitSpec, TrafficSeries, Windows};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, NormalizedAdjacency};
use crate::numerics::{s, Scalar, Tensor};

/// A series with its road graph, split and normalizer, ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: TrafficSeries,
    pub adjacency: NormalizedAdjacency<f64>,
    pub norm: NormStats,
    pub splits: SplitRanges,
    pub input_steps: usize,
    pub horizon: usize,
}

/// Rows `[start, end)` touched by windows `range`.
pub fn window_rows(range: &Range<usize>, input_steps: usize, horizon: usize) -> Range<usize> {
    range.start..range.end - 1 + input_steps + horizon
}

impl Dataset {
    /// Splits the windows and fits the normalizer on the rows covered by the
    /// training windows.
    pub fn new(series: TrafficSeries, network: &RoadNetwork, input_steps: usize, horizon: usize, spec: &SplitSpec) -> Result<Self> {
        if network.n_nodes != series.nodes() {
            return Err(Error::Config(format!(
                "road network has {} nodes, series has {}",
                network.n_nodes,
                series.nodes()
            )));
        }
        let n_windows = window_count(series.steps(), input_steps, horizon)?;
        let splits = chronological_split(n_windows, spec)?;
        let norm = NormStats::fit(&series, window_rows(&splits.train, input_steps, horizon))?;
        Ok(Self {
            adjacency: normalize_adjacency(network)?,
            series,
            norm,
            splits,
            input_steps,
            horizon,
        })
    }

    pub fn nodes(&self) -> usize {
        self.series.nodes()
    }

    pub fn windows(&self) -> Windows<'_> {
        make_windows(&self.series, self.input_steps, self.horizon).expect("window count validated at construction")
    }

    /// Stacks windows `idx` into normalized `(B·N)×T` inputs and `(B·N)×T'`
    /// targets.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> (Tensor<S>, Tensor<S>) {
        let w = self.windows();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for &k in idx {
            w.history(k, &mut x);
            w.target(k, &mut y);
        }
        let rows = idx.len() * self.nodes();
        let to_s = |v: Vec<f64>| -> Vec<S> { v.into_iter().map(|v| s(self.norm.apply_value(v))).collect() };
        (
            Tensor::from_vec(&[rows, self.input_steps], to_s(x)).expect("batch shape"),
            Tensor::from_vec(&[rows, self.horizon], to_s(y)).expect("batch shape"),
        )
    }
}

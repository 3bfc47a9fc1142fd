use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::series::TrafficSeries;

/// Default history length: one hour of 5-minute samples.
pub const DEFAULT_INPUT_STEPS: usize = 12;

/// One `(history, target)` pair cut from a series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `N×T` history.
    pub x: Tensor<f64>,
    /// `N×T'` target.
    pub y: Tensor<f64>,
    pub start_index: usize,
}

/// Number of stride-1 windows: `S − T − T' + 1`.
pub fn window_count(steps: usize, input_steps: usize, horizon: usize) -> Result<usize> {
    if input_steps == 0 || horizon == 0 {
        return Err(Error::Config("input steps and horizon must be at least 1".into()));
    }
    let span = input_steps + horizon;
    if steps < span {
        return Err(Error::Data(format!(
            "series of {steps} steps is shorter than T + T' = {span}"
        )));
    }
    Ok(steps - span + 1)
}

/// Lazily materialized stride-1 windows over a series.
///
/// Window `k` covers history rows `[k, k+T)` and target rows `[k+T, k+T+T')`.
#[derive(Clone, Copy, Debug)]
pub struct Windows<'a> {
    series: &'a TrafficSeries,
    input_steps: usize,
    horizon: usize,
    count: usize,
}

pub fn make_windows(series: &TrafficSeries, input_steps: usize, horizon: usize) -> Result<Windows<'_>> {
    let count = window_count(series.steps(), input_steps, horizon)?;
    Ok(Windows {
        series,
        input_steps,
        horizon,
        count,
    })
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn input_steps(&self) -> usize {
        self.input_steps
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn series(&self) -> &'a TrafficSeries {
        self.series
    }

    /// Writes the node-major `N×len` block of rows `[start, start+len)` into
    /// `out`.
    fn fill(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        let n = self.series.nodes();
        for node in 0..n {
            out.extend((start..start + len).map(|t| self.series.get(t, node)));
        }
    }

    pub fn history(&self, k: usize, out: &mut Vec<f64>) {
        self.fill(k, self.input_steps, out);
    }

    pub fn target(&self, k: usize, out: &mut Vec<f64>) {
        self.fill(k + self.input_steps, self.horizon, out);
    }

    pub fn get(&self, k: usize) -> WindowedSample {
        assert!(k < self.count, "window {k} out of {}", self.count);
        let n = self.series.nodes();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        self.history(k, &mut x);
        self.target(k, &mut y);
        WindowedSample {
            x: Tensor::from_vec(&[n, self.input_steps], x).expect("window shape"),
            y: Tensor::from_vec(&[n, self.horizon], y).expect("window shape"),
            start_index: k,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowedSample> + '_ {
        (0..self.count).map(|k| self.get(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(steps: usize, nodes: usize) -> TrafficSeries {
        let data = (0..steps * nodes).map(|i| i as f64).collect();
        TrafficSeries::new(
            Tensor::from_vec(&[steps, nodes], data).unwrap(),
            (0..nodes).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(window_count(16992, 12, 12).unwrap(), 16969);
        assert_eq!(window_count(17856, 12, 3).unwrap(), 17842);
        assert_eq!(window_count(24, 12, 12).unwrap(), 1);
        assert!(matches!(window_count(23, 12, 12), Err(Error::Data(_))));
    }

    #[test]
    fn window_contents() {
        let s = ramp(10, 2);
        let w = make_windows(&s, 3, 2).unwrap();
        assert_eq!(w.len(), 6);
        let k = w.get(4);
        // node 0 rows 4..7 → values 8, 10, 12; target rows 7..9
        assert_eq!(k.x.data(), &[8.0, 10.0, 12.0, 9.0, 11.0, 13.0]);
        assert_eq!(k.y.data(), &[14.0, 16.0, 15.0, 17.0]);
        assert_eq!(k.start_index, 4);
    }

    proptest! {
        #[test]
        fn windows_reconstruct_series(steps in 3usize..40, nodes in 1usize..4, t in 1usize..5, h in 1usize..4) {
            prop_assume!(steps >= t + h);
            let s = ramp(steps, nodes);
            let w = make_windows(&s, t, h).unwrap();
            let mut rebuilt = vec![f64::NAN; steps * nodes];
            for sample in w.iter() {
                for node in 0..nodes {
                    for j in 0..t {
                        rebuilt[(sample.start_index + j) * nodes + node] = sample.x.at2(node, j);
                    }
                }
            }
            let covered = (w.len() - 1 + t) * nodes;
            prop_assert_eq!(&rebuilt[..covered], &s.values.data()[..covered]);
            // the final target block covers the remainder of the series
            let last = w.get(w.len() - 1);
            prop_assert_eq!(last.start_index + t + h, steps);
        }
    }
}

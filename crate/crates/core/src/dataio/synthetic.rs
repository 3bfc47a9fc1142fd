//! Synthetic ring-road fixture with a daily cycle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::rng::stream;
use crate::numerics::Tensor;

use super::adjacency::RoadNetwork;
use super::series::TrafficSeries;

/// 5-minute steps per day.
pub const STEPS_PER_DAY: usize = 288;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub steps: usize,
    /// Multiplicative noise level (standard deviation relative to the clean
    /// value).
    pub noise: f64,
    /// Relative amplitude of the daily cycle around each node's base level.
    pub amplitude: f64,
    /// Standard deviation of a per-day factor on the cycle amplitude, shared
    /// by all nodes.
    pub day_variability: f64,
    /// Steps of delay between adjacent ring nodes.
    pub hop_lag: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 8,
            steps: 2000,
            noise: 0.05,
            amplitude: 0.6,
            day_variability: 0.15,
            hop_lag: 3,
            seed: 42,
        }
    }
}

/// Flow at node `i` follows `base_i · (1 + a · d(t) · sin(2π (t − lag·i) / 288))`
/// times `(1 + noise · ε)`, where `d(t)` is the factor of the current day.
pub fn ring_fixture(spec: &SyntheticSpec) -> (TrafficSeries, RoadNetwork) {
    let n = spec.nodes;
    let mut base_rng = stream(spec.seed, "synthetic.base");
    let bases: Vec<f64> = (0..n).map(|_| base_rng.random_range(150.0..350.0)).collect();

    let days = spec.steps / STEPS_PER_DAY + 2;
    let mut day_rng = stream(spec.seed, "synthetic.days");
    let day_factor: Vec<f64> = (0..days)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut day_rng);
            (1.0 + spec.day_variability * z).max(0.2)
        })
        .collect();

    let mut noise_rng = stream(spec.seed, "synthetic.noise");
    let mut data = Vec::with_capacity(spec.steps * n);
    for t in 0..spec.steps {
        for (i, &base) in bases.iter().enumerate() {
            let shifted = t as f64 - (spec.hop_lag * i) as f64;
            let day = (shifted.max(0.0) as usize) / STEPS_PER_DAY;
            let phase = 2.0 * std::f64::consts::PI * shifted / STEPS_PER_DAY as f64;
            let clean = base * (1.0 + spec.amplitude * day_factor[day] * phase.sin());
            let eps: f64 = StandardNormal.sample(&mut noise_rng);
            data.push((clean * (1.0 + spec.noise * eps)).max(0.0));
        }
    }
    let series = TrafficSeries::new(
        Tensor::from_vec(&[spec.steps, n], data).expect("fixture shape"),
        (0..n).map(|i| format!("s{i}")).collect(),
    )
    .expect("fixture flows are valid");
    (series, RoadNetwork::ring(n))
}

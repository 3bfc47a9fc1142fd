//! Sensor series and road network loading, normalization, windowing and
//! chronological splits.

mod adjacency;
pub mod container;
mod normalize;
mod series;
mod split;
pub mod synthetic;
mod window;

pub use adjacency::{load_adjacency, AdjacencyMode, RoadNetwork, GAUSSIAN_THRESHOLD};
pub use container::TensorContainer;
pub use normalize::NormStats;
pub use series::{load_series, SeriesFormat, TrafficSeries, INTERVAL_SECONDS};
pub use split::{chronological_split, SplitRanges, SplitSpec, FEW_SHOT_RATIO};
pub use window::{make_windows, window_count, WindowedSample, Windows, DEFAULT_INPUT_STEPS};

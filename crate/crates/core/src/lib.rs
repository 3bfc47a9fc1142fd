//! Traffic flow forecasting with a frozen transformer backbone adapted
//! through low-rank adapters.
//!
//! The pipeline embeds each sensor's recent history with a graph convolution
//! and a temporal convolution, feeds one token per sensor through the
//! backbone, and maps the result to the forecast horizon.

pub mod backbone;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

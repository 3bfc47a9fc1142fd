use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::series::csv_io;

/// Entries of the Gaussian kernel below this are dropped.
pub const GAUSSIAN_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMode {
    #[default]
    Binary,
    Gaussian,
}

/// Sensor graph with a symmetric, non-negative adjacency and empty diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub n_nodes: usize,
    pub adjacency: Tensor<f64>,
    /// Self-edges dropped while loading.
    pub ignored_self_edges: usize,
}

impl RoadNetwork {
    pub fn new(adjacency: Tensor<f64>) -> Result<Self> {
        let &[n, m] = adjacency.shape() else {
            return Err(Error::Data("adjacency must be a matrix".into()));
        };
        if n != m {
            return Err(Error::Data(format!("adjacency must be square, got {n}×{m}")));
        }
        for i in 0..n {
            if adjacency.at2(i, i) != 0.0 {
                return Err(Error::Data(format!("adjacency diagonal entry {i} is non-zero")));
            }
            for j in 0..n {
                let v = adjacency.at2(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!("adjacency entry ({i},{j}) = {v} is invalid")));
                }
                if v != adjacency.at2(j, i) {
                    return Err(Error::Data(format!("adjacency is asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            n_nodes: n,
            adjacency,
            ignored_self_edges: 0,
        })
    }

    /// Undirected ring `0 - 1 - ... - (n-1) - 0`.
    pub fn ring(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        if n > 1 {
            for i in 0..n {
                let j = (i + 1) % n;
                if i != j {
                    a[i * n + j] = 1.0;
                    a[j * n + i] = 1.0;
                }
            }
        }
        Self::new(Tensor::from_vec(&[n, n], a).expect("n > 0")).expect("ring is valid")
    }

    /// Writes the edge list as `from,to,cost` with unit costs for binary
    /// weights.
    pub fn write_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["from", "to", "cost"]).map_err(|e| csv_io(path, e))?;
        for i in 0..self.n_nodes {
            for j in (i + 1)..self.n_nodes {
                let v = self.adjacency.at2(i, j);
                if v > 0.0 {
                    w.write_record([i.to_string(), j.to_string(), v.to_string()])
                        .map_err(|e| csv_io(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a `from,to,cost` edge list (header optional).
///
/// `sigma` defaults to the standard deviation of the edge costs in Gaussian
/// mode.
pub fn load_adjacency(
    path: impl AsRef<Path>,
    n_nodes: usize,
    mode: AdjacencyMode,
    sigma: Option<f64>,
) -> Result<RoadNetwork> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Data(format!("adjacency not found: {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut edges = Vec::new();
    let mut ignored_self_edges = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_io(path, e))?;
        if record.len() < 3 {
            return Err(Error::Parse(format!("{}: row {row} needs from,to,cost", path.display())));
        }
        let parsed = (
            record[0].parse::<f64>(),
            record[1].parse::<f64>(),
            record[2].parse::<f64>(),
        );
        let (from, to, cost) = match parsed {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            _ if row == 0 => continue,
            _ => {
                return Err(Error::Parse(format!(
                    "{}: row {row} is not numeric",
                    path.display()
                )))
            }
        };
        let id = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || v < 0.0 || v >= n_nodes as f64 {
                return Err(Error::Data(format!(
                    "{}: row {row}: node id {v} outside [0, {n_nodes})",
                    path.display()
                )));
            }
            Ok(v as usize)
        };
        let (from, to) = (id(from)?, id(to)?);
        if from == to {
            ignored_self_edges += 1;
            continue;
        }
        if !cost.is_finite() || cost < 0.0 {
            return Err(Error::Data(format!("{}: row {row}: invalid cost {cost}", path.display())));
        }
        edges.push((from, to, cost));
    }
    if ignored_self_edges > 0 {
        log::warn!("{}: ignored {ignored_self_edges} self-edge(s)", path.display());
    }

    let sigma = match (mode, sigma) {
        (AdjacencyMode::Gaussian, Some(s)) if s > 0.0 => s,
        (AdjacencyMode::Gaussian, Some(s)) => {
            return Err(Error::Config(format!("gaussian sigma must be positive, got {s}")))
        }
        (AdjacencyMode::Gaussian, None) => {
            let costs: Vec<f64> = edges.iter().map(|e| e.2).collect();
            let sd = population_std(&costs);
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        }
        (AdjacencyMode::Binary, _) => 1.0,
    };

    let mut a = vec![0.0; n_nodes * n_nodes];
    for (i, j, cost) in edges {
        let w = match mode {
            AdjacencyMode::Binary => 1.0,
            AdjacencyMode::Gaussian => {
                let w = (-(cost * cost) / (sigma * sigma)).exp();
                if w < GAUSSIAN_THRESHOLD {
                    0.0
                } else {
                    w
                }
            }
        };
        a[i * n_nodes + j] = w;
        a[j * n_nodes + i] = w;
    }
    let mut net = RoadNetwork::new(Tensor::from_vec(&[n_nodes, n_nodes], a)?)?;
    net.ignored_self_edges = ignored_self_edges;
    Ok(net)
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

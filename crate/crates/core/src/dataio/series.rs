use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::container::TensorContainer;

/// Seconds between consecutive PeMS samples.
pub const INTERVAL_SECONDS: u32 = 300;

/// Flow counts of `N` sensors over `S` equally spaced steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    /// `S×N`, vehicles per interval.
    pub values: Tensor<f64>,
    pub interval_seconds: u32,
    pub node_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesFormat {
    Csv,
    Container,
}

impl SeriesFormat {
    /// `.csv` is CSV; anything else is treated as a tensor container.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SeriesFormat::Csv,
            _ => SeriesFormat::Container,
        }
    }
}

impl TrafficSeries {
    /// Validates that every entry is a finite, non-negative count.
    pub fn new(values: Tensor<f64>, node_ids: Vec<String>) -> Result<Self> {
        let &[_, nodes] = values.shape() else {
            return Err(Error::Data(format!("series must be S×N, got {:?}", values.shape())));
        };
        if node_ids.len() != nodes {
            return Err(Error::Data(format!("{} node ids for {nodes} columns", node_ids.len())));
        }
        for (i, &v) in values.data().iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "invalid flow {v} at row {}, column {}",
                    i / nodes,
                    i % nodes
                )));
            }
        }
        Ok(Self {
            values,
            interval_seconds: INTERVAL_SECONDS,
            node_ids,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, step: usize, node: usize) -> f64 {
        self.values.data()[step * self.nodes() + node]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(&self.node_ids).map_err(|e| csv_io(path, e))?;
        for row in self.values.data().chunks(self.nodes()) {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

pub fn load_series(path: impl AsRef<Path>, format: SeriesFormat) -> Result<TrafficSeries> {
    let path = path.as_ref();
    match format {
        SeriesFormat::Csv => load_csv(path),
        SeriesFormat::Container => load_container(path),
    }
}

fn load_csv(path: &Path) -> Result<TrafficSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let node_ids: Vec<String> = reader
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let n = node_ids.len();
    if n == 0 {
        return Err(Error::Parse(format!("{}: empty header", path.display())));
    }
    let mut data = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_io(path, e))?;
        if record.len() != n {
            return Err(Error::Parse(format!(
                "{}: row {row} has {} fields, expected {n}",
                path.display(),
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!("{}: row {row}, column {col}: {field:?} is not a number", path.display()))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "{}: invalid flow {v} at row {row}, column {col}",
                    path.display()
                )));
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let steps = data.len() / n;
    TrafficSeries::new(Tensor::from_vec(&[steps, n], data)?, node_ids)
}

/// Reads `flow` (`S×N`) or, failing that, feature 0 of `data` (`S×N×C`, the
/// PeMS flow/occupancy/speed layout).
fn load_container(path: &Path) -> Result<TrafficSeries> {
    let c = TensorContainer::load(path)?;
    let values: Tensor<f64> = if let Some(flow) = c.get("flow") {
        if flow.rank() != 2 {
            return Err(Error::Data(format!("flow must be S×N, got {:?}", flow.shape())));
        }
        flow.cast()
    } else if let Some(all) = c.get("data") {
        let &[steps, nodes, features] = all.shape() else {
            return Err(Error::Data(format!("data must be S×N×C, got {:?}", all.shape())));
        };
        let flow = all
            .data()
            .chunks(features)
            .map(|f| f[0] as f64)
            .collect();
        Tensor::from_vec(&[steps, nodes], flow)?
    } else {
        return Err(Error::Data(format!("{}: no `flow` or `data` tensor", path.display())));
    };
    let ids = match c.metadata.get("node_ids") {
        Some(ids) => ids.split(',').map(str::to_string).collect(),
        None => (0..values.shape()[1]).map(|i| i.to_string()).collect(),
    };
    TrafficSeries::new(values, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_column_minimum() {
        let body: String = std::iter::once("n0\n".to_string())
            .chain((0..13).map(|i| format!("{i}\n")))
            .collect();
        let f = write(&body);
        let s = load_series(f.path(), SeriesFormat::Csv).unwrap();
        assert_eq!((s.steps(), s.nodes()), (13, 1));
        assert_eq!(s.get(12, 0), 12.0);
        assert_eq!(s.interval_seconds, 300);
    }

    #[test]
    fn rejects_nan_and_negative_with_position() {
        let f = write("a,b\n1,2\n3,NaN\n");
        let err = load_series(f.path(), SeriesFormat::Csv).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("column 1"), "{err}");
        let f = write("a,b\n1,-2\n");
        assert!(matches!(load_series(f.path(), SeriesFormat::Csv), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_ragged_rows() {
        let f = write("a,b\n1,2\n3\n");
        assert!(matches!(load_series(f.path(), SeriesFormat::Csv), Err(Error::Parse(_))));
    }

    #[test]
    fn container_flow_and_pems_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = TensorContainer::new();
        c.insert("flow", Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = dir.path().join("flow.bin");
        c.save(&p).unwrap();
        let s = load_series(&p, SeriesFormat::Container).unwrap();
        assert_eq!(s.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // flow, occupancy, speed per sensor; only flow is kept
        let mut c = TensorContainer::new();
        let data = vec![10.0, 0.1, 60.0, 20.0, 0.2, 61.0, 30.0, 0.3, 62.0, 40.0, 0.4, 63.0];
        c.insert("data", Tensor::from_vec(&[2, 2, 3], data).unwrap());
        let p = dir.path().join("pems.bin");
        c.save(&p).unwrap();
        let s = load_series(&p, SeriesFormat::Container).unwrap();
        assert_eq!(s.values.data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn csv_round_trip() {
        let s = TrafficSeries::new(
            Tensor::from_vec(&[2, 2], vec![1.5, 0.0, 3.25, 7.0]).unwrap(),
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(load_series(&p, SeriesFormat::Csv).unwrap(), s);
    }
}

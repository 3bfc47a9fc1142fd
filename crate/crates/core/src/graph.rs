//! Symmetric adjacency normalization and the graph-embedding layer.

use crate::dataio::RoadNetwork;
use crate::error::{dim_err, Error, Result};
use crate::numerics::rng::stream;
use crate::numerics::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// `D̃^(−1/2) (A + I) D̃^(−1/2)` with `D̃` the degree matrix of `A + I`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency<S> {
    pub matrix: Tensor<S>,
}

impl<S: Scalar> NormalizedAdjacency<S> {
    pub fn n_nodes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cast<T: Scalar>(&self) -> NormalizedAdjacency<T> {
        NormalizedAdjacency {
            matrix: self.matrix.cast(),
        }
    }

    /// Applies the node permutation `perm` (new index `i` takes old node
    /// `perm[i]`) to rows and columns.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes();
        let mut data = Vec::with_capacity(n * n);
        for &pi in perm {
            for &pj in perm {
                data.push(self.matrix.at2(pi, pj));
            }
        }
        Self {
            matrix: Tensor::from_vec(&[n, n], data).expect("square"),
        }
    }
}

pub fn normalize_adjacency(network: &RoadNetwork) -> Result<NormalizedAdjacency<f64>> {
    normalize_adjacency_matrix(&network.adjacency)
}

pub fn normalize_adjacency_matrix(a: &Tensor<f64>) -> Result<NormalizedAdjacency<f64>> {
    let &[n, m] = a.shape() else {
        return Err(Error::Data("adjacency must be a matrix".into()));
    };
    if n != m {
        return Err(Error::Data(format!("adjacency must be square, got {n}×{m}")));
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.at2(i, j);
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Data(format!("adjacency entry ({i},{j}) = {v} is invalid")));
            }
            if v != a.at2(j, i) {
                return Err(Error::Data(format!("adjacency is asymmetric at ({i},{j})")));
            }
        }
        if a.at2(i, i) != 0.0 {
            return Err(Error::Data(format!("adjacency diagonal entry {i} is non-zero")));
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let degree = 1.0 + (0..n).map(|j| a.at2(i, j)).sum::<f64>();
            1.0 / degree.sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let tilde = a.at2(i, j) + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = inv_sqrt_deg[i] * tilde * inv_sqrt_deg[j];
        }
    }
    Ok(NormalizedAdjacency {
        matrix: Tensor::from_vec(&[n, n], out)?,
    })
}

/// `GE_F(X) = ReLU(Â X W + b)`, with the scalar-per-step aggregate expanded to
/// `F` channels by `W: 1×F`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl GcnLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("GCN needs at least one channel".into()));
        }
        let w_name = format!("{prefix}.weight");
        let mut rng = stream(seed, &w_name);
        let weight = store.add(&w_name, init::glorot_uniform(1, channels, &mut rng), true)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]), true)?;
        Ok(Self {
            weight,
            bias,
            channels,
        })
    }

    /// `x: (B·N)×T` → `(B·N)×F×T`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        adj: &NormalizedAdjacency<S>,
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if rows % adj.n_nodes() != 0 {
            return Err(dim_err!(
                "{rows} input rows do not match a {}-node adjacency",
                adj.n_nodes()
            ));
        }
        let aggregated = g.graph_aggregate(&adj.matrix, x)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let pre = g.channel_expand(aggregated, w, b)?;
        Ok(g.relu(pre))
    }
}

/// Eager single-sample forward: `x: N×T` → `N×F×T`.
pub fn gcn_forward<S: Scalar>(
    x: &Tensor<S>,
    adj: &NormalizedAdjacency<S>,
    layer: &GcnLayer,
    store: &ParamStore<S>,
) -> Result<Tensor<S>> {
    if x.rank() != 2 || x.shape()[0] != adj.n_nodes() {
        return Err(dim_err!(
            "input {:?} does not match a {}-node adjacency",
            x.shape(),
            adj.n_nodes()
        ));
    }
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone());
    let out = layer.forward(&mut g, store, xv, adj)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adj(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn isolated_node() {
        let r = normalize_adjacency_matrix(&adj(&[vec![0.0]])).unwrap();
        assert_eq!(r.matrix.data(), &[1.0]);
    }

    #[test]
    fn two_connected_nodes() {
        let r = normalize_adjacency_matrix(&adj(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        for &v in r.matrix.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn no_edges_gives_identity() {
        let r = normalize_adjacency_matrix(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(r.matrix, Tensor::eye(3));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = adj(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(normalize_adjacency_matrix(&a), Err(Error::Data(_))));
    }

    fn layer_with(store: &mut ParamStore<f64>, w: &[f64], b: &[f64]) -> GcnLayer {
        let layer = GcnLayer::new(store, "gcn", w.len(), 0).unwrap();
        store.get_mut(layer.weight).value = Tensor::from_vec(&[1, w.len()], w.to_vec()).unwrap();
        store.get_mut(layer.bias).value = Tensor::from_vec(&[b.len()], b.to_vec()).unwrap();
        layer
    }

    #[test]
    fn zero_input_zero_bias() {
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 4, 3).unwrap();
        let a = normalize_adjacency_matrix(&Tensor::zeros(&[3, 3])).unwrap();
        let out = gcn_forward(&Tensor::zeros(&[3, 5]), &a, &layer, &store).unwrap();
        assert_eq!(out, Tensor::zeros(&[3, 4, 5]));
    }

    #[test]
    fn scalar_example() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, &[2.0], &[-1.0]);
        let a = normalize_adjacency_matrix(&Tensor::zeros(&[1, 1])).unwrap();
        let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let out = gcn_forward(&x, &a, &layer, &store).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn relu_on_bias() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, &[0.7, -0.3], &[1.0, -1.0]);
        let a = normalize_adjacency_matrix(&adj(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        let out = gcn_forward(&Tensor::zeros(&[2, 3]), &a, &layer, &store).unwrap();
        for n in 0..2 {
            for t in 0..3 {
                assert_eq!(out.at3(n, 0, t), 1.0);
                assert_eq!(out.at3(n, 1, t), 0.0);
            }
        }
    }

    #[test]
    fn node_count_mismatch() {
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 2, 0).unwrap();
        let a = normalize_adjacency_matrix(&Tensor::zeros(&[3, 3])).unwrap();
        assert!(matches!(
            gcn_forward(&Tensor::zeros(&[2, 4]), &a, &layer, &store),
            Err(Error::Dimension(_))
        ));
    }
}

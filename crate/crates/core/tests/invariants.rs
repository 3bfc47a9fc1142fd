//! Property tests over random graphs, inputs and permutations.

use nalgebra::DMatrix;
use proptest::prelude::*;
use tpllm_core::embedding::{EmbeddingConfig, InputEmbedding};
use tpllm_core::graph::{normalize_adjacency_matrix, GcnLayer, NormalizedAdjacency};
use tpllm_core::model::loss_mae;
use tpllm_core::numerics::ops::softmax_attention;
use tpllm_core::numerics::rng::seeded;
use tpllm_core::numerics::{init, AttentionMask, Graph, ParamStore, Tensor};
use tpllm_core::train::metrics::{mae, rmse};

fn graph_from(n: usize, weights: &[f64]) -> Tensor<f64> {
    let mut a = vec![0.0; n * n];
    let mut w = weights.iter().cycle();
    for i in 0..n {
        for j in i + 1..n {
            let v = *w.next().unwrap();
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    Tensor::from_vec(&[n, n], a).unwrap()
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let cols = x.numel() / x.shape()[0];
    let data = perm.iter().flat_map(|&p| x.data()[p * cols..(p + 1) * cols].to_vec()).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn graph_and_perm() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>, u64)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec(prop_oneof![Just(0.0), 0.05f64..3.0], 1..=28),
            perm_strategy(n),
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_is_symmetric_with_bounded_spectrum((n, w, _, _) in graph_and_perm()) {
        let m = normalize_adjacency_matrix(&graph_from(n, &w)).unwrap();
        let d = DMatrix::from_row_slice(n, n, m.matrix.data());
        prop_assert!((&d - d.transpose()).abs().max() < 1e-7);
        let eig = d.symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|e| e.abs() <= 1.0 + 1e-6), "{eig:?}");
    }

    #[test]
    fn gcn_is_permutation_equivariant((n, w, perm, seed) in graph_and_perm()) {
        let adj = normalize_adjacency_matrix(&graph_from(n, &w)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let gcn = GcnLayer::new(&mut store, "gcn", 5, seed).unwrap();
        let x: Tensor<f64> = init::normal(&[n, 7], 1.0, &mut seeded(seed));
        let run = |x: &Tensor<f64>, adj: &NormalizedAdjacency<f64>| {
            let mut g = Graph::new(false, 0);
            let xv = g.input(x.clone());
            let y = gcn.forward(&mut g, &store, xv, adj).unwrap();
            g.value(y).clone()
        };
        let y = run(&x, &adj);
        let yp = run(&permute_rows(&x, &perm), &adj.permuted(&perm));
        prop_assert!(yp.max_abs_diff(&permute_rows(&y, &perm)) < 1e-12);
    }

    #[test]
    fn embedding_maps_every_node_count_to_n_by_d((n, w, perm, seed) in graph_and_perm()) {
        let adj = normalize_adjacency_matrix(&graph_from(n, &w)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let emb = InputEmbedding::new(&mut store, EmbeddingConfig::new(6, 12, 16), seed).unwrap();
        let x: Tensor<f64> = init::normal(&[n, 12], 1.0, &mut seeded(seed));
        let run = |x: &Tensor<f64>, adj: &NormalizedAdjacency<f64>| {
            let mut g = Graph::new(false, 0);
            let xv = g.input(x.clone());
            let y = emb.forward(&mut g, &store, xv, adj).unwrap();
            g.value(y).clone()
        };
        let y = run(&x, &adj);
        prop_assert_eq!(y.shape(), &[n, 16]);
        let yp = run(&permute_rows(&x, &perm), &adj.permuted(&perm));
        prop_assert!(yp.max_abs_diff(&permute_rows(&y, &perm)) < 1e-5);
    }

    #[test]
    fn attention_rows_are_convex_weights(heads in 1usize..4, tokens in 1usize..9, dh in 1usize..6, seed: u64, causal: bool) {
        let mut rng = seeded(seed);
        let q: Tensor<f64> = init::normal(&[heads, tokens, dh], 3.0, &mut rng);
        let k: Tensor<f64> = init::normal(&[heads, tokens, dh], 3.0, &mut rng);
        let mask = if causal { AttentionMask::Causal } else { AttentionMask::Full };
        // Attending over all-ones values returns each row's weight sum.
        let out = softmax_attention(&q, &k, &Tensor::ones(&[heads, tokens, dh]), mask).unwrap();
        prop_assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn mae_loss_is_zero_only_at_the_target(values in proptest::collection::vec(-50.0f64..50.0, 1..40), shift in proptest::collection::vec(-2.0f64..2.0, 1..40)) {
        let n = values.len().min(shift.len());
        let t = Tensor::from_vec(&[n], values[..n].to_vec()).unwrap();
        let p = Tensor::from_vec(&[n], values[..n].iter().zip(&shift).map(|(v, s)| v + s).collect()).unwrap();
        let loss = loss_mae(&p, &t).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, p == t);
        prop_assert_eq!(loss_mae(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn rmse_never_below_mae(pairs in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..100)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(rmse(&p, &t) >= mae(&p, &t) - 1e-12);
    }
}

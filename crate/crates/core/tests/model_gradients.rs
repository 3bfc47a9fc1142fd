//! Gradient checks through the graph layer, the embedding and the full model.

use tpllm_core::backbone::BackboneConfig;
use tpllm_core::dataio::{NormStats, RoadNetwork};
use tpllm_core::embedding::{ChannelReduction, EmbeddingConfig, InputEmbedding, LnAxis};
use tpllm_core::graph::{normalize_adjacency, GcnLayer};
use tpllm_core::model::{ModelConfig, TpllmModel};
use tpllm_core::numerics::rng::seeded;
use tpllm_core::numerics::{grad_check, init, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};
use tpllm_core::Result;

const TOL: f64 = 1e-4;
const KINK: f64 = 1e-3;

fn weighted_sum(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.input(w.clone());
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn assert_passes(report: &GradCheckReport) {
    assert!(report.kink_margin > KINK, "kink margin {}", report.kink_margin);
    assert!(report.max_rel_err < TOL, "max rel err {} at {:?}", report.max_rel_err, report.worst());
}

#[test]
fn gcn_weights_bias_and_input() {
    let adj = normalize_adjacency(&RoadNetwork::ring(5)).unwrap();
    let mut store = ParamStore::<f64>::new();
    let gcn = GcnLayer::new(&mut store, "gcn", 4, 3).unwrap();
    // Bias values keep every pre-activation clear of the ReLU kink.
    store.get_mut(gcn.bias).value = Tensor::from_vec(&[4], vec![0.7, -0.4, 0.25, 1.1]).unwrap();
    let x = store.add("x", init::normal(&[5, 6], 1.0, &mut seeded(4)), true).unwrap();
    let w = init::normal(&[5, 4, 6], 1.0, &mut seeded(5));
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.param(s, x);
        let y = gcn.forward(g, s, xv, &adj)?;
        weighted_sum(g, y, &w)
    };
    let mut probe = Graph::new(false, 0);
    f(&mut probe, &store).unwrap();
    if probe.kink_margin() <= KINK {
        panic!("evaluation point too close to a kink: {}", probe.kink_margin());
    }
    assert_passes(&grad_check(&mut store, f, &GradCheckConfig::default()).unwrap());
}

#[test]
fn embedding_end_to_end_for_several_node_counts() {
    for (n, axis, reduction) in [(1, LnAxis::Channel, ChannelReduction::Last), (3, LnAxis::Time, ChannelReduction::Mean), (4, LnAxis::Channel, ChannelReduction::Mean)] {
        let found = (0..40u64).find_map(|seed| {
            let adj = normalize_adjacency(&RoadNetwork::ring(n)).unwrap();
            let mut store = ParamStore::<f64>::new();
            let cfg = EmbeddingConfig {
                ln_axis: axis,
                reduction,
                ..EmbeddingConfig::new(4, 6, 8)
            };
            let emb = InputEmbedding::new(&mut store, cfg, seed).unwrap();
            // Unit gamma makes the channel mean of a channel-normalized map
            // identically zero, which would hide every upstream gradient.
            let gamma = store.get_mut(emb.ln_gamma);
            gamma.value = init::normal(gamma.value.shape(), 1.0, &mut seeded(seed + 300));
            let x = init::normal(&[n, 6], 1.0, &mut seeded(seed + 100));
            let w = init::normal(&[n, 8], 1.0, &mut seeded(seed + 200));
            let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.input(x.clone());
                let y = emb.forward(g, s, xv, &adj)?;
                weighted_sum(g, y, &w)
            };
            let mut probe = Graph::new(false, 0);
            f(&mut probe, &store).unwrap();
            (probe.kink_margin() > KINK).then(|| grad_check(&mut store, f, &GradCheckConfig::default()).unwrap())
        });
        let report = found.unwrap_or_else(|| panic!("no kink-free evaluation point for N={n}"));
        assert_passes(&report);
        assert!(report.checks.iter().any(|c| c.param.starts_with("embed.gcn") && c.analytic != 0.0));
        assert!(report.checks.iter().any(|c| c.param.starts_with("embed.conv") && c.analytic != 0.0));
    }
}

#[test]
fn full_model_under_mae_loss() {
    let report = (0..50u64)
        .find_map(|seed| {
            let cfg = ModelConfig {
                horizon: 3,
                channels: 4,
                backbone: BackboneConfig::new(1, 2, 16),
                ..ModelConfig::default()
            };
            let mut store = ParamStore::<f64>::new();
            let model = TpllmModel::new(&mut store, cfg, seed).unwrap().with_norm(&NormStats { mean: 300.0, std: 100.0 });
            let mut rng = seeded(seed);
            for (_, p) in store.iter_mut() {
                if p.name.ends_with("lora_b") || (p.name.starts_with("block.") && p.name.ends_with(".weight")) {
                    p.value = init::normal(p.value.shape(), 0.2, &mut rng);
                }
            }
            let adj = normalize_adjacency(&RoadNetwork::ring(3)).unwrap();
            let x = init::normal(&[6, 12], 1.0, &mut rng);
            let y = init::normal(&[6, 3], 1.0, &mut rng);
            let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
                let xv = g.input(x.clone());
                let pred = model.forward(g, s, xv, &adj)?;
                g.mae(pred, &y)
            };
            let mut probe = Graph::new(false, 0);
            f(&mut probe, &store).unwrap();
            let cfg = GradCheckConfig {
                step: 1e-5,
                samples: Some(300),
                seed,
            };
            (probe.kink_margin() > KINK).then(|| grad_check(&mut store, f, &cfg).unwrap())
        })
        .expect("a kink-free evaluation point");
    assert_passes(&report);
    for prefix in ["embed.", "block.0.attn.q.lora_c", "head."] {
        assert!(report.checks.iter().any(|c| c.param.starts_with(prefix)), "{prefix} not sampled");
    }
}

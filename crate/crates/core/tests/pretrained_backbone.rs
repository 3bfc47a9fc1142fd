//! GPT-2-small-shaped weights: adapter count, loading a converted checkpoint
//! and one forward pass.

use tpllm_core::backbone::{save_params, trainable_report, Backbone, BackboneConfig, BackbonePreset, LoraConfig};
use tpllm_core::dataio::{RoadNetwork, TensorContainer};
use tpllm_core::graph::normalize_adjacency;
use tpllm_core::model::{ModelConfig, TpllmModel};
use tpllm_core::numerics::rng::seeded;
use tpllm_core::numerics::{init, ParamStore};

#[test]
fn gpt2_small_checkpoint_loads_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gpt2.bin");
    {
        let mut donor = ParamStore::<f32>::new();
        let mut bb = Backbone::new(&mut donor, BackboneConfig::preset(BackbonePreset::Gpt2Small), 1234).unwrap();
        bb.attach_lora(&mut donor, LoraConfig { rank: 4, ..LoraConfig::default() }, 0).unwrap();
        // 12 layers × {Q, K} × (768×4 + 4×768).
        assert_eq!(trainable_report(&donor).backbone_trainable, 147_456);

        let mut base = ParamStore::<f32>::new();
        Backbone::new(&mut base, BackboneConfig::gpt2_small(), 1234).unwrap();
        let mut c = TensorContainer::new();
        save_params(&base, &mut c);
        c.save(&path).unwrap();
    }

    let cfg = ModelConfig {
        backbone: BackboneConfig::gpt2_small(),
        lora: Some(LoraConfig { rank: 16, ..LoraConfig::default() }),
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let model = TpllmModel::new(&mut store, cfg, 7).unwrap();
    let before = store.by_name("block.11.ffn.proj.weight").unwrap().value.clone();
    let loaded = model.load_backbone_weights(&mut store, &path).unwrap();
    assert_eq!(loaded, 12 * 16 + 2);
    let after = &store.by_name("block.11.ffn.proj.weight").unwrap().value;
    assert!(!after.bit_eq(&before));
    let c = TensorContainer::load(&path).unwrap();
    assert!(after.bit_eq(c.get("block.11.ffn.proj.weight").unwrap()));

    let adj = normalize_adjacency(&RoadNetwork::ring(4)).unwrap().cast::<f32>();
    let x = init::normal(&[4, 12], 1.0, &mut seeded(1));
    let y = model.predict(&store, &x, &adj).unwrap();
    assert_eq!(y.shape(), &[4, 12]);
    assert!(y.is_finite());
}

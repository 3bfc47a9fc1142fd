use super::lora::lora_projection;
use super::*;
use crate::dataio::TensorContainer;
use crate::numerics::rng::seeded;
use crate::numerics::ops::matmul;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    init::normal(shape, 1.0, &mut seeded(seed))
}

fn small(layers: usize, mask: AttentionMask) -> BackboneConfig {
    let mut cfg = BackboneConfig::new(layers, 2, 8);
    cfg.attention_mask = mask;
    cfg
}

#[test]
fn presets() {
    let t = BackboneConfig::tiny();
    assert_eq!((t.layers, t.heads, t.width, t.ffn_width), (2, 4, 64, 256));
    let g = BackboneConfig::gpt2_small();
    assert_eq!((g.layers, g.heads, g.width, g.ffn_width), (12, 12, 768, 3072));
    assert_eq!(t.attention_mask, AttentionMask::Causal);
    assert_eq!(t.positional, Positional::None);
    assert!(BackboneConfig::new(1, 3, 8).validate().is_err());
    assert_eq!("gpt2-small".parse::<BackbonePreset>().unwrap(), BackbonePreset::Gpt2Small);
    assert!("gpt3".parse::<BackbonePreset>().is_err());
}

#[test]
fn every_base_weight_is_frozen() {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = small(3, AttentionMask::Causal);
    cfg.positional = Positional::Learned;
    Backbone::new(&mut store, cfg, 1).unwrap();
    assert!(store.len() > 0);
    assert!(store.iter().all(|(_, p)| !p.trainable));
    let report = trainable_report(&store);
    assert_eq!(report.trainable_count, 0);
    assert_eq!(report.fraction, 0.0);
}

#[test]
fn zero_layers_is_final_layer_norm() {
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, small(0, AttentionMask::Causal), 1).unwrap();
    let x = random(&[5, 8], 3);
    let y = backbone_forward(&bb, &store, &x).unwrap();
    let expected = crate::numerics::ops::layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), LAYER_NORM_EPS).unwrap();
    assert!(y.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn shape_contract() {
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut store, BackboneConfig::tiny(), 1).unwrap();
    let x = init::normal(&[5, 64], 1.0, &mut seeded(2));
    assert_eq!(backbone_forward(&bb, &store, &x).unwrap().shape(), &[5, 64]);
    let wrong = Tensor::<f32>::zeros(&[5, 32]);
    assert!(backbone_forward(&bb, &store, &wrong).is_err());
}

#[test]
fn token_overflow_is_a_capacity_error() {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = small(1, AttentionMask::Causal);
    cfg.max_tokens = 4;
    let bb = Backbone::new(&mut store, cfg, 1).unwrap();
    assert!(backbone_forward(&bb, &store, &random(&[4, 8], 1)).is_ok());
    let err = backbone_forward(&bb, &store, &random(&[5, 8], 1)).unwrap_err();
    assert!(matches!(err, Error::Capacity(_)), "{err}");
}

#[test]
fn full_attention_is_permutation_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let mut bb = Backbone::new(&mut store, small(2, AttentionMask::Full), 4).unwrap();
    bb.attach_lora(&mut store, LoraConfig { rank: 2, ..Default::default() }, 4).unwrap();
    for (_, p) in store.iter_mut() {
        if p.name.ends_with("lora_b") {
            p.value = random(p.value.shape(), 9);
        }
    }
    let x = random(&[6, 8], 5);
    let y = backbone_forward(&bb, &store, &x).unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_rows(&perm.iter().map(|&i| x.data()[i * 8..][..8].to_vec()).collect::<Vec<_>>()).unwrap();
    let yp = backbone_forward(&bb, &store, &xp).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((yp.at2(r, c) - y.at2(i, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_rows_ignore_later_tokens() {
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, small(2, AttentionMask::Causal), 4).unwrap();
    let x = random(&[5, 8], 5);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[3 * 8..] {
        *v += 1.5;
    }
    let y = backbone_forward(&bb, &store, &x).unwrap();
    let y2 = backbone_forward(&bb, &store, &x2).unwrap();
    assert_eq!(&y.data()[..24], &y2.data()[..24]);
    assert_ne!(&y.data()[24..], &y2.data()[24..]);
}

#[test]
fn learned_positions_break_equivariance() {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = small(1, AttentionMask::Full);
    cfg.positional = Positional::Learned;
    let bb = Backbone::new(&mut store, cfg, 4).unwrap();
    let x = random(&[3, 8], 5);
    let swapped = Tensor::from_rows(&[x.data()[8..16].to_vec(), x.data()[..8].to_vec(), x.data()[16..].to_vec()]).unwrap();
    let y = backbone_forward(&bb, &store, &x).unwrap();
    let ys = backbone_forward(&bb, &store, &swapped).unwrap();
    assert!((ys.at2(0, 0) - y.at2(1, 0)).abs() > 1e-9);
}

#[test]
fn fresh_adapter_is_exact_identity() {
    let h0 = random(&[7, 6], 1);
    let w0 = random(&[6, 5], 2);
    let cfg = LoraConfig { rank: 3, alpha: 32.0, dropout: 0.1 };
    let b = Tensor::zeros(&[6, 3]);
    let c = random(&[3, 5], 3);
    let base = matmul(&h0, &w0).unwrap();
    for training in [false, true] {
        let h = lora_projection(&h0, &w0, &b, &c, &cfg, training, 7).unwrap();
        assert!(h.bit_eq(&base));
    }
    assert!(lora_projection(&h0, &w0, &Tensor::zeros(&[5, 3]), &c, &cfg, false, 0).is_err());
}

#[test]
fn adapter_path_formula() {
    let h0 = random(&[4, 6], 1);
    let w0 = random(&[6, 5], 2);
    let b = random(&[6, 2], 4);
    let c = random(&[2, 5], 3);
    let cfg = LoraConfig { rank: 2, alpha: 32.0, dropout: 0.1 };
    let h = lora_projection(&h0, &w0, &b, &c, &cfg, false, 0).unwrap();
    let base = matmul(&h0, &w0).unwrap();
    let delta = matmul(&matmul(&h0, &b).unwrap(), &c).unwrap();
    let expected = base.zip_map(&delta, |a, d| a + 16.0 * d).unwrap();
    assert!(h.max_abs_diff(&expected) < 1e-12);
    // Dropout touches only the adapter path.
    let ht = lora_projection(&h0, &w0, &b, &c, &cfg, true, 11).unwrap();
    assert!(ht.max_abs_diff(&h) > 0.0);
}

#[test]
fn scale_and_parameter_count() {
    let cfg = LoraConfig { rank: 4, alpha: 32.0, dropout: 0.1 };
    assert_eq!(cfg.scale(), 8.0);
    let mut store = ParamStore::<f32>::new();
    LoraAdapter::new(&mut store, "x", 768, 768, &cfg, 0).unwrap();
    assert_eq!(store.numel(), 2 * 768 * 4);
    assert_eq!(store.trainable_numel(), 6144);
}

#[test]
fn attach_lora_contract() {
    let mut store = ParamStore::<f32>::new();
    let mut bb = Backbone::new(&mut store, BackboneConfig::new(12, 2, 8), 0).unwrap();
    bb.attach_lora(&mut store, LoraConfig { rank: 4, ..Default::default() }, 0).unwrap();
    assert_eq!(bb.adapter_count(), 24);
    let report = trainable_report(&store);
    assert_eq!(report.trainable_count, 24 * 2 * 8 * 4);
    assert_eq!(report.backbone_trainable, report.trainable_count);
    assert!(report
        .trainable_tensors
        .iter()
        .all(|n| n.ends_with("lora_b") || n.ends_with("lora_c")));
    let again = bb.attach_lora(&mut store, LoraConfig::default(), 0);
    assert!(matches!(again, Err(Error::Config(_))));

    for r in [4, 8, 16, 32, 48, 64] {
        let mut store = ParamStore::<f32>::new();
        let mut bb = Backbone::new(&mut store, BackboneConfig::new(1, 2, 64), 0).unwrap();
        bb.attach_lora(&mut store, LoraConfig { rank: r, ..Default::default() }, 0).unwrap();
        assert!(store.iter().filter(|(_, p)| p.name.ends_with("lora_b")).all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
    }
    let mut store = ParamStore::<f32>::new();
    let mut bb = Backbone::new(&mut store, BackboneConfig::new(1, 2, 8), 0).unwrap();
    assert!(bb.attach_lora(&mut store, LoraConfig { rank: 0, ..Default::default() }, 0).is_err());
    assert_eq!(bb.adapter_count(), 0);
}

#[test]
fn zero_initialized_b_still_receives_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut bb = Backbone::new(&mut store, small(2, AttentionMask::Causal), 0).unwrap();
    bb.attach_lora(&mut store, LoraConfig { rank: 2, alpha: 32.0, dropout: 0.0 }, 0).unwrap();
    let mut g = Graph::new(true, 0);
    let x = g.input(random(&[2 * 4, 8], 3));
    let y = bb.forward(&mut g, &store, x, 4).unwrap();
    let target = random(&[8, 8], 4);
    let loss = g.mae(y, &target).unwrap();
    let grads = g.backward(loss).unwrap();
    grads.accumulate_into(&g, &mut store);
    for (_, p) in store.iter() {
        if p.name.ends_with("lora_b") {
            let grad = p.grad.as_ref().expect("adapter gradient");
            assert!(grad.data().iter().any(|&v| v != 0.0), "{}", p.name);
        }
        if !p.trainable {
            assert!(p.grad.is_none(), "{}", p.name);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut store = ParamStore::<f32>::new();
    let mut bb = Backbone::new(&mut store, BackboneConfig::tiny(), 8).unwrap();
    bb.attach_lora(&mut store, LoraConfig::default(), 8).unwrap();
    let mut rng = seeded(1);
    for (_, p) in store.iter_mut() {
        let noise: Vec<f32> = (0..p.value.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        p.value.data_mut().iter_mut().zip(noise).for_each(|(v, e)| *v += e);
    }
    let mut c = TensorContainer::new();
    save_params(&store, &mut c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    c.save(&path).unwrap();

    let mut fresh = ParamStore::<f32>::new();
    let mut bb2 = Backbone::new(&mut fresh, BackboneConfig::tiny(), 99).unwrap();
    bb2.attach_lora(&mut fresh, LoraConfig::default(), 99).unwrap();
    load_params(&mut fresh, &TensorContainer::load(&path).unwrap()).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.bit_eq(&b.value), "{}", a.name);
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(TensorContainer::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, small(1, AttentionMask::Causal), 0).unwrap();
    let mut c = TensorContainer::new();
    save_params(&store, &mut c);
    c.tensors.remove("block.0.attn.q.weight");
    c.tensors.remove("ln_f.beta");
    let before = store.snapshot();
    let err = load_params(&mut store, &c).unwrap_err().to_string();
    assert!(err.contains("block.0.attn.q.weight") && err.contains("ln_f.beta"), "{err}");
    assert!(store.snapshot().iter().zip(&before).all(|(a, b)| a.bit_eq(b)));

    let mut c = TensorContainer::new();
    save_params(&store, &mut c);
    c.insert("block.0.attn.k.bias", Tensor::zeros(&[3]));
    let err = load_params(&mut store, &c).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)) && err.to_string().contains("block.0.attn.k.bias"));

    let mut partial = TensorContainer::new();
    partial.insert("block.0.attn.v.weight", Tensor::full(&[8, 8], 0.5));
    let n = load_params_matching(&mut store, &partial, |_| false).unwrap();
    assert_eq!(n, 1);
    assert_eq!(store.by_name("block.0.attn.v.weight").unwrap().value.data()[0], 0.5);
}

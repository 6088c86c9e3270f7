use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2a_core::autograd::{ParamStore, StoragePolicy, Tape};
use s2a_core::memory::default_quantize;
use s2a_core::petl::{load_checkpoint, save_checkpoint, BiasLinear, Cap, Lrp, Lsb, Method, Model, ViTConfig};
use s2a_core::tensor::{depthwise_conv, pointwise_conv};
use s2a_core::train::AdamW;
use s2a_core::{Error, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn images(seed: u64, batch: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, 16, 16, 1], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn bias_linear_with_identity_weight_passes_input_through() {
    let mut store = ParamStore::new();
    let lin = BiasLinear::new(&mut store, "fc", Tensor::eye(4), Some(Tensor::zeros(&[4])), false, true).unwrap();
    let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f32 - 5.0).collect()).unwrap();
    let mut tape = Tape::new(false);
    let xv = tape.input(x.clone());
    let y = lin.forward(&mut tape, &store, "fc", &xv).unwrap();
    assert_eq!(y.value(), &x);
    let loss = tape.sum("loss", &y).unwrap();
    let grads = tape.backward(&loss, &store).unwrap();
    assert_eq!(grads.param(lin.b.unwrap()).unwrap().data(), &[3.0; 4]);
    assert!(grads.param(lin.w).is_none());
    assert_eq!(tape.live_activation_bytes(), 0);
}

#[test]
fn lrp_is_identity_at_init_and_passes_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let (batch, tokens, channels) = (2, 5, 6);
    let lrp = Lrp::new(&mut store, "lrp", tokens, channels, 2, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[batch * tokens, channels]);
    let readout = rand_tensor(&mut rng, &[batch * tokens, channels]);

    let mut tape = Tape::new(false);
    let xv = tape.leaf(x.clone(), true);
    let y = lrp.forward(&mut tape, &store, "lrp", &xv).unwrap();
    assert_eq!(y.value(), &x);
    let loss = tape.weighted_sum("loss", &y, &readout).unwrap();
    let grads = tape.backward(&loss, &store).unwrap();
    assert_eq!(grads.grad(&xv).unwrap(), &readout);
    // With A at zero, dL/dB = Aᵀ·G vanishes while A already moves.
    assert!(grads.param(lrp.b).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(grads.param(lrp.a).unwrap().data().iter().any(|&g| g != 0.0));
    assert_eq!(tape.live_activation_bytes(), 0);
}

#[test]
fn lrp_rank_must_be_below_tokens_and_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    for (t, c, r) in [(5, 6, 0), (5, 6, 5), (8, 4, 4)] {
        let err = Lrp::new(&mut store, &format!("lrp{t}{c}{r}"), t, c, r, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

#[test]
fn cap_examples() {
    let mut tape = Tape::new(false);
    let x = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap(), true);
    let same = Cap { factor: 1 }.forward(&mut tape, "cap1", &x).unwrap();
    assert_eq!(same.value(), x.value());
    let y = Cap { factor: 2 }.forward(&mut tape, "cap2", &x).unwrap();
    assert_eq!(y.value().data(), &[2.0, 6.0]);
    let loss = tape.sum("loss", &y).unwrap();
    let grads = tape.backward(&loss, &ParamStore::new()).unwrap();
    assert_eq!(grads.grad(&x).unwrap().data(), &[0.5; 4]);

    let err = Cap { factor: 3 }.forward(&mut tape, "cap3", &x).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn identity_lsb(store: &mut ParamStore, width: usize) -> Lsb {
    let pw1 = BiasLinear::new(store, "lsb.pw1", Tensor::eye(width), Some(Tensor::zeros(&[width])), true, true).unwrap();
    let delta = Tensor::from_fn(&[3, 3, width], |i| if i / width == 4 { 1.0 } else { 0.0 });
    let dw_kernel = store.add("lsb.dw.k", delta, true, true).unwrap();
    let dw_bias = store.add("lsb.dw.b", Tensor::zeros(&[width]), true, false).unwrap();
    let pw2 = BiasLinear::new(store, "lsb.pw2", Tensor::eye(width), Some(Tensor::zeros(&[width])), true, true).unwrap();
    Lsb { pw1, dw_kernel, dw_bias, pw2 }
}

#[test]
fn lsb_of_identity_pieces_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let lsb = identity_lsb(&mut store, 4);
    let x = rand_tensor(&mut rng, &[2 * 3 * 3, 4]);
    let mut tape = Tape::new(false);
    let xv = tape.input(x.clone());
    let y = lsb.forward(&mut tape, &store, "lsb", &xv, None, 2, 3).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn lsb_matches_straight_line_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let (batch, side, width) = (2, 4, 8);
    let lsb = Lsb::new(&mut store, "lsb", width, &mut rng).unwrap();
    // Non-zero biases so every term of the composition is exercised.
    for name in ["lsb.pw1.b", "lsb.dw.b", "lsb.pw2.b"] {
        let id = store.lookup(name).unwrap();
        store.get_mut(id).value = rand_tensor(&mut rng, &[width]);
    }
    let x = rand_tensor(&mut rng, &[batch * side * side, width]);
    let prev = rand_tensor(&mut rng, &[batch * side * side, width]);

    let mut tape = Tape::new(false);
    let xv = tape.input(x.clone());
    let pv = tape.input(prev.clone());
    let y = lsb.forward(&mut tape, &store, "lsb", &xv, Some(&pv), batch, side).unwrap();

    let v = |name: &str| store.value(store.lookup(name).unwrap()).clone();
    let s = x.add(&prev).unwrap();
    let h = pointwise_conv(&s, &v("lsb.pw1.w"), &v("lsb.pw1.b")).unwrap();
    let grid = h.reshape(&[batch, side, side, width]).unwrap();
    let h = depthwise_conv(&grid, &v("lsb.dw.k"), &v("lsb.dw.b")).unwrap();
    let h = h.reshape(&[batch * side * side, width]).unwrap();
    let expected = pointwise_conv(&h, &v("lsb.pw2.w"), &v("lsb.pw2.b")).unwrap();
    assert!(y.value().max_abs_diff(&expected).unwrap() <= 1e-6);
}

fn cls_features(model: &Model, imgs: &Tensor) -> Tensor {
    let mut tape = Tape::no_grad();
    model.forward(&mut tape, imgs, None).unwrap().cls.into_value()
}

#[test]
fn zero_initialized_methods_start_at_the_backbone() {
    let imgs = images(11, 3);
    let reference = cls_features(&Model::new(ViTConfig::toy(), Method::Full, 9).unwrap(), &imgs);
    for method in [Method::S2a, Method::Lora, Method::Adapter, Method::Bias, Method::Linear] {
        let model = Model::new(ViTConfig::toy(), method, 9).unwrap();
        let diff = cls_features(&model, &imgs).max_abs_diff(&reference).unwrap();
        assert!(diff <= 1e-6, "{method}: {diff}");
    }
}

#[test]
fn gradients_reach_exactly_the_trainable_parameters() {
    let imgs = images(12, 4);
    for method in Method::ALL {
        let model = Model::new(ViTConfig::toy(), method, 2).unwrap();
        let mut tape = Tape::new(default_quantize(method));
        let out = model.forward(&mut tape, &imgs, Some(&[0, 1, 2, 3])).unwrap();
        let grads = tape.backward(&out.loss.unwrap(), model.params()).unwrap();
        let with_grad: BTreeSet<_> = grads.params().map(|(id, _)| id.index()).collect();
        let trainable: BTreeSet<_> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id.index()).collect();
        assert_eq!(with_grad, trainable, "{method}");
    }
}

#[test]
fn frozen_parameters_survive_training_steps_bit_for_bit() {
    let imgs = images(13, 4);
    let mut model = Model::new(ViTConfig::toy(), Method::S2a, 4).unwrap();
    let before: Vec<Vec<u32>> = model
        .params()
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut opt = AdamW::new();
    for _ in 0..3 {
        let mut tape = Tape::new(true);
        let out = model.forward(&mut tape, &imgs, Some(&[3, 2, 1, 0])).unwrap();
        let grads = tape.backward(&out.loss.unwrap(), model.params()).unwrap();
        opt.step(model.params_mut(), &grads, 1e-2, 0.05).unwrap();
    }
    let after: Vec<Vec<u32>> = model
        .params()
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert!(!before.is_empty());
    assert_eq!(before, after);
}

fn live_bytes(method: Method, batch: usize) -> u64 {
    let model = Model::new(ViTConfig::toy(), method, 0).unwrap();
    let mut tape = Tape::new(default_quantize(method));
    let labels: Vec<usize> = (0..batch).map(|i| i % 4).collect();
    model.forward(&mut tape, &images(14, batch), Some(&labels)).unwrap();
    tape.live_activation_bytes()
}

#[test]
fn s2a_keeps_the_fewest_activations_among_tuning_methods() {
    let s2a = live_bytes(Method::S2a, 32);
    let full = live_bytes(Method::Full, 32);
    for method in [Method::Lora, Method::Adapter, Method::Vpt] {
        let b = live_bytes(method, 32);
        assert!(s2a < b, "s2a {s2a} vs {method} {b}");
        assert!(b < full, "{method} {b} vs full {full}");
    }
}

#[test]
fn adapter_keeps_its_input_and_s2a_keeps_no_frozen_layer_input() {
    let imgs = images(15, 2);
    let saved = |method: Method| {
        let model = Model::new(ViTConfig::toy(), method, 0).unwrap();
        let mut tape = Tape::new(default_quantize(method));
        model.forward(&mut tape, &imgs, Some(&[0, 1])).unwrap();
        tape.saved_bytes_by_label()
    };
    let adapter = saved(Method::Adapter);
    assert!(adapter.get("blocks.0.adapter1.down").copied().unwrap_or(0) > 0);

    let s2a = saved(Method::S2a);
    for layer in ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"] {
        assert_eq!(s2a.get(&format!("blocks.0.{layer}")).copied().unwrap_or(0), 0, "{layer}");
    }
}

#[test]
fn vpt_widens_every_attention_map() {
    let mut cfg = ViTConfig::toy();
    cfg.vpt_tokens = 50;
    let model = Model::new(cfg.clone(), Method::Vpt, 0).unwrap();
    let mut tape = Tape::new(false);
    model.forward(&mut tape, &images(16, 2), None).unwrap();
    let widened = cfg.tokens() + 50;
    let softmaxes: Vec<_> = tape.nodes().iter().filter(|n| n.label.ends_with("attn.softmax")).collect();
    assert_eq!(softmaxes.len(), cfg.depth);
    for node in softmaxes {
        assert_eq!(*node.shape.last().unwrap(), widened);
        assert_eq!(node.shape.iter().product::<usize>(), 2 * cfg.heads * widened * widened);
        assert_eq!(node.saved.policy(), StoragePolicy::Full32);
    }
}

#[test]
fn checkpoint_roundtrip_restores_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2a.ckpt");
    let model = Model::new(ViTConfig::toy(), Method::S2a, 21).unwrap();
    save_checkpoint(model.params(), &path).unwrap();
    let mut other = Model::new(ViTConfig::toy(), Method::S2a, 22).unwrap();
    load_checkpoint(other.params_mut(), &path).unwrap();
    for ((_, a), (_, b)) in model.params().iter().zip(other.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    let mut lora = Model::new(ViTConfig::toy(), Method::Lora, 21).unwrap();
    assert!(matches!(load_checkpoint(lora.params_mut(), &path), Err(Error::Validation(_))));
}

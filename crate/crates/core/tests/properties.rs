use proptest::prelude::*;
use s2a_core::activations::{relu_backward, relu_backward_exact, relu_forward, softmax_rows};
use s2a_core::autograd::channel_avg_pool;
use s2a_core::memory::{build_model_spec, estimate, AccountingScope};
use s2a_core::petl::{Method, ViTConfig};
use s2a_core::quant::{dequantize, pack, quantize, unpack};
use s2a_core::tensor::{add_row_bias, depthwise_conv, matmul, pointwise_conv};
use s2a_core::train::cosine_schedule;
use s2a_core::Tensor;

/// Distance from `v` to the next representable `f32` away from zero.
fn ulp(v: f32) -> f32 {
    let a = v.abs();
    f32::from_bits(a.to_bits() + 1) - a
}

fn tensor(data: Vec<f32>) -> Tensor {
    Tensor::new(vec![data.len()], data).unwrap()
}

fn method() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantizer_roundtrip_within_half_step(data in prop::collection::vec(-1e3f32..1e3, 1..300)) {
        let t = tensor(data);
        let q = quantize(&t, 4).unwrap();
        let back = dequantize(&q).unwrap();
        let s = q.scale();
        for (&x, &y) in t.data().iter().zip(back.data()) {
            prop_assert!((x - y).abs() <= s / 2.0 + ulp(x.abs().max(y.abs())), "{x} -> {y} with s = {s}");
        }
    }

    #[test]
    fn constant_tensors_roundtrip_exactly(v in -1e6f32..1e6, n in 1usize..64) {
        let t = tensor(vec![v; n]);
        let q = quantize(&t, 4).unwrap();
        prop_assert_eq!(q.scale(), 0.0);
        prop_assert_eq!(dequantize(&q).unwrap(), t);
    }

    #[test]
    fn pack_unpack_is_a_bijection(codes in prop::collection::vec(0u8..16, 0..200)) {
        let packed = pack(&codes, 4);
        prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
        prop_assert_eq!(unpack(&packed, 4, codes.len()), codes.clone());
        let bits: Vec<u8> = codes.iter().map(|c| c & 1).collect();
        let packed = pack(&bits, 1);
        prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
        prop_assert_eq!(unpack(&packed, 1, bits.len()), bits);
    }

    #[test]
    fn relu_mask_backward_is_lossless(
        pairs in prop::collection::vec((-10f32..10.0, -10f32..10.0), 1..500),
        zeros in prop::collection::vec(any::<bool>(), 500),
    ) {
        let x = tensor(pairs.iter().zip(&zeros).map(|(p, &z)| if z { 0.0 } else { p.0 }).collect());
        let g = tensor(pairs.iter().map(|p| p.1).collect());
        let (_, mask) = relu_forward(&x);
        let a = relu_backward(&mask, &g).unwrap();
        let b = relu_backward_exact(&x, &g).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in 1usize..8,
        cols in 1usize..65,
        seed in prop::collection::vec(-20f32..20.0, 8 * 64),
        shift in -50f32..50.0,
    ) {
        let x = Tensor::new(vec![rows, cols], seed[..rows * cols].to_vec()).unwrap();
        let y = softmax_rows(&x);
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        prop_assert!(shifted.max_abs_diff(&y).unwrap() <= 1e-5);
    }

    #[test]
    fn matmul_matches_triple_loop(
        (n, k, m) in (1usize..7, 1usize..7, 1usize..7),
        a in prop::collection::vec(-3f32..3.0, 36),
        b in prop::collection::vec(-3f32..3.0, 36),
        bias in prop::collection::vec(-3f32..3.0, 6),
    ) {
        let at = Tensor::new(vec![n, k], a[..n * k].to_vec()).unwrap();
        let bt = Tensor::new(vec![k, m], b[..k * m].to_vec()).unwrap();
        let c = matmul(&at, &bt).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * m + j];
                }
                prop_assert_eq!(c.data()[i * m + j], acc);
            }
        }
        let bias = tensor(bias[..m].to_vec());
        prop_assert_eq!(pointwise_conv(&at, &bt, &bias).unwrap(), add_row_bias(&c, &bias).unwrap());
    }

    #[test]
    fn depthwise_channels_do_not_mix(
        (h, w) in (1usize..6, 1usize..6),
        x in prop::collection::vec(-2f32..2.0, 5 * 5 * 3),
        k in prop::collection::vec(-2f32..2.0, 27),
        poke in -5f32..5.0,
    ) {
        let c = 3;
        let xt = Tensor::new(vec![h, w, c], x[..h * w * c].to_vec()).unwrap();
        let kt = Tensor::new(vec![3, 3, c], k).unwrap();
        let b = Tensor::zeros(&[c]);
        let y = depthwise_conv(&xt, &kt, &b).unwrap();
        let mut x2 = xt.clone();
        for px in x2.data_mut().chunks_mut(c) {
            px[1] += poke;
        }
        let y2 = depthwise_conv(&x2, &kt, &b).unwrap();
        for (p, q) in y.data().chunks(c).zip(y2.data().chunks(c)) {
            prop_assert_eq!(p[0], q[0]);
            prop_assert_eq!(p[2], q[2]);
        }
    }

    #[test]
    fn cap_is_linear(
        factor in prop::sample::select(vec![1usize, 2, 4, 8]),
        x in prop::collection::vec(-4f32..4.0, 3 * 16),
        y in prop::collection::vec(-4f32..4.0, 3 * 16),
        (a, b) in (-3f32..3.0, -3f32..3.0),
    ) {
        let xt = Tensor::new(vec![3, 16], x).unwrap();
        let yt = Tensor::new(vec![3, 16], y).unwrap();
        let mix = xt.scale(a).add(&yt.scale(b)).unwrap();
        let lhs = channel_avg_pool(&mix, factor).unwrap();
        let rhs = channel_avg_pool(&xt, factor).unwrap().scale(a)
            .add(&channel_avg_pool(&yt, factor).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
    }

    #[test]
    fn schedule_stays_in_bounds_and_decays(warmup in 0usize..50, extra in 1usize..500, base in 1e-5f32..1.0) {
        let total = warmup + extra;
        let mut prev = f32::INFINITY;
        for step in 0..=total {
            let lr = cosine_schedule(step, warmup, total, base).unwrap();
            prop_assert!((0.0..=base).contains(&lr));
            if step >= warmup {
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }
        prop_assert!(cosine_schedule(total + 1, warmup, total, base).is_err());
    }

    #[test]
    fn accountant_is_linear_in_batch(method in method(), batch in 1u64..512, toy in any::<bool>()) {
        let (arch, cfg) = if toy { ("toy_vit", ViTConfig::toy()) } else { ("vit_b_16", ViTConfig::vit_b_16()) };
        let spec = build_model_spec(arch, &cfg, method, false).unwrap();
        for scope in [AccountingScope::Analysis, AccountingScope::Tape] {
            let one = estimate(&spec, 1, scope).unwrap();
            let many = estimate(&spec, batch, scope).unwrap();
            prop_assert_eq!(many.activation_bytes, batch * one.activation_bytes);
            prop_assert_eq!(many.weight_bytes, one.weight_bytes);
            prop_assert_eq!(many.gradient_bytes, one.gradient_bytes);
            prop_assert_eq!(many.optimizer_bytes, one.optimizer_bytes);
            prop_assert_eq!(many.total_params, one.total_params);
        }
    }

    // Quantized rows carry a fixed header per saved tensor, so they are
    // affine in the batch rather than linear.
    #[test]
    fn quantized_rows_follow_their_policy(method in method(), batch in 1u64..512) {
        let spec = build_model_spec("vit_b_16", &ViTConfig::vit_b_16(), method, true).unwrap();
        let report = estimate(&spec, batch, AccountingScope::Tape).unwrap();
        for row in &report.rows {
            prop_assert_eq!(row.elements, batch * spec.layers.iter().find(|l| l.name == row.name).unwrap().activation_elements);
            prop_assert_eq!(row.activation_bytes, row.policy.bytes(row.elements));
        }
    }

    #[test]
    fn accountant_is_monotone(method in method(), batch in 1u64..256) {
        let cfg = ViTConfig::vit_b_16();
        let on = build_model_spec("vit_b_16", &cfg, method, true).unwrap();
        let off = build_model_spec("vit_b_16", &cfg, method, false).unwrap();
        let scope = AccountingScope::Analysis;
        prop_assert!(estimate(&off, batch + 1, scope).unwrap().total_bytes > estimate(&off, batch, scope).unwrap().total_bytes);
        prop_assert!(estimate(&on, batch, scope).unwrap().activation_bytes <= estimate(&off, batch, scope).unwrap().activation_bytes);
    }
}

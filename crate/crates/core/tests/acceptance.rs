//! Exit criteria. One sequential test runs every criterion, prints a
//! PASS/FAIL line for each and fails if any criterion failed.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use s2a_core::activations::{
    gelu_grad_approx, gelu_grad_approx_f64, gelu_grad_exact, gelu_grad_exact_f64, relu_backward, relu_backward_exact,
    relu_forward, softmax_backward, softmax_backward_exact, softmax_forward, GELU_DERIVATIVE_GAP,
};
use s2a_core::autograd::{Op, StoragePolicy, Tape};
use s2a_core::gradcheck::{check_target, Target};
use s2a_core::memory::{build_model_spec, default_quantize, estimate, verify_against_tape, AccountingScope};
use s2a_core::petl::{Method, Model, ViTConfig};
use s2a_core::quant::{dequantize, quantize};
use s2a_core::train::{load_dataset, pretrain_backbone, run_finetune, Dataset, TrainConfig};
use s2a_core::Tensor;

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ulp(v: f32) -> f32 {
    let a = v.abs();
    f32::from_bits(a.to_bits() + 1) - a
}

// 1. Finite-difference gradient checks.
fn gradient_correctness() -> Verdict {
    const TOL: f64 = 1e-3;
    const SEEDS: usize = 20;
    let start = Instant::now();
    let mut worst = Vec::new();
    for t in Target::ALL {
        let r = check_target(t, 0, SEEDS).map_err(|e| e.to_string())?;
        if r.seeds < SEEDS || !(r.max_rel_error <= TOL) {
            return Err(format!("{t}: {:e} over {} seeds", r.max_rel_error, r.seeds));
        }
        worst.push(format!("{t} {:.1e}", r.max_rel_error));
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(60),
        format!("{} targets x {SEEDS} seeds in {elapsed:.2?}; {}", Target::ALL.len(), worst.join(", ")),
    )
}

// 2. ReLU mask backward against the full-precision backward.
fn relu_losslessness() -> Verdict {
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[N], |i| match i % 97 {
        0 => 0.0,
        1 => -0.0,
        2 => f32::MIN_POSITIVE,
        _ => rng.gen_range(-5.0..5.0),
    });
    let g = Tensor::from_fn(&[N], |_| rng.gen_range(-5.0..5.0));
    let (_, mask) = relu_forward(&x);
    let a = relu_backward(&mask, &g).map_err(|e| e.to_string())?;
    let b = relu_backward_exact(&x, &g).map_err(|e| e.to_string())?;
    let differing = a.data().iter().zip(b.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    check(differing == 0, format!("{differing} of {N} elements differ bitwise"))
}

// 3. Quantizer roundtrip over many random and degenerate tensors.
fn quantizer_roundtrip() -> Verdict {
    const TENSORS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for k in 0..TENSORS {
        let scale = 10f32.powi(rng.gen_range(-3..4));
        let data: Vec<f32> = match k % 10 {
            0 => vec![rng.gen_range(-scale..scale)],
            1 => vec![rng.gen_range(-scale..scale); rng.gen_range(1..40)],
            _ => (0..rng.gen_range(2..48)).map(|_| rng.gen_range(-scale..scale)).collect(),
        };
        let t = Tensor::new(vec![data.len()], data).unwrap();
        let q = quantize(&t, 4).map_err(|e| e.to_string())?;
        let back = dequantize(&q).map_err(|e| e.to_string())?;
        let s = q.scale();
        for (&x, &y) in t.data().iter().zip(back.data()) {
            let bound = s / 2.0 + ulp(x.abs().max(y.abs()));
            let err = (x - y).abs();
            if err > bound {
                return Err(format!("tensor {k}: |{x} - {y}| = {err} > {bound}"));
            }
            if bound > 0.0 {
                worst = worst.max((err / bound) as f64);
            }
        }
    }
    Ok(format!("{TENSORS} tensors, worst error at {:.3} of the bound", worst))
}

/// `d/dx [x·σ(αx)]` with the sigmoid written through `tanh`, a route
/// independent of the crate's exponential form.
fn exact_oracle(x: f64) -> f64 {
    let a = 1.702f64;
    let s = 0.5 * (1.0 + (0.5 * a * x).tanh());
    s + a * x * s * (1.0 - s)
}

fn approx_oracle(x: f64) -> f64 {
    let c = x.clamp(-2.0, 2.0);
    0.5 * (1.0 + (0.5 * 1.702 * c).tanh()) + 0.22 * (1.5 * c).sin()
}

// 4. GELU derivative gap as a frozen constant.
fn gelu_gap() -> Verdict {
    // Measured once with 50-digit arithmetic.
    const FROZEN: f64 = 0.074_939_640_963_267_068;
    const POINTS: usize = 1_200_001;
    let (mut oracle_sup, mut impl_sup) = (0.0f64, 0.0f64);
    for i in 0..POINTS {
        let x = -6.0 + 12.0 * i as f64 / (POINTS - 1) as f64;
        let c = x.clamp(-2.0, 2.0);
        oracle_sup = oracle_sup.max((exact_oracle(c) - approx_oracle(c)).abs());
        impl_sup = impl_sup.max((gelu_grad_exact_f64(c) - gelu_grad_approx_f64(c)).abs());
    }
    let at_zero = [gelu_grad_exact(0.0) as f64, gelu_grad_approx(0.0) as f64, gelu_grad_exact_f64(0.0), gelu_grad_approx_f64(0.0)];
    let detail = format!("oracle {oracle_sup:.15}, implementation {impl_sup:.15}, frozen {FROZEN:.15}, at 0 {at_zero:?}");
    check(
        GELU_DERIVATIVE_GAP == FROZEN
            && (oracle_sup - FROZEN).abs() <= 1e-12
            && (impl_sup - FROZEN).abs() <= 1e-12
            && at_zero.iter().all(|&v| v == 0.5),
        detail,
    )
}

// 5. Quantized softmax backward against a per-instance bound.
fn softmax_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ratio = 0.0f64;
    let mut worst_row_sum = 0.0f64;
    for _ in 0..300 {
        let rows = rng.gen_range(1..=64);
        let cols = rng.gen_range(1..=64);
        let spread = rng.gen_range(0.1f32..8.0);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-spread..spread));
        let g = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0f32..1.0));
        let (y, blob) = softmax_forward(&x).map_err(|e| e.to_string())?;
        let y_hat = dequantize(&blob).map_err(|e| e.to_string())?;
        let exact = softmax_backward_exact(&y, &g).map_err(|e| e.to_string())?;
        let quant = softmax_backward(&blob, &g).map_err(|e| e.to_string())?;
        let half_step = blob.scale() as f64 / 2.0;
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let (yr, hr, gr) = (&y.data()[span.clone()], &y_hat.data()[span.clone()], &g.data()[span.clone()]);
            let sum: f64 = yr.iter().map(|&v| v as f64).sum();
            worst_row_sum = worst_row_sum.max((sum - 1.0).abs());
            let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
            let g_abs: f64 = gr.iter().map(|&v| (v as f64).abs()).sum();
            for j in 0..cols {
                let e = half_step + ulp(yr[j].abs().max(hr[j].abs())) as f64;
                // δ_j(g_j − ⟨g,y⟩) − ŷ_j⟨g,δ⟩ with every |δ| at most e.
                let mut bound = e * (gr[j] as f64 - dot).abs() + (hr[j] as f64).abs() * e * g_abs;
                // Rounding of the two f32 evaluations being compared.
                bound += 4.0 * f32::EPSILON as f64 * ((yr[j] as f64 + hr[j] as f64) * (gr[j].abs() as f64 + g_abs));
                let gap = (quant.data()[r * cols + j] as f64 - exact.data()[r * cols + j] as f64).abs();
                if gap > bound {
                    return Err(format!("{rows}x{cols} row {r} col {j}: gap {gap:e} > bound {bound:e}"));
                }
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(gap / bound);
                }
            }
        }
    }
    check(
        worst_row_sum <= 1e-6,
        format!("300 instances, worst gap at {worst_ratio:.3} of its bound, worst row-sum error {worst_row_sum:.1e}"),
    )
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_s2a"))
        .args(args)
        .env_remove("S2A_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

// 6. ViT-B/16 memory column against the published figures.
fn memory_vs_published() -> Verdict {
    let json = cli(&["estimate-mem", "--arch", "vit_b_16", "--batch", "32", "--out", "json"])?;
    let reports: Vec<Value> = serde_json::from_slice(&json).map_err(|e| e.to_string())?;
    let mb = |m: &str| -> f64 {
        reports.iter().find(|r| r["method"] == m).map_or(f64::NAN, |r| r["total_mb"].as_f64().unwrap())
    };
    let mut failures = Vec::new();
    for (m, target, tol) in [("full", 4099.0, 0.20), ("linear", 344.0, 0.10), ("s2a", 640.0, 0.30)] {
        let v = mb(m);
        if !((v - target).abs() <= tol * target) {
            failures.push(format!("{m} {v:.1} MB outside {target} ± {:.0}%", tol * 100.0));
        }
    }
    let order = ["linear", "s2a", "lora", "vpt", "adapter", "full"];
    for w in order.windows(2) {
        if !(mb(w[0]) < mb(w[1])) {
            failures.push(format!("order {} {:.1} < {} {:.1} violated", w[0], mb(w[0]), w[1], mb(w[1])));
        }
    }
    let ratio = mb("full") / mb("s2a");
    if !(ratio >= 5.0) {
        failures.push(format!("full/s2a ratio {ratio:.2} < 5"));
    }
    let listing = order.iter().map(|m| format!("{m} {:.1}", mb(m))).collect::<Vec<_>>().join(", ");
    let detail = format!("{listing}; full/s2a {ratio:.2}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// 7. Accountant prediction against the tape's saved bytes.
fn dual_path() -> Verdict {
    let mut checked = 0;
    for method in Method::ALL {
        let model = Model::new(ViTConfig::toy(), method, 0).map_err(|e| e.to_string())?;
        for quantize in [default_quantize(method), !default_quantize(method)] {
            let c = verify_against_tape(&model, 4, quantize, &[], 7).map_err(|e| e.to_string())?;
            if !c.is_exact() {
                return Err(format!(
                    "{method} quantize={quantize}: predicted {} vs measured {} ({} layers differ)",
                    c.predicted_bytes,
                    c.measured_bytes,
                    c.discrepancies.len()
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} method/quantization profiles match byte for byte"))
}

fn frozen_match(model: &Model, pretrained: &s2a_core::autograd::ParamStore) -> bool {
    model.params().iter().filter(|(_, p)| !p.trainable).all(|(_, p)| match pretrained.id(&p.name) {
        Some(id) => {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            bits(&p.value) == bits(pretrained.value(id))
        }
        None => true,
    })
}

// 8. End-to-end fine-tuning on the built-in task.
fn end_to_end() -> Verdict {
    let base = TrainConfig::default();
    let start = Instant::now();
    let pre_cfg = base.pretrain.clone().expect("default pretrains");
    let pretrained = pretrain_backbone(&base.model, &pre_cfg).map_err(|e| e.to_string())?;
    let pretrain_time = start.elapsed();
    let data: Dataset = load_dataset(&base.data, base.model.classes, base.seed).map_err(|e| e.to_string())?;

    let run = |method: Method, quantize: Option<bool>, lr: f32| {
        let cfg = TrainConfig { method, quantize, lr, ..base.clone() };
        run_finetune(&cfg, &data, Some(&pretrained), |_| {}).map_err(|e| e.to_string())
    };

    // The baseline gets its own learning-rate sweep.
    let mut linear_best = (0.0f64, 0.0f32);
    for lr in [1e-2, 3e-2, 1e-1] {
        let acc = run(Method::Linear, None, lr)?.summary.final_val_accuracy;
        if acc > linear_best.0 {
            linear_best = (acc, lr);
        }
    }

    let t0 = Instant::now();
    let on = run(Method::S2a, Some(true), base.lr)?;
    let s2a_time = pretrain_time + t0.elapsed();
    let off = run(Method::S2a, Some(false), base.lr)?;

    let (acc_on, acc_off) = (on.summary.final_val_accuracy, off.summary.final_val_accuracy);
    let gain = 100.0 * (acc_on - linear_best.0);
    let drift = 100.0 * (acc_on - acc_off).abs();
    let frozen = on.summary.frozen_bit_identical && frozen_match(&on.model, &pretrained);
    let detail = format!(
        "s2a {:.1}% vs linear {:.1}% (lr {}) = {gain:+.1} pts; quant off {:.1}%, drift {drift:.1} pts; frozen identical {frozen}; pretrain + s2a {s2a_time:.1?}",
        100.0 * acc_on,
        100.0 * linear_best.0,
        linear_best.1,
        100.0 * acc_off
    );
    check(gain >= 2.0 && frozen && drift <= 2.0 && s2a_time < Duration::from_secs(300), detail)
}

// 9. Quant4 storage against one eighth of Full32 storage.
fn quantization_ratio() -> Verdict {
    let mut rows = 0;
    let mut worst = 0.0f64;
    let mut check_bytes = |elements: u64, quant_bytes: u64| -> Result<(), String> {
        let ratio = quant_bytes as f64 / StoragePolicy::Full32.bytes(elements) as f64;
        let off = (ratio * 8.0 - 1.0).abs();
        worst = worst.max(off);
        rows += 1;
        if off > 0.01 {
            return Err(format!("{elements} elements: ratio {ratio:.5}"));
        }
        Ok(())
    };
    let spec = build_model_spec("vit_b_16", &ViTConfig::vit_b_16(), Method::S2a, true).map_err(|e| e.to_string())?;
    let report = estimate(&spec, 32, AccountingScope::Tape).map_err(|e| e.to_string())?;
    for row in report.rows.iter().filter(|r| r.kind.is_nonparametric() && r.elements >= 10_000) {
        if row.policy != StoragePolicy::Quant4 {
            return Err(format!("{} is saved as {:?}", row.name, row.policy));
        }
        check_bytes(row.elements, row.activation_bytes)?;
    }
    // Measured on a live tape as well.
    let model = Model::new(ViTConfig::toy(), Method::S2a, 0).map_err(|e| e.to_string())?;
    let mut tape = Tape::new(true);
    let images = Tensor::from_fn(&[32, 16, 16, 1], |i| (i % 7) as f32 / 7.0);
    model.forward(&mut tape, &images, None).map_err(|e| e.to_string())?;
    for node in tape.nodes().iter().filter(|n| matches!(n.op, Op::Softmax | Op::Gelu)) {
        let n = node.shape.iter().product::<usize>() as u64;
        if n >= 10_000 {
            check_bytes(n, node.saved.bytes())?;
        }
    }
    Ok(format!("{rows} layers, worst deviation from 1/8 is {:.3}%", worst * 100.0))
}

// 10. Byte-identical CLI output on repeat.
fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"total_epochs": 2, "warmup_epochs": 1, "data": {"kind": "synthetic", "seed": 7, "n": 80}, "pretrain": null}"#,
    )
    .map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let commands: [&[&str]; 6] = [
        &["gradcheck", "--target", "all", "--out", "json", "--seed", "5"],
        &["estimate-mem", "--arch", "vit_b_16", "--batch", "32", "--out", "json"],
        &["estimate-mem", "--arch", "toy_vit", "--method", "s2a", "--scope", "tape"],
        &["compare-methods", "--out", "json"],
        &["quant-report", "--grid-points", "501"],
        &["train", "--config", cfg, "--seed", "11"],
    ];
    for args in commands {
        let (a, b) = (cli(args)?, cli(args)?);
        if a != b {
            return Err(format!("{args:?} produced different output"));
        }
        if a.is_empty() {
            return Err(format!("{args:?} produced no output"));
        }
    }
    Ok(format!("{} commands repeated byte for byte", commands.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient correctness", gradient_correctness),
        ("relu losslessness", relu_losslessness),
        ("quantizer roundtrip", quantizer_roundtrip),
        ("gelu derivative gap", gelu_gap),
        ("softmax quantized-backward bound", softmax_bound),
        ("vit-b/16 memory column", memory_vs_published),
        ("dual-path consistency", dual_path),
        ("end-to-end fine-tuning", end_to_end),
        ("quantization memory ratio", quantization_ratio),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let verdict = f();
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
        if verdict.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

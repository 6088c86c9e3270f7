//! Finite-difference gradient checks.
//!
//! Analytic gradients come from the tape in `f32`. The central differences
//! are taken on a separate straight-line `f64` forward of the same
//! computation, so the comparison measures the tape's derivative rules
//! rather than `f32` round-off in the difference quotient.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{GradStore, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to the denominator of the relative error.
pub const REL_EPS: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-3;

/// `max_i |analytic_i − fd_i| / (|fd_i| + 1e-8)` over selected coordinates,
/// with `fd_i` the central difference of `loss` at `point` along axis `i`.
pub fn finite_diff_check<F>(loss: F, point: &[f64], analytic: &[f32], select: impl Fn(usize) -> bool, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {h}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::dim("finite_diff_check", &[point.len()], &[analytic.len()]));
    }
    let base = loss(point);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite at the base point: {base}")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in (0..point.len()).filter(|&i| select(i)) {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite around coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] as f64 - fd).abs() / (fd.abs() + REL_EPS);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    BiasLinear,
    Lrp,
    Cap,
    Lsb,
    Softmax,
    Gelu,
    Relu,
    Attention,
}

impl Target {
    pub const ALL: [Target; 8] = [
        Target::BiasLinear,
        Target::Lrp,
        Target::Cap,
        Target::Lsb,
        Target::Softmax,
        Target::Gelu,
        Target::Relu,
        Target::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::BiasLinear => "bias-linear",
            Target::Lrp => "lrp",
            Target::Cap => "cap",
            Target::Lsb => "lsb",
            Target::Softmax => "softmax",
            Target::Gelu => "gelu",
            Target::Relu => "relu",
            Target::Attention => "attention",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck target {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetReport {
    pub target: Target,
    pub seeds: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Runs `target` on `seeds` random instances derived from `seed` and
/// returns the worst relative error.
pub fn check_target(target: Target, seed: u64, seeds: usize) -> Result<TargetReport> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for k in 0..seeds as u64 {
        let stream = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(k)
            .wrapping_add((target as u64) << 48);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let case = build_case(target, &mut rng)?;
        coordinates += case.point.len();
        let err = finite_diff_check(&*case.loss, &case.point, &case.analytic, |_| true, DEFAULT_STEP)?;
        worst = worst.max(err);
    }
    Ok(TargetReport {
        target,
        seeds,
        coordinates,
        max_rel_error: worst,
    })
}

/// One random instance: flattened checked values, the tape's gradient for
/// them, and an `f64` reference loss over the same flattening.
pub struct Case {
    pub point: Vec<f64>,
    pub analytic: Vec<f32>,
    pub loss: Box<dyn Fn(&[f64]) -> f64>,
}

pub fn build_case(target: Target, rng: &mut ChaCha8Rng) -> Result<Case> {
    match target {
        Target::BiasLinear => bias_linear_case(rng),
        Target::Lrp => lrp_case(rng),
        Target::Cap => cap_case(rng),
        Target::Lsb => lsb_case(rng),
        Target::Softmax => pointwise_case(rng, Pointwise::Softmax),
        Target::Gelu => pointwise_case(rng, Pointwise::Gelu),
        Target::Relu => pointwise_case(rng, Pointwise::Relu),
        Target::Attention => attention_case(rng),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0) * scale)
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Collects gradients (zeros when absent) and values in a fixed order.
fn flatten(grads: &GradStore, vars: &[&Var]) -> (Vec<f64>, Vec<f32>) {
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    for v in vars {
        point.extend(f64s(v.value()));
        match grads.grad(v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(v.value().numel())),
        }
    }
    (point, analytic)
}

/// Splits a flat slice into consecutive pieces of the given lengths.
fn unpack<'a>(p: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &n in lens {
        out.push(&p[at..at + n]);
        at += n;
    }
    out
}

/// `a[m×k] · b[k×n]` in f64.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn bias_linear_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (n, din, dout) = (rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16));
    let mut store = ParamStore::new();
    let w = rand_tensor(rng, &[din, dout], 0.5);
    let wid = store.add("w", w.clone(), false, true)?;
    let bid = store.add("b", rand_tensor(rng, &[dout], 0.5), true, false)?;
    let weights = rand_tensor(rng, &[n, dout], 1.0);
    let mut tape = Tape::new(false);
    let x = tape.leaf(rand_tensor(rng, &[n, din], 1.0), true);
    let wv = tape.param(&store, wid);
    let bv = tape.param(&store, bid);
    let y = tape.linear("linear", &x, &wv, Some(&bv))?;
    let loss = tape.weighted_sum("loss", &y, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let (point, analytic) = flatten(&grads, &[&x, &bv]);
    let (w64, g64) = (f64s(&w), f64s(&weights));
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let v = unpack(p, &[n * din, dout]);
            let mut y = mm(v[0], &w64, n, din, dout);
            for (i, y) in y.iter_mut().enumerate() {
                *y += v[1][i % dout];
            }
            dot(&y, &g64)
        }),
    })
}

fn lrp_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let batch = rng.gen_range(1..=3);
    let t = rng.gen_range(2..=10);
    let c = rng.gen_range(2..=16);
    let r = rng.gen_range(1..t.min(c));
    let mut store = ParamStore::new();
    let aid = store.add("a", rand_tensor(rng, &[t, r], 0.5), true, false)?;
    let bid = store.add("b", rand_tensor(rng, &[r, c], 0.5), true, false)?;
    let weights = rand_tensor(rng, &[batch * t, c], 1.0);
    let mut tape = Tape::new(false);
    let x = tape.leaf(rand_tensor(rng, &[batch * t, c], 1.0), true);
    let a = tape.param(&store, aid);
    let b = tape.param(&store, bid);
    let y = tape.low_rank_prompt("lrp", &x, &a, &b)?;
    let loss = tape.weighted_sum("loss", &y, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let (point, analytic) = flatten(&grads, &[&x, &a, &b]);
    let g64 = f64s(&weights);
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let v = unpack(p, &[batch * t * c, t * r, r * c]);
            let ab = mm(v[1], v[2], t, r, c);
            let y: Vec<f64> = v[0].iter().enumerate().map(|(i, x)| x + ab[i % (t * c)]).collect();
            dot(&y, &g64)
        }),
    })
}

fn cap_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(1..=8);
    let factor = [1, 2, 4, 8][rng.gen_range(0..4)];
    let groups = rng.gen_range(1..=4);
    let c = factor * groups;
    let weights = rand_tensor(rng, &[n, groups], 1.0);
    let store = ParamStore::new();
    let mut tape = Tape::new(false);
    let x = tape.leaf(rand_tensor(rng, &[n, c], 1.0), true);
    let y = tape.channel_avg_pool("cap", &x, factor)?;
    let loss = tape.weighted_sum("loss", &y, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let (point, analytic) = flatten(&grads, &[&x]);
    let g64 = f64s(&weights);
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let y: Vec<f64> = p.chunks(factor).map(|g| g.iter().sum::<f64>() / factor as f64).collect();
            dot(&y, &g64)
        }),
    })
}

/// Reference 3×3 depthwise convolution over `[batch, side, side, c]`.
fn dw64(x: &[f64], k: &[f64], bias: &[f64], batch: usize, side: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for i in 0..side {
            for j in 0..side {
                for ch in 0..c {
                    let mut acc = bias[ch];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if si < 0 || sj < 0 || si >= side as isize || sj >= side as isize {
                                continue;
                            }
                            let src = ((b * side + si as usize) * side + sj as usize) * c + ch;
                            acc += k[(di * 3 + dj) * c + ch] * x[src];
                        }
                    }
                    out[((b * side + i) * side + j) * c + ch] = acc;
                }
            }
        }
    }
    out
}

fn lsb_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let batch = rng.gen_range(1..=2);
    let side = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=8);
    let rows = batch * side * side;
    let mut store = ParamStore::new();
    let specs: [(&str, Vec<usize>); 6] = [
        ("pw1.w", vec![c, c]),
        ("pw1.b", vec![c]),
        ("dw.k", vec![3, 3, c]),
        ("dw.b", vec![c]),
        ("pw2.w", vec![c, c]),
        ("pw2.b", vec![c]),
    ];
    let mut ids = Vec::new();
    for (name, shape) in &specs {
        ids.push(store.add(name, rand_tensor(rng, shape, 0.5), true, true)?);
    }
    let weights = rand_tensor(rng, &[rows, c], 1.0);
    let mut tape = Tape::new(false);
    let xd = tape.leaf(rand_tensor(rng, &[rows, c], 1.0), true);
    let yp = tape.leaf(rand_tensor(rng, &[rows, c], 1.0), true);
    let p: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let s = tape.add("lsb.in", &xd, &yp)?;
    let h1 = tape.linear("lsb.pw1", &s, &p[0], Some(&p[1]))?;
    let h2 = tape.depthwise_conv("lsb.dw", &h1, &p[2], &p[3], batch, side, side)?;
    let y = tape.linear("lsb.pw2", &h2, &p[4], Some(&p[5]))?;
    let loss = tape.weighted_sum("loss", &y, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let mut vars = vec![&xd, &yp];
    vars.extend(p.iter());
    let (point, analytic) = flatten(&grads, &vars);
    let g64 = f64s(&weights);
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let v = unpack(p, &[rows * c, rows * c, c * c, c, 9 * c, c, c * c, c]);
            let s: Vec<f64> = v[0].iter().zip(v[1]).map(|(a, b)| a + b).collect();
            let mut h1 = mm(&s, v[2], rows, c, c);
            for (i, h) in h1.iter_mut().enumerate() {
                *h += v[3][i % c];
            }
            let h2 = dw64(&h1, v[4], v[5], batch, side, c);
            let mut y = mm(&h2, v[6], rows, c, c);
            for (i, y) in y.iter_mut().enumerate() {
                *y += v[7][i % c];
            }
            dot(&y, &g64)
        }),
    })
}

#[derive(Clone, Copy)]
enum Pointwise {
    Softmax,
    Gelu,
    Relu,
}

fn pointwise_case(rng: &mut ChaCha8Rng, kind: Pointwise) -> Result<Case> {
    let (n, c) = (rng.gen_range(1..=8), rng.gen_range(2..=16));
    let mut x = rand_tensor(rng, &[n, c], 3.0);
    if let Pointwise::Relu = kind {
        // Keep every input well clear of the kink so the difference quotient
        // never straddles it.
        x = x.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
    }
    let weights = rand_tensor(rng, &[n, c], 1.0);
    let store = ParamStore::new();
    let mut tape = Tape::new(false);
    let xv = tape.leaf(x, true);
    let y = match kind {
        Pointwise::Softmax => tape.softmax("softmax", &xv)?,
        Pointwise::Gelu => tape.gelu("gelu", &xv)?,
        Pointwise::Relu => tape.relu("relu", &xv)?,
    };
    let loss = tape.weighted_sum("loss", &y, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let (point, analytic) = flatten(&grads, &[&xv]);
    let g64 = f64s(&weights);
    let alpha = crate::activations::GELU_ALPHA as f64;
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let y: Vec<f64> = match kind {
                Pointwise::Softmax => p.chunks(c).flat_map(softmax64).collect(),
                Pointwise::Gelu => p.iter().map(|&v| v * sigmoid64(alpha * v)).collect(),
                Pointwise::Relu => p.iter().map(|&v| v.max(0.0)).collect(),
            };
            dot(&y, &g64)
        }),
    })
}

fn attention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let batch = rng.gen_range(1..=2);
    let heads = rng.gen_range(1..=2);
    let dh = rng.gen_range(1..=4);
    let t = rng.gen_range(2..=6);
    let c = heads * dh;
    let weights = rand_tensor(rng, &[batch * t, c], 1.0);
    let store = ParamStore::new();
    let mut tape = Tape::new(false);
    let qkv = tape.leaf(rand_tensor(rng, &[batch * t, 3 * c], 1.5), true);
    let s = tape.attention_scores("scores", &qkv, batch, heads)?;
    let pr = tape.softmax("softmax", &s)?;
    let ctx = tape.attention_context("context", &pr, &qkv, batch, heads)?;
    let loss = tape.weighted_sum("loss", &ctx, &weights)?;
    let grads = tape.backward(&loss, &store)?;
    let (point, analytic) = flatten(&grads, &[&qkv]);
    let g64 = f64s(&weights);
    Ok(Case {
        point,
        analytic,
        loss: Box::new(move |p| {
            let w = 3 * c;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; batch * t * c];
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..t {
                        let q = &p[(b * t + i) * w + h * dh..][..dh];
                        let scores: Vec<f64> = (0..t)
                            .map(|j| dot(q, &p[(b * t + j) * w + c + h * dh..][..dh]) * scale)
                            .collect();
                        let probs = softmax64(&scores);
                        for (j, pj) in probs.iter().enumerate() {
                            let v = &p[(b * t + j) * w + 2 * c + h * dh..][..dh];
                            for e in 0..dh {
                                out[(b * t + i) * c + h * dh + e] += pj * v[e];
                            }
                        }
                    }
                }
            }
            dot(&out, &g64)
        }),
    })
}

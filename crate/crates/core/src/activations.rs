//! Softmax, ReLU and GELU with derivative-aware saved state.
//!
//! Forward outputs are always computed at full precision. What survives for
//! the backward pass is chosen from the shape of each derivative:
//!
//! * softmax keeps its output `y`, 4-bit quantized, since its Jacobian is a
//!   function of `y` alone;
//! * ReLU keeps a 1-bit mask of `x > 0`, which is lossless for its derivative;
//! * GELU keeps its input clipped to `[-2, 2]` and 4-bit quantized, and its
//!   backward uses `σ(1.702x) + 0.22·sin(1.5x)` in place of the exact
//!   derivative.
//!
//! The `*_exact` variants take full-precision saved tensors and are used by
//! the unquantized storage policy and as reference paths in tests.

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, quantize_mask, QuantBlob};
use crate::tensor::Tensor;

pub const GELU_ALPHA: f32 = 1.702;
pub const GELU_CLIP: f32 = 2.0;
pub const GELU_SINE_AMPLITUDE: f32 = 0.22;
pub const GELU_SINE_FREQUENCY: f32 = 1.5;

const ALPHA_F64: f64 = 1.702;
const CLIP_F64: f64 = 2.0;
const AMPLITUDE_F64: f64 = 0.22;
const FREQUENCY_F64: f64 = 1.5;

/// Largest gap between the exact and fitted GELU derivatives over clipped
/// inputs, reached at the clip boundary. Measured once with 50-digit
/// arithmetic.
pub const GELU_DERIVATIVE_GAP: f64 = 0.074_939_640_963_267_068;

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim().max(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub fn softmax_forward(x: &Tensor) -> Result<(Tensor, QuantBlob)> {
    let y = softmax_rows(x);
    let saved = quantize(&y, 4)?;
    Ok((y, saved))
}

/// `g_x = y ⊙ (g_y − ⟨g_y, y⟩)` per row, the contracted Jacobian product.
pub fn softmax_backward_exact(y: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    check_same("softmax_backward", y.shape(), g_y.shape())?;
    let n = y.last_dim().max(1);
    let mut out = vec![0.0f32; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g_y.data().chunks(n))
    {
        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

pub fn softmax_backward(saved: &QuantBlob, g_y: &Tensor) -> Result<Tensor> {
    check_same("softmax_backward", saved.shape(), g_y.shape())?;
    let y_hat = dequantize(saved)?;
    softmax_backward_exact(&y_hat, g_y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_forward(x: &Tensor) -> (Tensor, QuantBlob) {
    (relu(x), quantize_mask(x, |v| v > 0.0))
}

pub fn relu_backward_exact(x: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    x.zip_map(g_y, "relu_backward", |xv, g| if xv > 0.0 { g } else { 0.0 })
}

pub fn relu_backward(mask: &QuantBlob, g_y: &Tensor) -> Result<Tensor> {
    check_same("relu_backward", mask.shape(), g_y.shape())?;
    if mask.bits() != 1 {
        return Err(Error::Format(format!("relu expects a 1-bit mask, got {} bits", mask.bits())));
    }
    let bits = mask.codes();
    let out = g_y
        .data()
        .iter()
        .zip(bits)
        .map(|(&g, m)| if m == 1 { g } else { 0.0 })
        .collect();
    Tensor::new(g_y.shape().to_vec(), out)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(GELU_ALPHA * v))
}

pub fn gelu_forward(x: &Tensor) -> Result<(Tensor, QuantBlob)> {
    let clipped = x.map(|v| v.clamp(-GELU_CLIP, GELU_CLIP));
    Ok((gelu(x), quantize(&clipped, 4)?))
}

/// Exact derivative of `x·σ(1.702x)`.
#[inline]
pub fn gelu_grad_exact(x: f32) -> f32 {
    let s = sigmoid(GELU_ALPHA * x);
    s + GELU_ALPHA * x * s * (1.0 - s)
}

/// Sine-fitted derivative, evaluated on the clipped input.
#[inline]
pub fn gelu_grad_approx(x: f32) -> f32 {
    let c = x.clamp(-GELU_CLIP, GELU_CLIP);
    sigmoid(GELU_ALPHA * c) + GELU_SINE_AMPLITUDE * (GELU_SINE_FREQUENCY * c).sin()
}

/// f64 versions for the derivative report and reference checks.
pub fn gelu_grad_exact_f64(x: f64) -> f64 {
    let a = ALPHA_F64;
    let s = 1.0 / (1.0 + (-a * x).exp());
    s + a * x * (-a * x).exp() * s * s
}

pub fn gelu_grad_approx_f64(x: f64) -> f64 {
    let c = x.clamp(-CLIP_F64, CLIP_F64);
    1.0 / (1.0 + (-ALPHA_F64 * c).exp()) + AMPLITUDE_F64 * (FREQUENCY_F64 * c).sin()
}

pub fn gelu_backward_exact(x: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    x.zip_map(g_y, "gelu_backward", |xv, g| g * gelu_grad_exact(xv))
}

pub fn gelu_backward(saved: &QuantBlob, g_y: &Tensor) -> Result<Tensor> {
    check_same("gelu_backward", saved.shape(), g_y.shape())?;
    let x_hat = dequantize(saved)?;
    x_hat.zip_map(g_y, "gelu_backward", |xv, g| g * gelu_grad_approx(xv))
}

//! Dense row-major `f32` tensors and the raw kernels the rest of the crate
//! builds on.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! index) so results are bit-reproducible on a given platform. Kernels are
//! single-threaded and never mutate their inputs.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 32-bit floats in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("expects {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    /// n×n identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for a rank-0 shape).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            self.shape[..self.shape.len().saturating_sub(1)].iter().product()
        } else {
            self.data.len() / c
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`; used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("accumulate", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Shape {
            shape: other.to_vec(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`, without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = as_matrix(a, "matmul_tn")?;
    let (k2, n) = as_matrix(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul_nt")?;
    let (n, k2) = as_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = as_matrix(x, "add_row_bias")?;
    if bias.shape() != [n] {
        return Err(Error::dim("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n.max(1)) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of a rank-2 tensor, i.e. the bias gradient `Σ_rows dy`.
pub fn column_sums(x: &Tensor) -> Result<Tensor> {
    let (_, n) = as_matrix(x, "column_sums")?;
    let mut out = vec![0.0f32; n];
    for row in x.data.chunks(n.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(vec![n], out)
}

/// Per-token linear map: `x[N×C_in] · w[C_in×C_out] + b[C_out]`.
pub fn pointwise_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = matmul(x, w)?;
    add_row_bias(&y, b)
}

/// Splits an `[H,W,C]` or `[B,H,W,C]` shape into `(batch, h, w, c)`.
fn grid_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "depthwise convolution expects [H,W,C] or [B,H,W,C]".into(),
        }),
    }
}

fn check_dw_kernel(kernel: &Tensor, c: usize) -> Result<()> {
    match *kernel.shape() {
        [3, 3, kc] if kc == c => Ok(()),
        [3, 3, _] => Err(Error::dim("depthwise_conv", &[3, 3, c], kernel.shape())),
        _ => Err(Error::UnsupportedKernel(kernel.shape().to_vec())),
    }
}

/// Per-channel 3×3 convolution with zero padding 1 and stride 1.
///
/// Accepts `[H,W,C]` or a batch `[B,H,W,C]`; channels never mix.
pub fn depthwise_conv(x: &Tensor, kernel: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, h, w, c) = grid_dims(x)?;
    check_dw_kernel(kernel, c)?;
    if b.shape() != [c] {
        return Err(Error::dim("depthwise_conv", &[c], b.shape()));
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0f32; x.numel()];
    for n in 0..batch {
        let base = n * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[base + (i * w + j) * c..base + (i * w + j + 1) * c];
                o.copy_from_slice(b.data());
                for di in 0..3 {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let sj = j as isize + dj as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = base + (si as usize * w + sj as usize) * c;
                        let kk = (di * 3 + dj) * c;
                        for ch in 0..c {
                            o[ch] += kd[kk + ch] * xd[src + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of [`depthwise_conv`] with respect to its input.
pub fn depthwise_conv_input_grad(dy: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (batch, h, w, c) = grid_dims(dy)?;
    check_dw_kernel(kernel, c)?;
    let (gd, kd) = (dy.data(), kernel.data());
    let mut out = vec![0.0f32; dy.numel()];
    for n in 0..batch {
        let base = n * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let g = &gd[base + (i * w + j) * c..base + (i * w + j + 1) * c];
                for di in 0..3 {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let sj = j as isize + dj as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let dst = base + (si as usize * w + sj as usize) * c;
                        let kk = (di * 3 + dj) * c;
                        for ch in 0..c {
                            out[dst + ch] += kd[kk + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(dy.shape().to_vec(), out)
}

/// Gradient of [`depthwise_conv`] with respect to its `[3,3,C]` kernel.
pub fn depthwise_conv_kernel_grad(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::dim("depthwise_conv_kernel_grad", x.shape(), dy.shape()));
    }
    let (batch, h, w, c) = grid_dims(x)?;
    let (xd, gd) = (x.data(), dy.data());
    let mut out = vec![0.0f32; 9 * c];
    for n in 0..batch {
        let base = n * h * w * c;
        for i in 0..h {
            for j in 0..w {
                let g = &gd[base + (i * w + j) * c..base + (i * w + j + 1) * c];
                for di in 0..3 {
                    let si = i as isize + di as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let sj = j as isize + dj as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = base + (si as usize * w + sj as usize) * c;
                        let kk = (di * 3 + dj) * c;
                        for ch in 0..c {
                            out[kk + ch] += xd[src + ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, 3, c], out)
}

/// Concatenates along the last axis; all leading dims must agree.
pub fn concat_last_dim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra == 0 || ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(Error::dim("concat_last_dim", a.shape(), b.shape()));
    }
    let (c1, c2) = (a.last_dim(), b.last_dim());
    let rows = a.rows();
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * c1..(r + 1) * c1]);
        out.extend_from_slice(&b.data()[r * c2..(r + 1) * c2]);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = c1 + c2;
    Tensor::new(shape, out)
}

/// Inverse of [`concat_last_dim`]: splits the last axis at `c1`.
pub fn split_last_dim(t: &Tensor, c1: usize) -> Result<(Tensor, Tensor)> {
    let c = t.last_dim();
    if t.rank() == 0 || c1 > c {
        return Err(Error::Shape {
            shape: t.shape().to_vec(),
            reason: format!("cannot split last axis at {c1}"),
        });
    }
    let c2 = c - c1;
    let rows = t.rows();
    let mut a = Vec::with_capacity(rows * c1);
    let mut b = Vec::with_capacity(rows * c2);
    for r in 0..rows {
        let row = &t.data()[r * c..(r + 1) * c];
        a.extend_from_slice(&row[..c1]);
        b.extend_from_slice(&row[c1..]);
    }
    let mut sa = t.shape().to_vec();
    let mut sb = t.shape().to_vec();
    let last = sa.len() - 1;
    sa[last] = c1;
    sb[last] = c2;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

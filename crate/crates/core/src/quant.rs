//! Low-bit saved-activation records.
//!
//! A [`QuantBlob`] holds either 4-bit asymmetric codes (two per byte, low
//! nibble first) or a 1-bit mask (eight per byte, least significant bit
//! first), together with the per-tensor scale and minimum.
//!
//! Serialized layout, all little-endian:
//!
//! ```text
//! bits: u8 | rank: u8 | dims: rank × u32 | scale: f32 | min: f32 | payload
//! ```
//!
//! The payload is exactly `ceil(numel · bits / 8)` bytes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-blob overhead counted in memory accounting: scale and min as two f32.
pub const QUANT_HEADER_BYTES: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantBlob {
    bits: u8,
    shape: Vec<usize>,
    scale: f32,
    min: f32,
    packed: Vec<u8>,
}

fn payload_len(numel: usize, bits: u8) -> usize {
    (numel * bits as usize).div_ceil(8)
}

impl QuantBlob {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn min(&self) -> f32 {
        self.min
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Storage cost used by the tape and the accountant: packed payload,
    /// plus scale and min for 4-bit blobs. Masks carry no range.
    pub fn storage_bytes(&self) -> u64 {
        match self.bits {
            1 => self.packed.len() as u64,
            _ => self.packed.len() as u64 + QUANT_HEADER_BYTES,
        }
    }

    /// Unpacked integer codes.
    pub fn codes(&self) -> Vec<u8> {
        unpack(&self.packed, self.bits, self.numel())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 4 * self.shape.len() + 8 + self.packed.len());
        out.push(self.bits);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.min.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, bits, rest) = read_shape_header(bytes)?;
        if bits != 1 && bits != 4 {
            return Err(Error::Format(format!("unsupported bit width {bits}")));
        }
        if rest.len() < 8 {
            return Err(Error::Format("truncated scale/min".into()));
        }
        let scale = f32::from_le_bytes(rest[0..4].try_into().unwrap());
        let min = f32::from_le_bytes(rest[4..8].try_into().unwrap());
        let packed = rest[8..].to_vec();
        let blob = QuantBlob {
            bits,
            shape,
            scale,
            min,
            packed,
        };
        blob.validate()?;
        Ok(blob)
    }

    fn validate(&self) -> Result<()> {
        let want = payload_len(self.numel(), self.bits);
        if self.packed.len() != want {
            return Err(Error::Format(format!(
                "packed payload is {} bytes, shape {:?} at {} bits needs {want}",
                self.packed.len(),
                self.shape,
                self.bits
            )));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() || !self.min.is_finite() {
            return Err(Error::Format(format!(
                "invalid range: scale {} min {}",
                self.scale, self.min
            )));
        }
        Ok(())
    }
}

/// Reads `bits | rank | dims`, the shape-encoding prefix shared with the
/// checkpoint format. Returns the remaining bytes.
pub(crate) fn read_shape_header(bytes: &[u8]) -> Result<(Vec<usize>, u8, &[u8])> {
    if bytes.len() < 2 {
        return Err(Error::Format("truncated header".into()));
    }
    let bits = bytes[0];
    let rank = bytes[1] as usize;
    let dims_end = 2 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format(format!("truncated dims for rank {rank}")));
    }
    let shape = bytes[2..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((shape, bits, &bytes[dims_end..]))
}

pub(crate) fn write_shape_header(out: &mut Vec<u8>, bits: u8, shape: &[usize]) {
    out.push(bits);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Packs codes of width `bits` (1 or 4), low-order first within each byte.
pub fn pack(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; payload_len(codes.len(), bits)];
    match bits {
        4 => {
            for (i, &c) in codes.iter().enumerate() {
                out[i / 2] |= (c & 0x0f) << (4 * (i % 2));
            }
        }
        1 => {
            for (i, &c) in codes.iter().enumerate() {
                out[i / 8] |= (c & 1) << (i % 8);
            }
        }
        _ => panic!("pack supports 1 or 4 bits, got {bits}"),
    }
    out
}

pub fn unpack(packed: &[u8], bits: u8, numel: usize) -> Vec<u8> {
    match bits {
        4 => (0..numel)
            .map(|i| (packed[i / 2] >> (4 * (i % 2))) & 0x0f)
            .collect(),
        1 => (0..numel).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect(),
        _ => panic!("unpack supports 1 or 4 bits, got {bits}"),
    }
}

/// Round half away from zero. `f64::round` already has this tie rule.
fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Asymmetric per-tensor affine quantization to `bits` (1..=8), returning
/// the unpacked codes with scale and min.
///
/// Codes are `round((x - min) · (2^N - 1) / (max - min))`, evaluated in
/// f64 so that exact midpoints such as `7.5` round consistently.
pub(crate) fn quantize_affine(t: &Tensor, bits: u8) -> Result<(Vec<u8>, f32, f32)> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Precondition(format!("bit width {bits} out of range")));
    }
    if !t.is_finite() {
        return Err(Error::Numeric("cannot quantize a tensor containing NaN or Inf".into()));
    }
    if t.numel() == 0 {
        return Ok((Vec::new(), 0.0, 0.0));
    }
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let levels = ((1u32 << bits) - 1) as f64;
    if hi == lo {
        return Ok((vec![0; t.numel()], 0.0, lo));
    }
    let range = hi as f64 - lo as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| round_half_away((v as f64 - lo as f64) * levels / range).clamp(0.0, levels) as u8)
        .collect();
    Ok((codes, (range / levels) as f32, lo))
}

/// Reconstructs `code · s + m` for every element.
pub(crate) fn dequantize_codes(codes: &[u8], scale: f32, min: f32) -> Vec<f32> {
    codes
        .iter()
        .map(|&c| (c as f64 * scale as f64 + min as f64) as f32)
        .collect()
}

/// 4-bit asymmetric quantization of a whole tensor.
pub fn quantize(t: &Tensor, bits: u8) -> Result<QuantBlob> {
    if bits != 4 {
        return Err(Error::Precondition(format!(
            "quantize supports 4-bit codes, got {bits}; use quantize_mask for 1-bit masks"
        )));
    }
    let (codes, scale, min) = quantize_affine(t, bits)?;
    Ok(QuantBlob {
        bits,
        shape: t.shape().to_vec(),
        scale,
        min,
        packed: pack(&codes, bits),
    })
}

/// 1-bit mask with bit `i` set exactly where `pred(t[i])` holds.
pub fn quantize_mask(t: &Tensor, pred: impl Fn(f32) -> bool) -> QuantBlob {
    let codes: Vec<u8> = t.data().iter().map(|&v| pred(v) as u8).collect();
    QuantBlob {
        bits: 1,
        shape: t.shape().to_vec(),
        scale: 1.0,
        min: 0.0,
        packed: pack(&codes, 1),
    }
}

pub fn dequantize(q: &QuantBlob) -> Result<Tensor> {
    q.validate()?;
    let values = dequantize_codes(&q.codes(), q.scale, q.min);
    Tensor::new(q.shape.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn quantize_three_points() {
        let q = quantize(&t(&[0.0, 0.5, 1.0]), 4).unwrap();
        assert_eq!(q.codes(), vec![0, 8, 15]);
        assert_eq!(q.scale(), (1.0f64 / 15.0) as f32);
        assert_eq!(q.min(), 0.0);
        let d = dequantize(&q).unwrap();
        let expected = [0.0, (8.0f64 / 15.0) as f32, 1.0];
        for (a, b) in d.data().iter().zip(expected) {
            assert!((a - b).abs() <= f32::EPSILON, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_tensor_is_degenerate() {
        let q = quantize(&t(&[0.3, 0.3]), 4).unwrap();
        assert_eq!(q.codes(), vec![0, 0]);
        assert_eq!(q.scale(), 0.0);
        assert_eq!(q.min(), 0.3);
        assert_eq!(dequantize(&q).unwrap().data(), &[0.3, 0.3]);
    }

    #[test]
    fn max_and_min_codes_dequantize_exactly() {
        let q = QuantBlob {
            bits: 4,
            shape: vec![1],
            scale: 1.0 / 15.0,
            min: 0.0,
            packed: pack(&[15], 4),
        };
        assert!((dequantize(&q).unwrap().data()[0] - 1.0).abs() <= f32::EPSILON);
        let q = QuantBlob {
            bits: 4,
            shape: vec![1],
            scale: 0.77,
            min: 0.3,
            packed: pack(&[0], 4),
        };
        assert_eq!(dequantize(&q).unwrap().data(), &[0.3]);
    }

    #[test]
    fn rejects_non_finite_and_other_widths() {
        assert!(matches!(quantize(&t(&[1.0, f32::NAN]), 4), Err(Error::Numeric(_))));
        assert!(matches!(quantize(&t(&[f32::INFINITY]), 4), Err(Error::Numeric(_))));
        assert!(quantize(&t(&[1.0]), 8).is_err());
    }

    #[test]
    fn roundtrip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[64], |_| rng.gen_range(-1.0..1.0));
        let q = quantize(&x, 4).unwrap();
        let d = dequantize(&q).unwrap();
        let bound = q.scale() / 2.0 + f32::EPSILON;
        assert!(x.max_abs_diff(&d).unwrap() <= bound);
    }

    #[test]
    fn nibble_and_bit_order() {
        assert_eq!(pack(&[1, 2, 3], 4), vec![0x21, 0x03]);
        assert_eq!(pack(&[1, 0, 1, 1, 0, 0, 0, 0, 1], 1), vec![0b0000_1101, 0b1]);
    }

    #[test]
    fn byte_layout() {
        let q = quantize(&Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap(), 4).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes[0], 4);
        assert_eq!(bytes[1], 2);
        assert_eq!(&bytes[2..6], &1u32.to_le_bytes());
        assert_eq!(&bytes[6..10], &3u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &q.scale().to_le_bytes());
        assert_eq!(&bytes[14..18], &0f32.to_le_bytes());
        assert_eq!(&bytes[18..], &[0x80, 0x0f]);
        assert_eq!(QuantBlob::from_bytes(&bytes).unwrap(), q);
    }

    #[test]
    fn corrupted_payload_is_a_format_error() {
        let q = quantize(&t(&[0.0, 1.0, 2.0]), 4).unwrap();
        let mut bytes = q.to_bytes();
        bytes.pop();
        assert!(matches!(QuantBlob::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bad = q.clone();
        bad.packed.push(0);
        assert!(matches!(dequantize(&bad), Err(Error::Format(_))));
        assert!(matches!(QuantBlob::from_bytes(&[2, 0, 0, 0, 0, 0, 0, 0, 0, 0]), Err(Error::Format(_))));
    }

    #[test]
    fn storage_bytes_follow_packing() {
        let q = quantize(&Tensor::zeros(&[100]), 4).unwrap();
        assert_eq!(q.storage_bytes(), 58);
        let m = quantize_mask(&Tensor::zeros(&[100]), |v| v > 0.0);
        assert_eq!(m.storage_bytes(), 13);
    }
}

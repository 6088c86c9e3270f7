//! Flat parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"S2AC" | version u8 = 1 | count u32
//! count × ( name_len u16 | name utf-8 | bits u8 = 32 | rank u8 | dims u32×rank | f32×numel )
//! ```
//!
//! The `bits | rank | dims` prefix is the same shape encoding used by
//! serialized quantization blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::quant::{read_shape_header, write_shape_header};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"S2AC";
const VERSION: u8 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        write_shape_header(&mut out, 32, p.value.shape());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let fail = |at: usize, why: &str| Error::Parse {
        offset: at as u64,
        reason: why.to_string(),
    };
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(fail(0, "missing checkpoint magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, "unsupported checkpoint version"));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut at = 9;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        if bytes.len() < at + 2 {
            return Err(fail(at, "truncated name length"));
        }
        let n = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize;
        at += 2;
        let name = bytes
            .get(at..at + n)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| fail(at, "bad parameter name"))?
            .to_string();
        at += n;
        let (shape, bits, rest) = read_shape_header(&bytes[at..]).map_err(|_| fail(at, "bad shape header"))?;
        if bits != 32 {
            return Err(fail(at, "parameters must be stored as 32-bit floats"));
        }
        at = bytes.len() - rest.len();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = rest
            .get(..4 * numel)
            .ok_or_else(|| fail(at, "truncated tensor data"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 4 * numel;
        if out.insert(name, Tensor::new(shape, data)?).is_some() {
            return Err(fail(at, "duplicate parameter name"));
        }
    }
    if at != bytes.len() {
        return Err(fail(at, "trailing bytes after last parameter"));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

/// Overwrites every parameter of `store` with the archived tensor of the
/// same name. Missing names and shape changes are errors.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = decode_checkpoint(&fs::read(path)?)?;
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no parameter {name:?}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::dim("load_checkpoint", p.value.shape(), t.shape()));
        }
        p.value = t.clone();
    }
    Ok(())
}

//! Dataset ingestion.
//!
//! Three sources are supported:
//!
//! * IDX: the big-endian binary layout used by MNIST-style datasets. Magic
//!   is two zero bytes, a type byte (`0x08`, unsigned bytes) and a rank
//!   byte, followed by one big-endian `u32` per dimension and the data.
//!   Images are rank 3 `[n, rows, cols]` or rank 4 `[n, rows, cols, ch]`;
//!   labels are rank 1.
//! * CSV: one sample per line, `label,p0,p1,...` with pixels in `0..=255`
//!   in row-major `[rows, cols, ch]` order. No header.
//! * A built-in seeded synthetic glyph task.
//!
//! Pixels are scaled to `[0, 1]`. Splits are a seeded 70/15/15 shuffle.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_SIZE: usize = 16;
pub const SYNTHETIC_CLASSES: usize = 4;
const GLYPH: usize = 5;
const SPLIT_STREAM: u64 = 0x5_9117;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { seed: u64, n: usize },
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, height: usize, width: usize, channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, H, W, ch]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Validates labels and assigns a seeded 70/15/15 split.
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split_seed: u64) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape {
                shape: images.shape().to_vec(),
                reason: "images must be [n, height, width, channels]".into(),
            });
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for {n} images", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Validation(format!("label {l} of sample {i} is outside 0..{classes}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed ^ SPLIT_STREAM));
        let n_train = n * 70 / 100;
        let n_val = n * 15 / 100;
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(Dataset {
            images,
            labels,
            classes,
            train: order,
            val,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn indices(&self, tag: SplitTag) -> &[usize] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// Gathers `indices` into a `[k, H, W, ch]` batch with its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), h, w, c], data).expect("gathered batch"), labels)
    }
}

/// Loads `source` with labels in `0..classes`, split by `split_seed`.
pub fn load_dataset(source: &DataSource, classes: usize, split_seed: u64) -> Result<Dataset> {
    let (images, labels) = match source {
        DataSource::Synthetic { seed, n } => {
            if classes != SYNTHETIC_CLASSES {
                return Err(Error::Config(format!(
                    "the synthetic task has {SYNTHETIC_CLASSES} classes, not {classes}"
                )));
            }
            synthetic(*seed, *n)
        }
        DataSource::Idx { images, labels } => {
            let imgs = read(images)?;
            let labs = read(labels)?;
            (decode_idx_images(&imgs)?, decode_idx_labels(&labs)?)
        }
        DataSource::Csv {
            path,
            height,
            width,
            channels,
        } => {
            let text = std::fs::read_to_string(path)?;
            parse_csv(&text, [*height, *width, *channels])?
        }
    };
    Dataset::new(images, labels, classes, split_seed)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Glyph templates for `seed`: one `5×5` binary pattern per class, all
/// pairwise different in at least 6 cells.
fn glyphs(rng: &mut ChaCha8Rng) -> Vec<[bool; GLYPH * GLYPH]> {
    let mut out: Vec<[bool; GLYPH * GLYPH]> = Vec::with_capacity(SYNTHETIC_CLASSES);
    while out.len() < SYNTHETIC_CLASSES {
        let mut g = [false; GLYPH * GLYPH];
        for cell in g.iter_mut() {
            *cell = rng.gen_bool(0.45);
        }
        let filled = g.iter().filter(|&&c| c).count();
        let distinct = out.iter().all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= 6);
        if (8..=16).contains(&filled) && distinct {
            out.push(g);
        }
    }
    out
}

/// `n` samples of a 4-way glyph task on `16×16×1` images. Each class is a
/// seed-specific `5×5` glyph stamped at a random position with random
/// contrast over Gaussian background noise. Classes are balanced
/// (`label = i mod 4`) and sample order is shuffled.
pub fn synthetic(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = glyphs(&mut rng);
    let noise = Normal::new(0.0f32, 0.08).expect("finite std");
    let s = SYNTHETIC_SIZE;
    let mut labels: Vec<usize> = (0..n).map(|i| i % SYNTHETIC_CLASSES).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * s * s);
    for &label in &labels {
        let mut img: Vec<f32> = (0..s * s).map(|_| 0.2 + noise.sample(&mut rng)).collect();
        let (oy, ox) = (rng.gen_range(0..=s - GLYPH), rng.gen_range(0..=s - GLYPH));
        let contrast = rng.gen_range(0.7f32..1.0);
        for (k, _) in templates[label].iter().enumerate().filter(|(_, &on)| on) {
            img[(oy + k / GLYPH) * s + ox + k % GLYPH] += contrast;
        }
        data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    (Tensor::new(vec![n, s, s, 1], data).expect("synthetic shape"), labels)
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Header and payload of an unsigned-byte IDX file.
fn decode_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let Some(raw) = bytes.get(at..at + 4) else {
            return Err(parse_err(bytes.len(), format!("truncated dimension {i}")));
        };
        dims.push(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * rank;
    let need = dims.iter().product::<usize>();
    let body = &bytes[start..];
    if body.len() != need {
        return Err(parse_err(
            start + body.len().min(need),
            format!("expected {need} data bytes, found {}", body.len()),
        ));
    }
    Ok((dims, body))
}

pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, body) = decode_idx(bytes)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, *h, *w, 1],
        [n, h, w, c] => vec![*n, *h, *w, *c],
        _ => return Err(parse_err(3, format!("image files need rank 3 or 4, got {}", dims.len()))),
    };
    Tensor::new(shape, body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, body) = decode_idx(bytes)?;
    if dims.len() != 1 {
        return Err(parse_err(3, format!("label files need rank 1, got {}", dims.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Unsigned-byte IDX encoding of `data` with `dims`.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize || dims.iter().product::<usize>() != data.len() {
        return Err(Error::Validation("IDX dims do not match data length".into()));
    }
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("IDX dimension {d} too large")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Parses CSV samples of shape `[h, w, ch]`. Rows are numbered from 1.
pub fn parse_csv(text: &str, [h, w, c]: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    let per = h * w * c;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label = fields.next().unwrap_or_default();
        let label: usize = label
            .parse()
            .map_err(|_| Error::Validation(format!("row {row}: label {label:?} is not a non-negative integer")))?;
        let start = data.len();
        for (col, f) in fields.enumerate() {
            let v: f32 = f
                .parse()
                .map_err(|_| Error::Validation(format!("row {row}: non-numeric pixel {f:?} in column {}", col + 2)))?;
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Validation(format!("row {row}: pixel {v} outside 0..=255")));
            }
            data.push(v / 255.0);
        }
        if data.len() - start != per {
            return Err(Error::Validation(format!(
                "row {row}: expected {per} pixels, found {}",
                data.len() - start
            )));
        }
        labels.push(label);
    }
    Ok((Tensor::new(vec![labels.len(), h, w, c], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let d = load_dataset(&DataSource::Synthetic { seed: 7, n: 600 }, 4, 7).unwrap();
        assert_eq!(d.len(), 600);
        for k in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 150);
        }
        assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = load_dataset(&DataSource::Synthetic { seed: 7, n: 600 }, 4, 7).unwrap();
        assert_eq!(d, again);
        let other = load_dataset(&DataSource::Synthetic { seed: 8, n: 600 }, 4, 7).unwrap();
        assert_ne!(d.images, other.images);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let d = load_dataset(&DataSource::Synthetic { seed: 1, n: 100 }, 4, 3).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (70, 15, 15));
        let mut all: Vec<usize> = d.train.iter().chain(&d.val).chain(&d.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let imgs = encode_idx(&[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4]).unwrap();
        let t = decode_idx_images(&imgs).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 1]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);

        let mut bad = imgs.clone();
        bad[1] = 0x01;
        assert!(matches!(decode_idx_images(&bad), Err(Error::Parse { offset: 0, .. })));
        let truncated = &imgs[..imgs.len() - 3];
        assert!(matches!(decode_idx_images(truncated), Err(Error::Parse { offset: 21, .. })));

        let labels = encode_idx(&[3], &[0, 1, 9]).unwrap();
        assert_eq!(decode_idx_labels(&labels).unwrap(), vec![0, 1, 9]);
        assert!(decode_idx_labels(&imgs).is_err());
    }

    #[test]
    fn out_of_range_label_is_validation_error() {
        let t = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(matches!(Dataset::new(t, vec![0, 4], 4, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_parsing() {
        let (t, l) = parse_csv("1,0,255\n\n0,51,0\n", [1, 2, 1]).unwrap();
        assert_eq!(l, vec![1, 0]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.0]);
        let err = parse_csv("1,0,255\n0,x,1\n", [1, 2, 1]).unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("row 2")), "{err}");
        assert!(parse_csv("1,0\n", [1, 2, 1]).is_err());
        assert!(parse_csv("1,0,256\n", [1, 2, 1]).is_err());
    }
}

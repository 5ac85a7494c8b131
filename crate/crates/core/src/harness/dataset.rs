//! In-memory image classification datasets and the LKDS file format.
//!
//! LKDS (little-endian): magic `LKDS`, version `u32 = 1`, `N u32`, `C u16`,
//! `H u16`, `W u16`, `classes u16`, then `N` records of `[label u16, H·W·C
//! pixel bytes]` with pixels interleaved per location (row, column, channel).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LKDS_MAGIC: &[u8; 4] = b"LKDS";
pub const LKDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 * 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Planar `[N, C, H, W]` bytes.
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    /// `pixels` are planar `[N, C, H, W]`.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || classes == 0 {
            return Err(Error::Validation("dataset extents must be positive".into()));
        }
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Length {
                expected: labels.len() * channels * height * width,
                found: pixels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} >= {classes} classes"
            )));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[len(indices), C, H, W]` with bytes scaled by 1/255.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("dataset images have consistent extents")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} exceeds u16")))
        };
        let n = u32::try_from(self.len())
            .map_err(|_| Error::Validation("too many records for LKDS".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (2 + self.image_len()));
        out.extend_from_slice(LKDS_MAGIC);
        out.extend_from_slice(&LKDS_VERSION.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        for (v, what) in [
            (self.channels, "channels"),
            (self.height, "height"),
            (self.width, "width"),
            (self.classes, "classes"),
        ] {
            out.extend_from_slice(&narrow(v, what)?.to_le_bytes());
        }
        let plane = self.height * self.width;
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            let img = self.image_bytes(i);
            for p in 0..plane {
                for c in 0..self.channels {
                    out.push(img[c * plane + p]);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != LKDS_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"LKDS\"",
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
        let version = u32_at(4);
        if version != LKDS_VERSION {
            return Err(Error::Format(format!("unsupported LKDS version {version}")));
        }
        let n = u32_at(8) as usize;
        let (c, h, w, classes) = (u16_at(12), u16_at(14), u16_at(16), u16_at(18));
        let record = 2 + c * h * w;
        let expected = HEADER_LEN + n * record;
        if bytes.len() < expected {
            return Err(Error::Length {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after {n} records",
                bytes.len() - expected
            )));
        }
        let plane = h * w;
        let mut pixels = vec![0u8; n * c * plane];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let rec = &bytes[HEADER_LEN + i * record..HEADER_LEN + (i + 1) * record];
            labels.push(u16::from_le_bytes([rec[0], rec[1]]));
            let img = &mut pixels[i * c * plane..(i + 1) * c * plane];
            for p in 0..plane {
                for ch in 0..c {
                    img[ch * plane + p] = rec[2 + p * c + ch];
                }
            }
        }
        Dataset::new(c, h, w, classes, pixels, labels)
    }
}

/// Parses an LKDS file; the file must hold at least `classes` records.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = Dataset::from_bytes(&bytes)?;
    if ds.len() < ds.classes {
        return Err(Error::Validation(format!(
            "{} holds {} records for {} classes",
            path.display(),
            ds.len(),
            ds.classes
        )));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, ds.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Quadrant of `(dy, dx)`: bit 0 set when the second blob lies left of the
/// first, bit 1 when it lies above.
fn quadrant(dy: f64, dx: f64) -> u16 {
    u16::from(dx < 0.0) + 2 * u16::from(dy < 0.0)
}

/// Two Gaussian blobs (σ = S/16) at uniform positions at least S/2 apart;
/// channel 0 holds the reference blob, channel 1 the second blob. The label is
/// the quadrant of blob 2 relative to blob 1.
pub fn gen_longrange(seed: u64, n: usize, size: usize, classes: usize) -> Result<Dataset> {
    if size < 32 {
        return Err(Error::Config(format!(
            "long-range images need size >= 32, got {size}"
        )));
    }
    if classes != 4 {
        return Err(Error::Config(format!(
            "the long-range task has 4 quadrant classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let sigma = s / 16.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let plane = size * size;
    let mut pixels = vec![0u8; n * 2 * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (p1, p2) = loop {
            let p1: (f64, f64) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let p2: (f64, f64) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            if (p2.0 - p1.0).hypot(p2.1 - p1.1) >= s / 2.0 {
                break (p1, p2);
            }
        };
        labels.push(quadrant(p2.0 - p1.0, p2.1 - p1.1));
        let img = &mut pixels[i * 2 * plane..(i + 1) * 2 * plane];
        for (ch, (cy, cx)) in [p1, p2].into_iter().enumerate() {
            for r in 0..size {
                for c in 0..size {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    let v = (-(dy * dy + dx * dx) * inv).exp();
                    img[ch * plane + r * size + c] = (255.0 * v).round() as u8;
                }
            }
        }
    }
    Dataset::new(2, size, size, classes, pixels, labels)
}

/// Seeded shuffle of `0..n`; the first ⌊0.8·n⌋ indices train, the rest test.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Contract(format!(
            "an 80/20 split needs at least 5 samples, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n * 4 / 5);
    Ok((idx, test))
}

pub fn split_80_20(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

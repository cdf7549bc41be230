use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]`, one row per image, with their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistRaw {
    pub images: Array2<f32>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: format!("file ends after {} bytes while reading a header field", bytes.len()),
        })
}

fn expect_magic(bytes: &[u8], want: u32) -> Result<()> {
    let got = read_u32(bytes, 0)?;
    if got != want {
        return Err(Error::Format {
            offset: 0,
            msg: format!("magic number {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)` with raw bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    expect_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: (16 + body.len()) as u64,
            msg: format!(
                "truncated image data: {need} pixel bytes declared, {} present",
                body.len()
            ),
        });
    }
    Ok((count, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    expect_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            offset: (8 + body.len()) as u64,
            msg: format!("truncated label data: {count} labels declared, {} present", body.len()),
        });
    }
    Ok(&body[..count])
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<MnistRaw> {
    let img = std::fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let lab = std::fs::read(label_path).map_err(|e| Error::io(label_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{count} images but {} labels", labels.len()),
        });
    }
    let images = Array2::from_shape_fn((count, rows * cols), |(i, j)| {
        f32::from(pixels[i * rows * cols + j]) / 255.0
    });
    Ok(MnistRaw {
        images,
        labels: labels.to_vec(),
        rows,
        cols,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredMnistConfig {
    pub flip_e: Vec<f64>,
    pub label_noise: f64,
    pub n_per_env: Vec<usize>,
    pub downsample: (usize, usize),
    pub seed: u64,
}

impl Default for ColoredMnistConfig {
    fn default() -> Self {
        Self {
            flip_e: vec![0.1, 0.2, 0.9],
            label_noise: 0.2,
            n_per_env: vec![2500, 2500, 2500],
            downsample: (14, 14),
            seed: 0,
        }
    }
}

/// Area-average pooling onto an `h x w` grid.
fn pool(img: &[f32], rows: usize, cols: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for bi in 0..h {
        let (r0, r1) = (bi * rows / h, ((bi + 1) * rows / h).max(bi * rows / h + 1));
        for bj in 0..w {
            let (c0, c1) = (bj * cols / w, ((bj + 1) * cols / w).max(bj * cols / w + 1));
            let mut s = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += f64::from(img[r * cols + c]);
                }
            }
            out[bi * w + bj] = s / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Binary colored digits: `Y = -1` for 0-4 and `+1` for 5-9, flipped with
/// `label_noise`; color `C = Y` flipped with the environment's `e`.
///
/// Each sample is two stacked pooled channels; the channel not matching `C` is zero.
pub fn make_colored_mnist<T: Scalar>(raw: &MnistRaw, cfg: &ColoredMnistConfig) -> Result<Vec<Dataset<T>>> {
    let probs = cfg.flip_e.iter().chain(std::iter::once(&cfg.label_noise));
    if let Some(p) = probs.into_iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("probability {p} outside [0, 1]")));
    }
    if cfg.flip_e.is_empty() || cfg.flip_e.len() != cfg.n_per_env.len() {
        return Err(Error::Config(
            "flip_e and n_per_env must be non-empty and equally long".into(),
        ));
    }
    let (h, w) = cfg.downsample;
    if h == 0 || w == 0 || h > raw.rows || w > raw.cols {
        return Err(Error::Config(format!(
            "cannot pool {}x{} images to {h}x{w}",
            raw.rows, raw.cols
        )));
    }
    let total: usize = cfg.n_per_env.iter().sum();
    if total > raw.labels.len() {
        return Err(Error::Size(format!(
            "{total} samples requested but only {} images available",
            raw.labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..raw.labels.len()).collect();
    order.shuffle(&mut rng);
    let mut next = 0;
    let mut out = Vec::with_capacity(cfg.n_per_env.len());
    for (env, (&e, &n)) in cfg.flip_e.iter().zip(&cfg.n_per_env).enumerate() {
        let mut x = Array2::<f64>::zeros((n, 2 * h * w));
        let mut y = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(n);
        for i in 0..n {
            let src = order[next];
            next += 1;
            let mut yi = if raw.labels[src] < 5 { -1.0 } else { 1.0 };
            if rng.random::<f64>() < cfg.label_noise {
                yi = -yi;
            }
            let ci = if rng.random::<f64>() < e { -yi } else { yi };
            let img = raw.images.row(src);
            let pooled = pool(img.as_slice().expect("contiguous rows"), raw.rows, raw.cols, h, w);
            let offset = if ci > 0.0 { 0 } else { h * w };
            for (j, v) in pooled.into_iter().enumerate() {
                x[[i, offset + j]] = v;
            }
            y.push(yi);
            color.push(ci);
        }
        let ds = Dataset::with_annotations(x, Array1::from(y), Some(vec![env; n]), Some(color))?;
        out.push(ds.cast());
    }
    Ok(out)
}

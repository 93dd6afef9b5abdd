//! Procedural token-grid images, patch tokenization, and the dataset file.
//!
//! Every image is a pure function of `(seed, index)`: the class is
//! `index mod n_classes` and all shape parameters come from a ChaCha stream
//! selected by the index, so rendering can proceed in any order.
//!
//! The on-disk format is `"SRPD"`, a `u32` version, the `u32` fields
//! `G, P, n_classes, n_images`, then one record per image: a `u32` label
//! followed by the row-major `f32` pixels. All integers and floats are
//! little-endian.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"SRPD";
pub const DATASET_VERSION: u32 = 1;
/// Number of distinct shape families available.
pub const MAX_CLASSES: usize = 4;

const HEADER_LEN: usize = 4 + 4 * 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grid: usize,
    pub patch: usize,
    pub n_classes: usize,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 4,
            patch: 4,
            n_classes: 4,
            n_images: 4096,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.patch < 2 {
            return Err(Error::Config(format!(
                "grid ({}) and patch ({}) must both be at least 2",
                self.grid, self.patch
            )));
        }
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must lie in 1..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.grid * self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// A disjoint evaluation set drawn from a different seed.
    pub fn held_out(&self, n_images: usize) -> DataConfig {
        DataConfig {
            n_images,
            seed: self.seed ^ 0x9E37_79B9_7F4A_7C15,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenImage {
    /// `[G·P, G·P]`
    pub pixels: Tensor<f32>,
    /// `[G², P²]`
    pub tokens: Tensor<f32>,
    pub label: usize,
}

impl TokenImage {
    pub fn from_pixels(pixels: Tensor<f32>, grid: usize, patch: usize, label: usize) -> Result<Self> {
        let tokens = patchify(&pixels, grid, patch)?;
        Ok(TokenImage {
            pixels,
            tokens,
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    Square,
    Cross,
    Stripes,
}

impl ShapeClass {
    pub fn from_label(label: usize) -> ShapeClass {
        match label % MAX_CLASSES {
            0 => ShapeClass::Disk,
            1 => ShapeClass::Square,
            2 => ShapeClass::Cross,
            _ => ShapeClass::Stripes,
        }
    }
}

struct ShapeParams {
    cx: f64,
    cy: f64,
    size: f64,
    intensity: f64,
    background: f64,
    period: f64,
    phase: f64,
}

impl ShapeParams {
    fn inside(&self, class: ShapeClass, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx).abs(), (y - self.cy).abs());
        let r = self.size;
        match class {
            ShapeClass::Disk => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.max(dy) <= r,
            ShapeClass::Cross => {
                let arm = 0.35 * r;
                (dx <= arm && dy <= r) || (dy <= arm && dx <= r)
            }
            ShapeClass::Stripes => ((y - self.phase) / self.period).floor() as i64 % 2 == 0,
        }
    }
}

/// Renders image `index`; rejects indices outside `0..n_images`.
pub fn render_image(config: &DataConfig, index: usize) -> Result<TokenImage> {
    config.validate()?;
    if index >= config.n_images {
        return Err(Error::InvalidArgument(format!(
            "image index {index} out of range 0..{}",
            config.n_images
        )));
    }
    let side = config.side() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let label = index % config.n_classes;
    let class = ShapeClass::from_label(label);
    let params = ShapeParams {
        cx: rng.random_range(0.3 * side..0.7 * side),
        cy: rng.random_range(0.3 * side..0.7 * side),
        size: rng.random_range(0.2 * side..0.35 * side),
        intensity: rng.random_range(0.4..=1.0),
        background: rng.random_range(-1.0..=-0.6),
        period: rng.random_range(0.15 * side..0.3 * side),
        phase: rng.random_range(0.0..side),
    };

    let n = config.side();
    let mut pixels = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let mut acc = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let hit = params.inside(class, col as f64 + sx, row as f64 + sy);
                acc += if hit { params.intensity } else { params.background };
            }
            pixels.push((acc / 4.0).clamp(-1.0, 1.0) as f32);
        }
    }
    let pixels = Tensor::new(&[n, n], pixels)?;
    TokenImage::from_pixels(pixels, config.grid, config.patch, label)
}

/// Splits a `[G·P, G·P]` image into `G²` row-major tokens of `P²` pixels.
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, grid: usize, patch: usize) -> Result<Tensor<T>> {
    let side = grid * patch;
    if pixels.shape() != [side, side] {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: pixels.shape().to_vec(),
            reason: format!("expected [{side}, {side}] for grid {grid}, patch {patch}"),
        });
    }
    let src = pixels.data();
    let mut out = Vec::with_capacity(side * side);
    for gr in 0..grid {
        for gc in 0..grid {
            for pr in 0..patch {
                let start = (gr * patch + pr) * side + gc * patch;
                out.extend_from_slice(&src[start..start + patch]);
            }
        }
    }
    Tensor::new(&[grid * grid, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, grid: usize, patch: usize) -> Result<Tensor<T>> {
    if tokens.shape() != [grid * grid, patch * patch] {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: tokens.shape().to_vec(),
            reason: format!("expected [{}, {}]", grid * grid, patch * patch),
        });
    }
    let side = grid * patch;
    let src = tokens.data();
    let mut out = vec![T::zero(); side * side];
    for (k, tok) in src.chunks(patch * patch).enumerate() {
        let (gr, gc) = (k / grid, k % grid);
        for pr in 0..patch {
            let start = (gr * patch + pr) * side + gc * patch;
            out[start..start + patch].copy_from_slice(&tok[pr * patch..(pr + 1) * patch]);
        }
    }
    Tensor::new(&[side, side], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: usize,
    pub patch: usize,
    pub n_classes: usize,
    pub images: Vec<TokenImage>,
}

impl Dataset {
    /// Renders all images of `config` (in parallel; order is by index).
    pub fn generate(config: &DataConfig) -> Result<Dataset> {
        config.validate()?;
        let images = (0..config.n_images)
            .into_par_iter()
            .map(|i| render_image(config, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            grid: config.grid,
            patch: config.patch,
            n_classes: config.n_classes,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// The first `n` images (all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            images: self.images.iter().take(n).cloned().collect(),
            ..*self
        }
    }

    /// Stacks the tokens of the selected images into `[B, N, P²]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = self.n_tokens() * self.token_dim();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("image index {i} out of range 0..{}", self.len()))
            })?;
            data.extend_from_slice(img.tokens.data());
            labels.push(img.label);
        }
        let tokens = Tensor::new(&[indices.len(), self.n_tokens(), self.token_dim()], data)?;
        Ok((tokens, labels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let side = self.grid * self.patch;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 + 4 * side * side));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.grid as u32,
            self.patch as u32,
            self.n_classes as u32,
            self.images.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for img in &self.images {
            out.extend_from_slice(&(img.label as u32).to_le_bytes());
            for v in img.pixels.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}, expected \"SRPD\""),
            });
        }
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let grid = r.u32("grid")? as usize;
        let patch = r.u32("patch")? as usize;
        let n_classes = r.u32("n_classes")? as usize;
        let n_images = r.u32("n_images")? as usize;
        let config = DataConfig {
            grid,
            patch,
            n_classes,
            n_images,
            seed: 0,
        };
        config.validate().map_err(|e| Error::Format {
            offset: 8,
            reason: e.to_string(),
        })?;
        let side = config.side();
        let expected = HEADER_LEN + n_images * (4 + 4 * side * side);
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected),
                reason: format!("file is {} bytes, header implies {expected}", bytes.len()),
            });
        }
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let at = r.pos;
            let label = r.u32("label")? as usize;
            if label >= n_classes {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("label {label} not below n_classes {n_classes}"),
                });
            }
            let raw = r.take(4 * side * side, "pixels")?;
            let px = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            images.push(TokenImage::from_pixels(Tensor::new(&[side, side], px)?, grid, patch, label)?);
        }
        Ok(Dataset {
            grid,
            patch,
            n_classes,
            images,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

//! Frozen, lossless patch codec mapping images to latent token sequences.
//!
//! Each p×p×3 patch is flattened in (row, column, channel) order and
//! multiplied by a seeded orthonormal d×d matrix, d = 3p². Decoding applies
//! the transpose, so the roundtrip is exact up to float rounding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct PatchCodec {
    height: usize,
    width: usize,
    patch: usize,
    dim: usize,
    /// Row-major d×d orthonormal projection.
    proj: Vec<f32>,
}

impl PatchCodec {
    pub fn new(height: usize, width: usize, patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::dim(
                "codec",
                format!("{height}x{width} is not divisible into {patch}x{patch} patches"),
            ));
        }
        let dim = 3 * patch * patch;
        Ok(Self {
            height,
            width,
            patch,
            dim,
            proj: orthonormal(dim, seed),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn projection(&self) -> &[f32] {
        &self.proj
    }

    /// `L × d` tokens, patches in row-major order.
    pub fn encode(&self, img: &Image) -> Result<Tensor> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::dim(
                "encode",
                format!(
                    "image {}x{} vs codec {}x{}",
                    img.height(),
                    img.width(),
                    self.height,
                    self.width
                ),
            ));
        }
        let (p, d) = (self.patch, self.dim);
        let (gh, gw) = self.grid();
        let mut out = vec![0.0f32; gh * gw * d];
        let mut flat = vec![0.0f32; d];
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = img.pixel(py * p + dy, px * p + dx);
                        flat[(dy * p + dx) * 3..(dy * p + dx) * 3 + 3].copy_from_slice(&rgb);
                    }
                }
                let tok = &mut out[(py * gw + px) * d..(py * gw + px + 1) * d];
                for (i, &v) in flat.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let row = &self.proj[i * d..(i + 1) * d];
                    for (t, &q) in tok.iter_mut().zip(row) {
                        *t += v * q;
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, d], out)
    }

    /// Inverse of [`encode`](Self::encode) without clamping.
    pub fn decode_raw(&self, tokens: &Tensor) -> Result<Image> {
        let (gh, gw) = self.grid();
        if tokens.shape() != [gh * gw, self.dim] {
            return Err(Error::dim(
                "decode",
                format!(
                    "tokens {:?} vs codec [{}, {}]",
                    tokens.shape(),
                    gh * gw,
                    self.dim
                ),
            ));
        }
        let (p, d) = (self.patch, self.dim);
        let mut img = Image::filled(self.height, self.width, [0.0; 3]);
        let td = tokens.data();
        for py in 0..gh {
            for px in 0..gw {
                let tok = &td[(py * gw + px) * d..(py * gw + px + 1) * d];
                for dy in 0..p {
                    for dx in 0..p {
                        let mut rgb = [0.0f32; 3];
                        for (c, v) in rgb.iter_mut().enumerate() {
                            let i = (dy * p + dx) * 3 + c;
                            let row = &self.proj[i * d..(i + 1) * d];
                            *v = row.iter().zip(tok).map(|(q, t)| q * t).sum();
                        }
                        img.set_pixel(py * p + dy, px * p + dx, rgb);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Decoded image clamped to [0, 1].
    pub fn decode(&self, tokens: &Tensor) -> Result<Image> {
        Ok(self.decode_raw(tokens)?.clamped())
    }
}

/// Seeded Haar-like orthonormal matrix: Gram-Schmidt on Gaussian rows in f64.
fn orthonormal(d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two passes keep the basis orthogonal to working precision.
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows.into_iter().flatten().map(|v| v as f32).collect()
}

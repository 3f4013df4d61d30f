//! Deterministic stand-in for a frozen pretrained backbone.
//!
//! Each patch is summarised by its raw RGB values plus per-channel mean and
//! variance, projected to `E` dimensions by a fixed seeded Gaussian matrix
//! and L2-normalised.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seed::{self, Stream};

#[derive(Debug, Clone)]
pub struct PseudoBackbone {
    patch_size: usize,
    embed_dim: usize,
    /// `stats_dim x E`.
    projection: Array2<f64>,
}

impl PseudoBackbone {
    pub fn new(patch_size: usize, embed_dim: usize, projection_seed: u64) -> Result<Self> {
        if patch_size == 0 || embed_dim == 0 {
            return Err(Error::invalid("patch size and embedding dimension must be positive"));
        }
        let stats_dim = 3 * patch_size * patch_size + 6;
        let normal = Normal::new(0.0, 1.0 / (stats_dim as f64).sqrt()).expect("positive std");
        let mut rng = seed::rng(seed::derive(projection_seed, Stream::Projection, 0));
        let projection =
            Array2::from_shape_simple_fn((stats_dim, embed_dim), || normal.sample(&mut rng));
        Ok(Self {
            patch_size,
            embed_dim,
            projection,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn patch_stats(&self, img: &Image, row: usize, col: usize) -> Array1<f64> {
        let p = self.patch_size;
        let mut stats = Array1::zeros(3 * p * p + 6);
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut k = 0;
        for y in row * p..(row + 1) * p {
            for x in col * p..(col + 1) * p {
                let px = img.pixel(x, y);
                for c in 0..3 {
                    let v = px[c] as f64;
                    stats[k] = v;
                    sum[c] += v;
                    sq[c] += v * v;
                    k += 1;
                }
            }
        }
        let n = (p * p) as f64;
        for c in 0..3 {
            let mean = sum[c] / n;
            stats[k + c] = mean;
            stats[k + 3 + c] = (sq[c] / n - mean * mean).max(0.0);
        }
        stats
    }

    pub fn extract(&self, img: &Image) -> Result<FeatureMap> {
        let p = self.patch_size;
        if img.height() % p != 0 || img.width() % p != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible by patch size {p}",
                img.height(),
                img.width()
            )));
        }
        let (gh, gw) = (img.height() / p, img.width() / p);
        let mut data = Vec::with_capacity(gh * gw * self.embed_dim);
        for r in 0..gh {
            for c in 0..gw {
                let f = self.patch_stats(img, r, c).dot(&self.projection);
                let norm = f.dot(&f).sqrt().max(1e-12);
                data.extend(f.iter().map(|v| (v / norm) as f32));
            }
        }
        FeatureMap::new(gh, gw, self.embed_dim, p, data)
    }
}

/// One-shot convenience over [`PseudoBackbone`].
pub fn pseudo_backbone(img: &Image, patch_size: usize, embed_dim: usize, projection_seed: u64) -> Result<FeatureMap> {
    PseudoBackbone::new(patch_size, embed_dim, projection_seed)?.extract(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{make_synthetic_scene, SceneSpec};

    #[test]
    fn identical_patches_identical_features_and_unit_norm() {
        let mut img = Image::black(14, 28);
        for y in 0..14 {
            for x in 0..14 {
                let v = ((x * 7 + y * 3) % 11) as f32 / 11.0;
                img.set_pixel(x, y, [v, 1.0 - v, 0.5]);
                img.set_pixel(x + 14, y, [v, 1.0 - v, 0.5]);
            }
        }
        let f = pseudo_backbone(&img, 14, 32, 1).unwrap();
        assert_eq!(f.descriptor(0), f.descriptor(1));
        let n: f32 = f.descriptor(0).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_rejects_bad_sizes() {
        let s = make_synthetic_scene(&SceneSpec { seed: 1, height: 28, width: 42, patch_size: 14 }).unwrap();
        let a = pseudo_backbone(&s.image, 14, 16, 4).unwrap();
        let b = pseudo_backbone(&s.image, 14, 16, 4).unwrap();
        assert_eq!(a, b);
        assert!(pseudo_backbone(&s.image, 8, 16, 4).is_err());
    }
}

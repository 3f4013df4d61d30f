//! Patch descriptor grids and the transforms that produce them.

mod backbone;
mod block;
mod upsample;

pub use backbone::{pseudo_backbone, PseudoBackbone};
pub use block::{
    adaptation_forward, AdaptationParams, BlockConfig, ForwardCache, ParamGrads,
    PARAM_NAMES,
};
pub use upsample::upsample_features;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// A `grid_h x grid_w` grid of `embed_dim`-dimensional descriptors, one per
/// `patch_size x patch_size` image patch. Stored row-major by patch with the
/// descriptor innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    embed_dim: usize,
    patch_size: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        embed_dim: usize,
        patch_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || embed_dim == 0 || patch_size == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive (grid {grid_h}x{grid_w}, E {embed_dim}, P {patch_size})"
            )));
        }
        let expected = grid_h * grid_w * embed_dim;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "feature buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(Self {
            grid_h,
            grid_w,
            embed_dim,
            patch_size,
            data,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Number of descriptors, `grid_h * grid_w`.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, index: usize) -> &[f32] {
        &self.data[index * self.embed_dim..(index + 1) * self.embed_dim]
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    /// `(row, col)` of a patch index.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.grid_w, index % self.grid_w)
    }

    /// Representative pixel of a patch: `col * P + P / 2`, `row * P + P / 2`.
    pub fn patch_center(&self, index: usize) -> Pixel {
        let (r, c) = self.cell(index);
        let half = (self.patch_size / 2) as f64;
        Pixel::new(
            (c * self.patch_size) as f64 + half,
            (r * self.patch_size) as f64 + half,
        )
    }

    /// Patch index containing pixel coordinate `p`, if inside the grid.
    pub fn patch_of(&self, p: Pixel) -> Option<usize> {
        let x = (p.u + 0.5).floor();
        let y = (p.v + 0.5).floor();
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let c = x as usize / self.patch_size;
        let r = y as usize / self.patch_size;
        (r < self.grid_h && c < self.grid_w).then(|| self.index(r, c))
    }

    /// Descriptors as an `N x E` f64 matrix.
    pub fn to_tokens(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.embed_dim), |(i, j)| {
            self.data[i * self.embed_dim + j] as f64
        })
    }

    /// Grid with the same geometry as `self` holding `tokens` (N x E).
    pub fn with_tokens(&self, tokens: &Array2<f64>) -> Result<Self> {
        if tokens.nrows() != self.len() {
            return Err(Error::invalid(format!(
                "token count {} does not match grid of {}",
                tokens.nrows(),
                self.len()
            )));
        }
        Self::new(
            self.grid_h,
            self.grid_w,
            tokens.ncols(),
            self.patch_size,
            tokens.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Returns a copy with every descriptor multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_helpers() {
        let f = FeatureMap::new(2, 3, 1, 14, vec![0.0; 6]).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(f.patch_center(4), Pixel::new(21.0, 21.0));
        assert_eq!(f.patch_of(Pixel::new(27.4, 13.6)), Some(4));
        assert_eq!(f.patch_of(Pixel::new(42.0, 0.0)), None);
        assert_eq!(f.patch_of(Pixel::new(-0.6, 0.0)), None);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(FeatureMap::new(2, 2, 3, 14, vec![0.0; 11]).is_err());
        assert!(FeatureMap::new(2, 2, 1, 14, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
    }
}

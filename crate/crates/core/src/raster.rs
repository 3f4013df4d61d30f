//! Dense RGB images and depth maps.

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        if let Some(bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::invalid(format!("image value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64
    }

    /// Grayscale copy of the `size x size` window with top-left corner `(x0, y0)`.
    /// Returns `None` if the window leaves the image.
    pub fn luma_patch(&self, x0: usize, y0: usize, size: usize) -> Option<Vec<f64>> {
        if x0 + size > self.width || y0 + size > self.height {
            return None;
        }
        let mut out = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                out.push(self.luma(x, y));
            }
        }
        Some(out)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Per-pixel depth in scene units. Invalid pixels hold `NaN`.
#[derive(Debug, Clone)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PartialEq for DepthMap {
    /// Invalid entries compare equal to each other.
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

impl DepthMap {
    /// Builds a depth map; non-finite entries are treated as invalid.
    /// Finite entries must be strictly positive.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("depth dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "depth buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        for d in data.iter_mut() {
            if !d.is_finite() {
                *d = f64::NAN;
            } else if *d <= 0.0 {
                return Err(Error::invalid(format!("depth {d} is not positive")));
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Raw values, `NaN` where invalid.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.data[y * self.width + x];
        (!d.is_nan()).then_some(d)
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| !d.is_nan()).count()
    }

    pub(crate) fn map_valid(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&d| if d.is_nan() { d } else { f(d) })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 1.0, 0.5]).is_ok());
    }

    #[test]
    fn depth_marks_nan_invalid_and_rejects_negative() {
        let d = DepthMap::new(1, 3, vec![1.0, f64::NAN, f64::INFINITY]).unwrap();
        assert_eq!(d.valid_count(), 1);
        assert!(!d.is_valid(2, 0));
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
    }

    #[test]
    fn luma_patch_bounds() {
        let img = Image::constant(4, 4, [1.0, 1.0, 1.0]);
        let p = img.luma_patch(2, 2, 2).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(img.luma_patch(3, 0, 2).is_none());
    }
}

use std::path::Path;

use pti_tensor::Tensor;

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored `H × W × 3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    resolution: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(resolution: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != resolution * resolution * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {resolution}x{resolution}x3 image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("image contains non-finite values".into()));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn filled(resolution: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..resolution * resolution).flat_map(|_| rgb).collect();
        Self { resolution, pixels }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.resolution + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.resolution + x) * 3 + c] = v;
    }

    /// Horizontal mirror image.
    pub fn mirrored(&self) -> Self {
        let r = self.resolution;
        let mut out = self.clone();
        for y in 0..r {
            for x in 0..r {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, r - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    /// As a `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let r = self.resolution;
        let mut data = vec![0.0; 3 * r * r];
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * r * r + p] = rgb[c];
            }
        }
        Tensor::new(&[1, 3, r, r], data)
    }

    /// Stacks images into one `[N, 3, H, W]` batch.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        let ts: Vec<Tensor> = images.iter().map(|im| im.to_tensor()).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        Tensor::stack(&refs)
    }

    /// From sample `n` of a `[N, 3, H, W]` tensor; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || n >= s[0] {
            return Err(Error::ShapeMismatch(format!("{s:?} is not an RGB batch")));
        }
        let r = s[2];
        let plane = r * r;
        let base = n * 3 * plane;
        let mut pixels = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                pixels[p * 3 + c] = t.data()[base + c * plane + p].clamp(0.0, 1.0);
            }
        }
        Self::new(r, pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let r = self.resolution as u32;
        let raw = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(r, r, raw).expect("buffer size matches")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image is not square",
                img.width(),
                img.height()
            )));
        }
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(img.width() as usize, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let px: Vec<f32> = (0..4 * 4 * 3).map(|i| i as f32 / 48.0).collect();
        let im = ImageTensor::new(4, px).unwrap();
        let back = ImageTensor::from_tensor(&im.to_tensor(), 0).unwrap();
        assert_eq!(im, back);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(ImageTensor::new(4, vec![0.0; 10]).is_err());
    }
}

//! RGB frames and single-channel masks with PNG I/O and resampling.
//!
//! Both types store planar `f32` data in `[0, 1]` unless noted otherwise.

use std::path::Path;

use harmonizer_nn::Tensor;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// An `H x W x 3` image stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// An `H x W` single-channel map. Binary for ground-truth masks, continuous
/// for predicted disharmony maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear sample with half-pixel centres and clamp-to-edge addressing.
fn sample_clamped(plane: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize| plane[yy * width + xx] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut f = Self::new(width, height);
        for (c, v) in rgb.iter().enumerate() {
            f.plane_mut(c).fill(*v);
        }
        f
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "frame data has {} values, expected 3x{width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut frame = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                frame.set(x, y, f(x, y));
            }
        }
        frame
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.pixels();
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let n = self.pixels();
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    /// Bilinear sample at a continuous pixel position, clamping to the edge.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        [0, 1, 2].map(|c| sample_clamped(self.plane(c), self.width, self.height, x, y))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_dims(&self, other: &Frame, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::new(width, height);
        for c in 0..3 {
            let src = self.plane(c);
            let dst = &mut out.data[c * width * height..(c + 1) * width * height];
            for y in 0..height {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let fx = (x as f64 + 0.5) * sx - 0.5;
                    dst[y * width + x] = sample_clamped(src, self.width, self.height, fx, fy);
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut f = Self::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            f.set(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
        }
        f
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(self.get(x as usize, y as usize).map(quantize))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `[1, 3, H, W]` tensor with values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_signed_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 3, self.height, self.width],
            self.data.iter().map(|v| v * 2.0 - 1.0).collect(),
        )
    }

    /// Inverse of [`Frame::to_signed_tensor`] for a single-item batch.
    pub fn from_signed_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 {
            return Err(Error::Dimension(format!(
                "expected [1, 3, H, W], got {:?}",
                t.shape()
            )));
        }
        Self::from_planar(w, h, t.data().iter().map(|v| (v + 1.0) * 0.5).collect())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn intersect(&self, other: &Mask) -> Self {
        assert_eq!(self.dims(), other.dims());
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn threshold(&self, t: f32) -> Self {
        self.map(|v| if v >= t { 1.0 } else { 0.0 })
    }

    /// Intersection over union of the two masks thresholded at `t`.
    pub fn iou(&self, other: &Mask, t: f32) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a >= t, b >= t);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            sample_clamped(&self.data, self.width, self.height, fx, fy)
        })
    }

    /// Loads an 8-bit mask, scaling to `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self {
            width: w,
            height: h,
            data: img
                .into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect(),
        })
    }

    pub fn to_luma8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([quantize(self.get(x as usize, y as usize))])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `[1, 1, H, W]` tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::Dimension(format!(
                "expected [1, 1, H, W], got {:?}",
                t.shape()
            )));
        }
        Self::from_vec(w, h, t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_identity() {
        let f = Frame::from_fn(7, 5, |x, y| [x as f32 / 7.0, y as f32 / 5.0, 0.3]);
        assert_eq!(f.resize_bilinear(7, 5), f);
    }

    #[test]
    fn nearest_resize_keeps_mask_binary() {
        let m = Mask::from_fn(
            16,
            16,
            |x, y| if (x / 3 + y / 5) % 2 == 0 { 1.0 } else { 0.0 },
        );
        for (w, h) in [(8, 8), (5, 11), (32, 20)] {
            assert!(m.resize_nearest(w, h).is_binary());
        }
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let f =
            Frame::from_fn(9, 4, |x, y| [x as f32 / 9.0, (x * y) as f32 / 36.0, 0.5]).quantized();
        let p = dir.path().join("f.png");
        f.save_png(&p).unwrap();
        assert_eq!(Frame::load_png(&p).unwrap(), f);
    }

    #[test]
    fn signed_tensor_roundtrip() {
        let f = Frame::from_fn(4, 4, |x, _| [0.0, 0.5, x as f32 / 4.0]);
        let back = Frame::from_signed_tensor(&f.to_signed_tensor()).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

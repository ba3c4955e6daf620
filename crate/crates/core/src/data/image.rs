//! RGB raster with `f32` channels in `[0, 1]`, plus resampling and I/O.

use std::path::Path;

use crate::network::Tensor;
use crate::{Error, Result};

/// Row-major `height × width × 3` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                context: "image".into(),
                expected: vec![height, width, 3],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous index coordinates (pixel `i` is centred
    /// at `i`), clamping to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        out
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut s = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for k in 0..3 {
                s[k] += px[k] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [s[0] / n, s[1] / n, s[2] / n]
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// `[H, W, 3]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width, 3], self.data.clone()).expect("length matches")
    }

    /// Reads PNG or JPEG into linear `[0, 1]` channels.
    pub fn read(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, data)
    }

    /// Writes an 8-bit PNG; values are clamped and rounded.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("length matches");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|i| (i % 97) as f32 / 97.0).collect();
        Image::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn sample_hits_pixel_centres_and_interpolates() {
        let img = ramp(5, 4);
        assert_eq!(img.sample(2.0, 3.0), img.pixel(2, 3));
        let mid = img.sample(1.5, 0.0);
        let (a, b) = (img.pixel(1, 0), img.pixel(2, 0));
        for k in 0..3 {
            assert!((mid[k] - (a[k] + b[k]) / 2.0).abs() < 1e-6);
        }
        assert_eq!(img.sample(-3.0, 10.0), img.pixel(0, 3));
    }

    #[test]
    fn flip_is_involution() {
        let img = ramp(6, 3);
        assert_eq!(img.flipped().flipped(), img);
        assert_eq!(img.flipped().pixel(0, 1), img.pixel(5, 1));
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ramp(7, 5);
        img.write_png(&path).unwrap();
        assert_eq!(Image::read(&path).unwrap(), img.quantized());
    }
}

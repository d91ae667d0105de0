use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with intensities in `[0, 1]` (height x width x 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: format!("{height}x{width}x3 = {}", height * width * 3),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-index coordinates (pixel centres at
    /// integers). Coordinates outside the image are clamped to the border.
    pub fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let ly = (y - y0 as f64) as f32;
        let lx = (x - x0 as f64) as f32;
        if ly == 0.0 && lx == 0.0 {
            return self.pixel(y0, x0);
        }
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = lerp(self.get(y0, x0, c), self.get(y0, x1, c), lx);
            let bottom = lerp(self.get(y1, x0, c), self.get(y1, x1, c), lx);
            *o = lerp(top, bottom, ly);
        }
        out
    }

    /// Resamples the region `[x0, x1) x [y0, y1)` (continuous coordinates) to
    /// an `out_h x out_w` image by bilinear interpolation at output pixel centres.
    pub fn resample_region(
        &self,
        (x0, y0, x1, y1): (f64, f64, f64, f64),
        out_h: usize,
        out_w: usize,
    ) -> Image {
        let sx = (x1 - x0) / out_w as f64;
        let sy = (y1 - y0) / out_h as f64;
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for oy in 0..out_h {
            let y = y0 + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = x0 + (ox as f64 + 0.5) * sx - 0.5;
                data.extend_from_slice(&self.sample(y, x));
            }
        }
        Image {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resample_region(
            (0.0, 0.0, self.width as f64, self.height as f64),
            out_h,
            out_w,
        )
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Rounds every intensity to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Channel-major (3 x H x W) copy in f64, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64;
            }
        }
        out
    }
}

// a + (b - a) t reproduces `a` exactly when a == b.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

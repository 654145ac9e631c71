//! Float image buffers and PNG I/O. Color lives in [0, 1] per channel, depth
//! in meters with 0 marking invalid pixels.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::{Error, Result};

/// Depth PNGs store meters scaled by this factor in 16-bit grayscale.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;

/// Row-major RGB image, `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ImageRgb {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.data[y * self.width + x]
    }

    /// BT.601 luminance per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Mean central-difference gradient magnitude of the luminance channel.
    /// Border pixels use one-sided differences.
    pub fn mean_gradient_magnitude(&self) -> f64 {
        if self.width < 2 || self.height < 2 {
            return 0.0;
        }
        let lum = self.luminance();
        let at = |x: usize, y: usize| lum[y * self.width + x];
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let (x0, x1, sx) = if x == 0 {
                    (0, 1, 1.0)
                } else if x == self.width - 1 {
                    (self.width - 2, self.width - 1, 1.0)
                } else {
                    (x - 1, x + 1, 0.5)
                };
                let (y0, y1, sy) = if y == 0 {
                    (0, 1, 1.0)
                } else if y == self.height - 1 {
                    (self.height - 2, self.height - 1, 1.0)
                } else {
                    (y - 1, y + 1, 0.5)
                };
                let gx = (at(x1, y) - at(x0, y)) * sx;
                let gy = (at(x, y1) - at(x, y0)) * sy;
                total += (gx * gx + gy * gy).sqrt();
            }
        }
        total / (self.width * self.height) as f64
    }

    /// Halves resolution by averaging 2x2 blocks; odd trailing rows/columns
    /// are folded into the last block by edge replication.
    pub fn downsample(&self) -> ImageRgb {
        let w = self.width / 2;
        let h = self.height / 2;
        ImageRgb::from_fn(w.max(1), h.max(1), |x, y| {
            let x0 = (2 * x).min(self.width - 1);
            let x1 = (2 * x + 1).min(self.width - 1);
            let y0 = (2 * y).min(self.height - 1);
            let y1 = (2 * y + 1).min(self.height - 1);
            let mut out = [0.0; 3];
            for (xi, yi) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                let p = self.pixel(xi, yi);
                for c in 0..3 {
                    out[c] += p[c] * 0.25;
                }
            }
            out
        })
    }
}

/// Row-major depth image in meters; 0 marks missing measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDepth {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageDepth {
    pub fn new(width: usize, height: usize) -> Self {
        ImageDepth {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ImageDepth {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }

    /// Fraction of pixels carrying a valid (> 0) measurement.
    pub fn valid_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let valid = self.data.iter().filter(|d| **d > 0.0).count();
        valid as f64 / self.data.len() as f64
    }

    /// Halves resolution averaging only valid samples per 2x2 block; a block
    /// with no valid sample stays invalid (0).
    pub fn downsample(&self) -> ImageDepth {
        let w = self.width / 2;
        let h = self.height / 2;
        ImageDepth::from_fn(w.max(1), h.max(1), |x, y| {
            let x0 = (2 * x).min(self.width - 1);
            let x1 = (2 * x + 1).min(self.width - 1);
            let y0 = (2 * y).min(self.height - 1);
            let y1 = (2 * y + 1).min(self.height - 1);
            let mut sum = 0.0;
            let mut count = 0;
            for (xi, yi) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                let d = self.at(xi, yi);
                if d > 0.0 {
                    sum += d;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
    }
}

pub fn load_png_rgb(path: &Path) -> Result<ImageRgb> {
    let dynamic = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = ImageRgb::new(w, h);
    for (x, y, p) in rgb.enumerate_pixels() {
        *out.pixel_mut(x as usize, y as usize) = [
            p[0] as f64 / 255.0,
            p[1] as f64 / 255.0,
            p[2] as f64 / 255.0,
        ];
    }
    Ok(out)
}

pub fn save_png_rgb(path: &Path, img: &ImageRgb) -> Result<()> {
    let buf = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let p = img.pixel(x as usize, y as usize);
        Rgb([quantize_u8(p[0]), quantize_u8(p[1]), quantize_u8(p[2])])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_png_depth(path: &Path, scale: f64) -> Result<ImageDepth> {
    let dynamic = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let gray: ImageBuffer<Luma<u16>, Vec<u16>> = match dynamic {
        DynamicImage::ImageLuma16(buf) => buf,
        other => other.to_luma16(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = ImageDepth::new(w, h);
    for (x, y, p) in gray.enumerate_pixels() {
        *out.at_mut(x as usize, y as usize) = p[0] as f64 / scale;
    }
    Ok(out)
}

pub fn save_png_depth(path: &Path, img: &ImageDepth, scale: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let d = img.at(x as usize, y as usize) * scale;
            Luma([d.round().clamp(0.0, u16::MAX as f64) as u16])
        });
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

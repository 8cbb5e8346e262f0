//! RGB frame type used as model input and by the image pipeline.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// One RGB frame. Pixels are stored as `f64` in `[0, 1]`, shape `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array3<f64>,
}

impl Frame {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::invalid(format!(
                "frame must have 3 channels, got {}",
                pixels.shape()[2]
            )));
        }
        Ok(Self { pixels })
    }

    /// All-zero (black) frame.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    /// Rec. 601 luminance on the 0..255 scale, shape `(H, W)`.
    pub fn luminance(&self) -> ndarray::Array2<f64> {
        let (h, w) = (self.height(), self.width());
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            255.0
                * (0.299 * self.pixels[[y, x, 0]]
                    + 0.587 * self.pixels[[y, x, 1]]
                    + 0.114 * self.pixels[[y, x, 2]])
        })
    }

    pub fn from_rgb8(data: &[u8], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "expected {} bytes for {}x{} RGB, got {}",
                height * width * 3,
                height,
                width,
                data.len()
            )));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            data[(y * width + x) * 3 + c] as f64 / 255.0
        });
        Ok(Self { pixels })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push((self.pixels[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(img.as_raw(), h as usize, w as usize)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.to_rgb8(),
        )
        .expect("buffer length matches dimensions");
        img.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

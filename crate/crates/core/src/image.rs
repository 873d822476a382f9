use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHANNELS: usize = 3;

/// `H x W x 3` raster with values in `[0, 1]`, stored pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Dimension(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_channels(channels: &[Matrix<f64>; CHANNELS]) -> Result<Self> {
        let (h, w) = channels[0].shape();
        if channels.iter().any(|c| c.shape() != (h, w)) {
            return Err(Error::Dimension("channel shapes differ".into()));
        }
        let mut pixels = Vec::with_capacity(h * w * CHANNELS);
        for r in 0..h {
            for c in 0..w {
                for ch in channels {
                    pixels.push(ch.get(r, c));
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.width + c) * CHANNELS + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.pixels[(r * self.width + c) * CHANNELS + ch] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn channel(&self, ch: usize) -> Matrix<f64> {
        Matrix::from_fn(self.height, self.width, |r, c| self.get(r, c, ch))
    }

    pub fn channels(&self) -> [Matrix<f64>; CHANNELS] {
        [self.channel(0), self.channel(1), self.channel(2)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Largest absolute pixel difference. Shapes must match.
    pub fn max_abs(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "shape mismatch");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

//! In-memory image planes, f64 in [0, 1], pixel-interleaved.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Luminance plane (mean over channels for non-RGB layouts).
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n];
        match self.channels {
            1 => out.copy_from_slice(&self.data),
            3 => {
                for i in 0..n {
                    let p = &self.data[i * 3..i * 3 + 3];
                    out[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
                }
            }
            c => {
                for i in 0..n {
                    let p = &self.data[i * c..(i + 1) * c];
                    out[i] = p.iter().sum::<f64>() / c as f64;
                }
            }
        }
        out
    }
}

/// Bilinear sample of a single-channel plane at a sub-pixel location,
/// clamped at the border. Sample points sit on integer pixel coordinates.
pub fn sample_bilinear(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v00 = plane[y0 * width + x0];
    let v10 = plane[y0 * width + x1];
    let v01 = plane[y1 * width + x0];
    let v11 = plane[y1 * width + x1];
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint() {
        let plane = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(sample_bilinear(&plane, 2, 2, 0.5, 0.5), 1.5);
        assert_eq!(sample_bilinear(&plane, 2, 2, 0.0, 0.0), 0.0);
        // clamped outside
        assert_eq!(sample_bilinear(&plane, 2, 2, -1.0, 5.0), 2.0);
    }
}

//! In-memory rasters shared by every stage of the pipeline.
//!
//! All rasters are row-major. Images carry three interleaved channels with
//! intensities in `[0, 1]`; masks carry one byte per pixel in `{0, 1}`;
//! probability maps carry one `f32` per pixel in `[0, 1]`.

use crate::error::{Error, Result};

/// H×W×3 intensity image, channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::shape(
                format!("{height}x{width}x3 = {} values", height * width * 3),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    /// Replicates a single grey channel into all three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), gray.len()));
        }
        let data = gray.iter().flat_map(|&v| [v, v, v]).collect();
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * Self::CHANNELS + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * Self::CHANNELS + channel] = value;
    }

    /// Channel-planar copy (3×H×W), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * Self::CHANNELS];
        for (i, px) in self.data.chunks_exact(Self::CHANNELS).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }
}

/// H×W binary mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), data.len()));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask values must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &MaskTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// 0/255 grey raster for writing to disk.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// H×W per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A map that is 1 on the mask's foreground and 0 elsewhere.
    pub fn from_mask(mask: &MaskTensor) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            data: mask.data.iter().map(|&v| v as f32).collect(),
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

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ProbMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = vec![0.0; height * width];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for r in 0..height {
            let (y0, y1, fy) = bilinear_axis((r as f64 + 0.5) * sy - 0.5, self.height);
            for c in 0..width {
                let (x0, x1, fx) = bilinear_axis((c as f64 + 0.5) * sx - 0.5, self.width);
                let top = self.get(y0, x0) as f64 * (1.0 - fx) + self.get(y0, x1) as f64 * fx;
                let bottom = self.get(y1, x0) as f64 * (1.0 - fx) + self.get(y1, x1) as f64 * fx;
                data[r * width + c] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
        ProbMap {
            height,
            width,
            data,
        }
    }
}

/// Neighbouring sample indices and blend weight for a clamped source coordinate.
#[inline]
pub(crate) fn bilinear_axis(src: f64, len: usize) -> (usize, usize, f64) {
    let src = src.clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

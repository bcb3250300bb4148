//! Shared tensor-like domain types.
//!
//! Axis order is fixed as (time, height, width, channel) everywhere. All
//! types are immutable after construction and safe to share across workers.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A pixel video: shape `(T, H, W, C)`, values expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f64>,
}

impl VideoTensor {
    /// Wraps pixel data, rejecting non-finite values and values outside
    /// `[0, 1]`.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (t, h, w, _c) = data.dim();
        if t < 1 {
            return Err(Error::ShapeMismatch {
                axis: "time",
                expected: 1,
                actual: t,
            });
        }
        if h < 8 || w < 8 {
            return Err(Error::FrameTooSmall { h, w, min: 8 });
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "video tensor",
                });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParam {
                    name: "video",
                    message: format!("pixel value {v} outside [0, 1]"),
                });
            }
        }
        Ok(VideoTensor { data })
    }

    /// Wraps arbitrary finite data, clamping into `[0, 1]`.
    pub fn from_unclamped(mut data: Array4<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "video tensor",
                });
            }
            *v = v.clamp(0.0, 1.0);
        }
        VideoTensor::new(data)
    }

    pub fn t_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    /// Selects frames by index (indices may repeat).
    pub fn select_frames(&self, indices: &[usize]) -> VideoTensor {
        VideoTensor {
            data: self.data.select(Axis(0), indices),
        }
    }

    /// 8-bit quantization of every pixel: `round(v * 255) / 255`.
    pub fn quantize8(&self) -> VideoTensor {
        VideoTensor {
            data: self.data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
        }
    }
}

/// A binary mask video: shape `(T, H, W)`, values exactly 0 or 1.
/// 1 marks the region to outpaint.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVideo {
    data: Array3<f64>,
}

impl MaskVideo {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        for &v in &data {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryMask { value: v });
            }
        }
        Ok(MaskVideo { data })
    }

    pub fn t_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn frame(&self, t: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    /// Number of masked pixels.
    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }
}

/// A latent video: shape `(T, h, w, c)`, finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    data: Array4<f64>,
}

impl LatentVideo {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "latent video",
                });
            }
        }
        Ok(LatentVideo { data })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> LatentVideo {
        LatentVideo {
            data: Array4::zeros(shape),
        }
    }

    pub fn t_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn shape4(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn select_frames(&self, indices: &[usize]) -> LatentVideo {
        LatentVideo {
            data: self.data.select(Axis(0), indices),
        }
    }
}

/// A mask at latent resolution: shape `(T, h, w)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    data: Array3<f64>,
}

impl LatentMask {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParam {
                    name: "latent mask",
                    message: format!("value {v} outside [0, 1]"),
                });
            }
        }
        Ok(LatentMask { data })
    }

    pub fn t_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn select_frames(&self, indices: &[usize]) -> LatentMask {
        LatentMask {
            data: self.data.select(Axis(0), indices),
        }
    }
}

/// Checks that a video and mask agree on every shared axis and that the mask
/// is binary (guaranteed by construction of [`MaskVideo`]).
///
/// Pure predicate: no input is mutated.
pub fn validate_pair(video: &VideoTensor, mask: &MaskVideo) -> Result<()> {
    if video.t_frames() != mask.t_frames() {
        return Err(Error::ShapeMismatch {
            axis: "time",
            expected: video.t_frames(),
            actual: mask.t_frames(),
        });
    }
    if video.height() != mask.height() {
        return Err(Error::ShapeMismatch {
            axis: "height",
            expected: video.height(),
            actual: mask.height(),
        });
    }
    if video.width() != mask.width() {
        return Err(Error::ShapeMismatch {
            axis: "width",
            expected: video.width(),
            actual: mask.width(),
        });
    }
    Ok(())
}

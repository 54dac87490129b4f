//! Multi-scale 2-D Morlet wavelet features.
//!
//! For every scale the image is correlated with the wavelet at each angle of
//! the sweep and the per-pixel maximum modulus is kept. The feature vector of
//! a pixel is its preprocessed intensity followed by one max-modulus value
//! per scale, z-scored per image over the field of view.

mod kernel;
mod transform;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_dims, BinaryMask, GrayImage};

pub use kernel::{default_support, morlet_kernel, ComplexKernel, MorletParams};
pub use transform::{cwt_response, cwt_response_direct, CorrelationPlan};

/// Scales and orientations swept per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Dilations in pixels, strictly increasing.
    pub scales: Vec<f64>,
    /// Orientations in degrees, each in `[0, 180)`.
    pub angles: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 4.0, 8.0],
            angles: angle_grid(10.0),
        }
    }
}

/// `0, step, 2 step, ...` below 180 degrees.
pub fn angle_grid(step: f64) -> Vec<f64> {
    let n = (180.0 / step).ceil() as usize;
    (0..n)
        .map(|i| i as f64 * step)
        .filter(|&a| a < 180.0)
        .collect()
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("scales must be positive".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("scales must be strictly increasing".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Config("at least one angle is required".into()));
        }
        if self.angles.iter().any(|a| !(0.0..180.0).contains(a)) {
            return Err(Error::Config("angles must lie in [0, 180)".into()));
        }
        let mut sorted = self.angles.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("angles must be unique".into()));
        }
        Ok(())
    }

    /// Feature dimension: intensity plus one channel per scale.
    pub fn feature_dim(&self) -> usize {
        1 + self.scales.len()
    }
}

/// Per-pixel maximum of `|T(b, theta, a)|` over the configured angles.
pub fn max_modulus_over_angles(
    img: &GrayImage,
    scale: f64,
    cfg: &SweepConfig,
    params: &MorletParams,
) -> Result<GrayImage> {
    if cfg.angles.is_empty() {
        return Err(Error::Config("at least one angle is required".into()));
    }
    let support = default_support(scale, params);
    let plan = CorrelationPlan::new(img, support / 2);
    let kernels = cfg
        .angles
        .iter()
        .map(|&theta| morlet_kernel(scale, theta, params, Some(support)))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = img.dims();
    let best = kernels
        .par_iter()
        .map(|k| plan.correlate(k).modulus().into_vec())
        .reduce(
            || vec![0.0; w * h],
            |mut acc, m| {
                for (a, v) in acc.iter_mut().zip(m) {
                    *a = a.max(v);
                }
                acc
            },
        );
    GrayImage::from_vec(w, h, best)
}

/// Pixel-major feature vectors over a `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    dim: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl FeatureStack {
    pub fn from_channels(channels: &[GrayImage]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Config("feature stack needs at least one channel".into()))?;
        let (w, h) = first.dims();
        for c in channels {
            ensure_dims((w, h), c.dims())?;
        }
        let dim = channels.len();
        let mut values = vec![0.0; w * h * dim];
        for (c, img) in channels.iter().enumerate() {
            for (i, &v) in img.as_slice().iter().enumerate() {
                values[i * dim + c] = v;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            dim,
            values,
            normalized: false,
        })
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

    /// Number of channels `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether the stack has been z-scored with [`normalize_features`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Feature vector of the pixel at row-major index `idx`.
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            self.values[(y * self.width + x) * self.dim + c]
        })
    }
}

/// Channel 0 is `intensity` verbatim; channel `s` is the max-modulus
/// response at `cfg.scales[s - 1]`.
pub fn build_feature_stack(
    intensity: &GrayImage,
    cfg: &SweepConfig,
    params: &MorletParams,
) -> Result<FeatureStack> {
    cfg.validate()?;
    params.validate()?;
    let mut channels = Vec::with_capacity(cfg.feature_dim());
    channels.push(intensity.clone());
    for &scale in &cfg.scales {
        channels.push(max_modulus_over_angles(intensity, scale, cfg, params)?);
    }
    FeatureStack::from_channels(&channels)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn compute_feature_stats(stack: &FeatureStack, fov: &BinaryMask) -> Result<FeatureStats> {
    ensure_dims(stack.dims(), fov.dims())?;
    let d = stack.dim();
    let inside: Vec<usize> = (0..fov.as_slice().len())
        .filter(|&i| fov.as_slice()[i])
        .collect();
    if inside.len() < 2 {
        return Err(Error::InsufficientPixels {
            requested: 2,
            available: inside.len(),
        });
    }
    let n = inside.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &inside {
        for (m, v) in mean.iter_mut().zip(stack.pixel(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in &inside {
        for ((s, v), m) in var.iter_mut().zip(stack.pixel(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    if let Some(channel) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateChannel { channel });
    }
    Ok(FeatureStats { mean, std })
}

/// Z-score every field-of-view pixel; pixels outside are zeroed.
pub fn normalize_features(
    stack: &FeatureStack,
    stats: &FeatureStats,
    fov: &BinaryMask,
) -> Result<FeatureStack> {
    ensure_dims(stack.dims(), fov.dims())?;
    if stats.dim() != stack.dim() || stats.std.len() != stack.dim() {
        return Err(Error::dims((stack.dim(), 1), (stats.dim(), 1)));
    }
    let d = stack.dim();
    let mut out = stack.clone();
    for (px, &inside) in out.values.chunks_exact_mut(d).zip(fov.as_slice()) {
        if inside {
            for ((v, m), s) in px.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        } else {
            px.fill(0.0);
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Write a response image as 8-bit PNG, linearly rescaled so its maximum
/// maps to 255.
pub fn save_response_png(path: impl AsRef<Path>, response: &GrayImage) -> Result<()> {
    let peak = response.as_slice().iter().cloned().fold(0.0, f64::max);
    let scaled = if peak > 0.0 {
        response.map(|v| v / peak)
    } else {
        response.clone()
    };
    crate::dataset::save_gray(path, &scaled)
}

//! Rank-based local adaptive histogram equalization.
//!
//! Each field-of-view pixel is replaced by its mid-rank inside a square
//! window centred on it: the fraction of window pixels darker than it, with
//! equal-valued neighbours counted half. A strict local minimum maps to 0, a
//! local median to 0.5 and a strict local maximum to 1. Only ranks matter, so
//! the output is invariant under any strictly increasing intensity remapping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_dims, BinaryMask, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AheConfig {
    /// Odd window side length in pixels.
    pub window: usize,
    /// Count only field-of-view pixels inside each window.
    pub fov_restricted: bool,
}

impl Default for AheConfig {
    fn default() -> Self {
        Self {
            window: 31,
            fov_restricted: true,
        }
    }
}

impl AheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "AHE window must be odd and at least 3, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

pub fn local_adaptive_hist_eq(
    img: &GrayImage,
    fov: &BinaryMask,
    cfg: &AheConfig,
) -> Result<GrayImage> {
    cfg.validate()?;
    ensure_dims(img.dims(), fov.dims())?;
    let (w, h) = img.dims();
    let r = cfg.window / 2;
    let src = img.as_slice();
    let inside = fov.as_slice();

    let mut out = GrayImage::new(w, h);
    out.as_mut_slice()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for (x, slot) in row.iter_mut().enumerate() {
                let idx = y * w + x;
                if !inside[idx] {
                    continue;
                }
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                let v = src[idx];
                let (mut below, mut equal, mut total) = (0u64, 0u64, 0u64);
                for yy in y0..=y1 {
                    let base = yy * w;
                    for xx in x0..=x1 {
                        let q = base + xx;
                        if cfg.fov_restricted && !inside[q] {
                            continue;
                        }
                        total += 1;
                        let u = src[q];
                        if u < v {
                            below += 1;
                        } else if u == v {
                            equal += 1;
                        }
                    }
                }
                // `equal` includes the pixel itself.
                *slot = if total <= 1 {
                    0.5
                } else {
                    (2 * below + (equal - 1)) as f64 / (2 * (total - 1)) as f64
                };
            }
        });
    Ok(out)
}

/// `1 - v` inside the field of view, 0 outside.
pub fn invert(img: &GrayImage, fov: &BinaryMask) -> Result<GrayImage> {
    ensure_dims(img.dims(), fov.dims())?;
    let mut out = img.clone();
    for (v, &m) in out.as_mut_slice().iter_mut().zip(fov.as_slice()) {
        *v = if m { 1.0 - *v } else { 0.0 };
    }
    Ok(out)
}

/// Grow the image outward from the FOV, one ring per iteration: each
/// outside pixel touching the filled region (8-neighbourhood) takes the mean
/// of its filled neighbours. Pixels never reached keep their value.
///
/// Filtering the extended image keeps the aperture edge from registering as
/// a strong oriented structure.
pub fn extend_beyond_fov(
    img: &GrayImage,
    fov: &BinaryMask,
    iterations: usize,
) -> Result<GrayImage> {
    ensure_dims(img.dims(), fov.dims())?;
    let (w, h) = img.dims();
    let mut out = img.clone();
    let mut filled = fov.clone();
    for _ in 0..iterations {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if filled.get(x, y) {
                    continue;
                }
                let (mut sum, mut n) = (0.0, 0usize);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (qx, qy) = (x as isize + dx, y as isize + dy);
                        if filled.get_signed(qx, qy) {
                            sum += out.get(qx as usize, qy as usize);
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    updates.push((x, y, sum / n as f64));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (x, y, v) in updates {
            out.set(x, y, v);
            filled.set(x, y, true);
        }
    }
    Ok(out)
}

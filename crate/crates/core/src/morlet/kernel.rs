use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameters of the analysing 2-D Morlet wavelet
/// `psi(x) = exp(j k0.x) exp(-|A x|^2 / 2)` with `A = diag(eps^-1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletParams {
    /// Wave vector; the default oscillates across the elongated envelope.
    pub k0: [f64; 2],
    /// Envelope anisotropy, at least 1. The envelope is `sqrt(epsilon)` times
    /// longer along the first axis than along the second.
    pub epsilon: f64,
    /// Admissibility constant. Responses are scaled by `c_psi^-1/2`.
    pub c_psi: f64,
}

impl Default for MorletParams {
    fn default() -> Self {
        Self {
            k0: [0.0, 3.0],
            epsilon: 4.0,
            c_psi: 1.0,
        }
    }
}

impl MorletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 1.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "Morlet anisotropy must be >= 1, got {}",
                self.epsilon
            )));
        }
        if !self.k0.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("Morlet wave vector must be finite".into()));
        }
        if !(self.c_psi > 0.0) {
            return Err(Error::Config(
                "normalizing constant must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Mother wavelet evaluated at `(y1, y2)`.
    pub fn psi(&self, y1: f64, y2: f64) -> Complex64 {
        let phase = self.k0[0] * y1 + self.k0[1] * y2;
        let envelope = (-0.5 * (y1 * y1 / self.epsilon + y2 * y2)).exp();
        Complex64::from_polar(envelope, phase)
    }
}

/// Smallest odd side length that holds the envelope down to `1e-6` of its
/// peak: `>= 10 a max(1, sqrt(eps)) + 1`.
pub fn default_support(scale: f64, params: &MorletParams) -> usize {
    let reach = 10.0 * scale * params.epsilon.sqrt().max(1.0) + 1.0;
    let n = reach.ceil() as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Square complex correlation kernel sampled at integer offsets
/// `u in [-half, half]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel {
    half: usize,
    data: Vec<Complex64>,
}

impl ComplexKernel {
    pub fn from_fn(half: usize, mut f: impl FnMut(isize, isize) -> Complex64) -> Self {
        let side = 2 * half + 1;
        let h = half as isize;
        let mut data = Vec::with_capacity(side * side);
        for uy in -h..=h {
            for ux in -h..=h {
                data.push(f(ux, uy));
            }
        }
        Self { half, data }
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn support(&self) -> usize {
        2 * self.half + 1
    }

    /// Value at offset `(ux, uy)`; zero outside the support.
    #[inline]
    pub fn at(&self, ux: isize, uy: isize) -> Complex64 {
        let h = self.half as isize;
        if ux.abs() > h || uy.abs() > h {
            return Complex64::new(0.0, 0.0);
        }
        let side = self.support();
        self.data[(uy + h) as usize * side + (ux + h) as usize]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// Dilated, rotated and conjugated wavelet
/// `k(u) = c_psi^-1/2 / a * conj(psi(r_-theta(u) / a))`.
///
/// Offsets are `(x, y)` = (column, row). At `theta = 0` the envelope is
/// elongated along the column axis; positive angles turn it toward the row
/// axis.
pub fn morlet_kernel(
    scale: f64,
    angle_deg: f64,
    params: &MorletParams,
    support: Option<usize>,
) -> Result<ComplexKernel> {
    params.validate()?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let support = support.unwrap_or_else(|| default_support(scale, params));
    if support % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel support must be odd, got {support}"
        )));
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let gain = params.c_psi.powf(-0.5) / scale;
    Ok(ComplexKernel::from_fn(support / 2, |ux, uy| {
        let (ux, uy) = (ux as f64, uy as f64);
        let y1 = (cos * ux + sin * uy) / scale;
        let y2 = (-sin * ux + cos * uy) / scale;
        params.psi(y1, y2).conj() * gain
    }))
}

//! Discrete wavelet correlation `T(b) = sum_x k(x - b) f(x)` with zero
//! extension of `f` outside the image.
//!
//! The frequency-domain path pads both operands to at least `N + half` per
//! axis so the circular product equals the linear sum on the image grid.
//! Kernel taps farther from the centre than the image extent can never touch
//! a pixel, so they are cropped before padding.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::kernel::ComplexKernel;
use crate::raster::{ComplexImage, GrayImage};

/// Brute-force spatial sum. Cost is `O(W H S^2)` for support `S`.
pub fn cwt_response_direct(img: &GrayImage, kernel: &ComplexKernel) -> ComplexImage {
    let (w, h) = img.dims();
    let half = kernel.half() as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for by in 0..h as isize {
        for bx in 0..w as isize {
            let mut acc = Complex64::new(0.0, 0.0);
            let ys = (by - half).max(0)..=(by + half).min(h as isize - 1);
            for y in ys {
                for x in (bx - half).max(0)..=(bx + half).min(w as isize - 1) {
                    acc += kernel.at(x - bx, y - by) * img.get(x as usize, y as usize);
                }
            }
            out[by as usize * w + bx as usize] = acc;
        }
    }
    ComplexImage::from_vec(w, h, out)
}

/// Frequency-domain realisation of [`cwt_response_direct`].
pub fn cwt_response(img: &GrayImage, kernel: &ComplexKernel) -> ComplexImage {
    let plan = CorrelationPlan::new(img, kernel.half());
    plan.correlate(kernel)
}

/// Smallest integer `>= n` whose only prime factors are 2, 3, 5 and 7.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Image spectrum plus FFT plans, reusable across every kernel of one
/// support size (one scale, all orientations).
pub struct CorrelationPlan {
    width: usize,
    height: usize,
    pad_w: usize,
    pad_h: usize,
    half_x: usize,
    half_y: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex64>,
}

impl CorrelationPlan {
    pub fn new(img: &GrayImage, kernel_half: usize) -> Self {
        let (w, h) = img.dims();
        let half_x = kernel_half.min(w - 1);
        let half_y = kernel_half.min(h - 1);
        let pad_w = fast_len(w + half_x);
        let pad_h = fast_len(h + half_y);
        let mut planner = FftPlanner::new();
        let mut plan = Self {
            width: w,
            height: h,
            pad_w,
            pad_h,
            half_x,
            half_y,
            row_fwd: planner.plan_fft_forward(pad_w),
            row_inv: planner.plan_fft_inverse(pad_w),
            col_fwd: planner.plan_fft_forward(pad_h),
            col_inv: planner.plan_fft_inverse(pad_h),
            spectrum: Vec::new(),
        };
        let mut grid = vec![Complex64::new(0.0, 0.0); pad_w * pad_h];
        for y in 0..h {
            for x in 0..w {
                grid[y * pad_w + x] = Complex64::new(img.get(x, y), 0.0);
            }
        }
        plan.transform(&mut grid, true);
        plan.spectrum = grid;
        plan
    }

    pub fn correlate(&self, kernel: &ComplexKernel) -> ComplexImage {
        let (pw, ph) = (self.pad_w, self.pad_h);
        let (hx, hy) = (self.half_x as isize, self.half_y as isize);
        // g(v) = k(-v), stored with negative offsets wrapped around.
        let mut grid = vec![Complex64::new(0.0, 0.0); pw * ph];
        for vy in -hy..=hy {
            let row = vy.rem_euclid(ph as isize) as usize * pw;
            for vx in -hx..=hx {
                grid[row + vx.rem_euclid(pw as isize) as usize] = kernel.at(-vx, -vy);
            }
        }
        self.transform(&mut grid, true);
        for (g, s) in grid.iter_mut().zip(&self.spectrum) {
            *g *= s;
        }
        self.transform(&mut grid, false);
        let norm = 1.0 / (pw * ph) as f64;
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            out.extend(grid[y * pw..y * pw + self.width].iter().map(|c| c * norm));
        }
        ComplexImage::from_vec(self.width, self.height, out)
    }

    fn transform(&self, grid: &mut [Complex64], forward: bool) {
        let (pw, ph) = (self.pad_w, self.pad_h);
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process(grid);
        let mut t = transpose(grid, pw, ph);
        col.process(&mut t);
        grid.copy_from_slice(&transpose(&t, ph, pw));
    }
}

fn transpose(src: &[Complex64], w: usize, h: usize) -> Vec<Complex64> {
    let mut dst = vec![Complex64::new(0.0, 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            dst[x * h + y] = src[y * w + x];
        }
    }
    dst
}

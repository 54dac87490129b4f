//! Synthetic fundus-like phantoms with exact vessel ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};

/// Image, exact vessel mask and circular FOV mask.
pub type Phantom = (GrayImage, BinaryMask, BinaryMask);

const SURROUND: f64 = 0.03;

/// Render `n_vessels` smooth dark curves (1 to 5 px wide) over a brighter,
/// slowly varying textured background inside a circular field of view.
pub fn generate_phantom(
    width: usize,
    height: usize,
    n_vessels: usize,
    seed: u64,
) -> Result<Phantom> {
    if width < 64 || height < 64 {
        return Err(Error::Config(format!(
            "phantom must be at least 64x64, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let radius = 0.46 * width.min(height) as f64;
    let fov = BinaryMask::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= radius * radius
    });

    // Background: base level, a few low-frequency ripples, a radial falloff.
    let ripples: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.01..0.04);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.01..0.03);
            (freq * angle.cos(), freq * angle.sin(), phase, amp)
        })
        .collect();
    let base = rng.random_range(0.55..0.65);

    let mut depth = vec![0.0f64; width * height];
    let mut truth = BinaryMask::new(width, height);
    for _ in 0..n_vessels {
        draw_vessel(&mut rng, &fov, radius, (cx, cy), &mut truth, &mut depth);
    }

    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut image = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !fov.get(x, y) {
                image.set(x, y, SURROUND);
                continue;
            }
            let (fx, fy) = (x as f64, y as f64);
            let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / radius;
            let mut v = base - 0.08 * r * r;
            for &(kx, ky, phase, amp) in &ripples {
                v += amp
                    * (kx * fx * std::f64::consts::TAU + ky * fy * std::f64::consts::TAU + phase)
                        .sin();
            }
            v -= depth[i];
            v += noise.sample(&mut rng);
            image.set(x, y, v.clamp(0.0, 1.0));
        }
    }
    let truth = truth.and(&fov)?;
    Ok((image, truth, fov))
}

/// Trace one curve with slowly drifting curvature and stamp discs of the
/// vessel's radius along it.
fn draw_vessel(
    rng: &mut ChaCha8Rng,
    fov: &BinaryMask,
    radius: f64,
    centre: (f64, f64),
    truth: &mut BinaryMask,
    depth: &mut [f64],
) {
    let (w, h) = fov.dims();
    let start_r = radius * rng.random::<f64>().sqrt() * 0.9;
    let start_a = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut x, mut y) = (
        centre.0 + start_r * start_a.cos(),
        centre.1 + start_r * start_a.sin(),
    );
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut curvature = 0.0f64;
    let width = rng.random_range(1.0..=5.0f64);
    let contrast = 0.10 + 0.04 * width + rng.random_range(0.0..0.04);
    let length = rng.random_range(0.6..1.6) * radius;
    let half = width / 2.0;
    let reach = half.ceil() as isize + 1;
    let step = 0.5;
    let mut travelled = 0.0;
    while travelled < length {
        let (px, py) = (x.floor() as isize, y.floor() as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (qx, qy) = (px + dx, py + dy);
                if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                    continue;
                }
                let (ox, oy) = (qx as f64 + 0.5 - x, qy as f64 + 0.5 - y);
                if ox * ox + oy * oy <= half * half {
                    let i = qy as usize * w + qx as usize;
                    truth.as_mut_slice()[i] = true;
                    depth[i] = depth[i].max(contrast);
                }
            }
        }
        curvature = (curvature + rng.random_range(-0.004..0.004)).clamp(-0.03, 0.03);
        heading += curvature * step;
        x += step * heading.cos();
        y += step * heading.sin();
        travelled += step;
        if !fov.get_signed(x.floor() as isize, y.floor() as isize) {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_vessels_means_empty_truth() {
        let (img, truth, fov) = generate_phantom(64, 64, 0, 1).unwrap();
        assert_eq!(truth.count(), 0);
        assert!(fov.count() > 0);
        assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(96, 80, 6, 42).unwrap();
        let b = generate_phantom(96, 80, 6, 42).unwrap();
        let c = generate_phantom(96, 80, 6, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn truth_inside_fov_and_vessels_darker() {
        let (img, truth, fov) = generate_phantom(128, 128, 10, 7).unwrap();
        assert!(truth.is_subset_of(&fov));
        assert!(truth.count() > 0);
        let mean = |sel: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..128 * 128)
                .filter(|&i| sel(i))
                .map(|i| img.as_slice()[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let vessel = mean(&|i| truth.as_slice()[i]);
        let background = mean(&|i| fov.as_slice()[i] && !truth.as_slice()[i]);
        assert!(vessel < background - 0.05);
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_phantom(63, 100, 1, 0).is_err());
    }
}

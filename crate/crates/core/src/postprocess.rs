//! Cleanup of the raw vessel labelling: majority (median) filter, union of
//! directional line openings, and removal of short connected components.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_dims, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostConfig {
    pub median_radius: usize,
    /// Length of each line structuring element, odd.
    pub opening_length: usize,
    /// Components whose bounding-box diagonal is shorter than this are removed.
    pub min_component_length: f64,
    /// Line orientations in degrees, counter-clockwise from the +x axis.
    pub directions: Vec<f64>,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            median_radius: 1,
            opening_length: 9,
            min_component_length: 10.0,
            directions: vec![0.0, 30.0, 60.0, 120.0, 150.0],
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_radius == 0 {
            return Err(Error::Config("median_radius must be at least 1".into()));
        }
        if self.opening_length == 0 || self.opening_length % 2 == 0 {
            return Err(Error::Config(format!(
                "opening_length must be odd and positive, got {}",
                self.opening_length
            )));
        }
        if !(self.min_component_length >= 1.0) {
            return Err(Error::Config(
                "min_component_length must be at least 1".into(),
            ));
        }
        if self.directions.is_empty() || self.directions.iter().any(|d| !d.is_finite()) {
            return Err(Error::Config(
                "at least one finite direction is required".into(),
            ));
        }
        Ok(())
    }
}

/// Line segment through the origin, rasterized one pixel per step along its
/// major axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    /// `length` odd. Image rows grow downward, so a 30 degree line rises to
    /// the right.
    pub fn line(angle_deg: f64, length: usize) -> Result<Self> {
        if length == 0 || length % 2 == 0 {
            return Err(Error::Config(format!(
                "line element length must be odd, got {length}"
            )));
        }
        let half = (length / 2) as isize;
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let (dx, dy) = (cos, -sin);
        let offsets = (-half..=half)
            .map(|t| {
                let t_f = t as f64;
                if dx.abs() >= dy.abs() {
                    (t, (t_f * dy / dx).round() as isize)
                } else {
                    ((t_f * dx / dy).round() as isize, t)
                }
            })
            .collect();
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Majority vote over the `(2r+1)^2` window clipped to the image; ties are
/// false.
pub fn median_filter_mask(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    // Summed-area table with a zero border row and column.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask.get(x, y) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let (x0, y0) = (x.saturating_sub(radius), y.saturating_sub(radius));
        let (x1, y1) = ((x + radius + 1).min(w), (y + radius + 1).min(h));
        let count = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
            - sat[y0 * (w + 1) + x1]
            - sat[y1 * (w + 1) + x0];
        let area = ((x1 - x0) * (y1 - y0)) as u32;
        2 * count > area
    })
}

pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        se.offsets()
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy))
    })
}

pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        se.offsets()
            .iter()
            .any(|&(dx, dy)| mask.get_signed(x as isize - dx, y as isize - dy))
    })
}

/// Erosion followed by dilation; pixels outside the image count as false.
pub fn directional_opening(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}

/// Pixelwise OR of the openings along every configured direction.
pub fn combine_openings(mask: &BinaryMask, cfg: &PostConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let elements = cfg
        .directions
        .iter()
        .map(|&d| StructuringElement::line(d, cfg.opening_length))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = mask.dims();
    Ok(elements
        .par_iter()
        .map(|se| directional_opening(mask, se))
        .reduce(
            || BinaryMask::new(w, h),
            |a, b| a.or(&b).expect("same dimensions"),
        ))
}

/// Delete 8-connected components whose bounding-box diagonal is below
/// `min_len`. Surviving components are left untouched.
pub fn remove_short_components(mask: &BinaryMask, min_len: f64) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..w * h {
        if seen[start] || !mask.as_slice()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        members.clear();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if !seen[j] && mask.as_slice()[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let bw = (x1 - x0 + 1) as f64;
        let bh = (y1 - y0 + 1) as f64;
        if (bw * bw + bh * bh).sqrt() < min_len {
            for &i in &members {
                out.as_mut_slice()[i] = false;
            }
        }
    }
    out
}

/// Median filter, directional openings, OR, and length filter, applied to
/// the labelling restricted to the FOV.
pub fn postprocess_pipeline(
    mask: &BinaryMask,
    fov: &BinaryMask,
    cfg: &PostConfig,
) -> Result<BinaryMask> {
    ensure_dims(mask.dims(), fov.dims())?;
    cfg.validate()?;
    let masked = mask.and(fov)?;
    // The majority vote can switch on pixels just outside the FOV.
    let smoothed = median_filter_mask(&masked, cfg.median_radius).and(fov)?;
    let opened = combine_openings(&smoothed, cfg)?;
    Ok(remove_short_components(&opened, cfg.min_component_length))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(seed: u64, w: usize, h: usize, p: f64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinaryMask::from_fn(w, h, |_, _| rng.random::<f64>() < p)
    }

    #[test]
    fn line_elements_are_symmetric_and_sized() {
        for angle in [0.0, 30.0, 45.0, 60.0, 90.0, 120.0, 150.0, 17.0] {
            for len in [1, 3, 9, 15] {
                let se = StructuringElement::line(angle, len).unwrap();
                assert_eq!(se.len(), len);
                assert!(se.offsets().contains(&(0, 0)));
                for &(dx, dy) in se.offsets() {
                    assert!(se.offsets().contains(&(-dx, -dy)));
                }
            }
        }
        assert!(StructuringElement::line(0.0, 8).is_err());
        let se = StructuringElement::line(30.0, 9).unwrap();
        assert!(se.offsets().contains(&(4, -2)));
    }

    #[test]
    fn median_examples() {
        let mut m = BinaryMask::new(9, 9);
        m.set(4, 4, true);
        assert_eq!(median_filter_mask(&m, 1).count(), 0);

        let rect = BinaryMask::from_fn(12, 10, |x, y| (2..9).contains(&x) && (3..8).contains(&y));
        let f = median_filter_mask(&rect, 1);
        for y in 4..7 {
            for x in 3..8 {
                assert!(f.get(x, y));
            }
        }

        let checker = BinaryMask::from_fn(8, 8, |x, y| (x + y) % 2 == 0);
        let f = median_filter_mask(&checker, 1);
        for y in 1..7 {
            for x in 1..7 {
                // centre colour holds 5 of the 9 window pixels
                assert_eq!(f.get(x, y), checker.get(x, y));
            }
        }

        for v in [true, false] {
            let m = BinaryMask::filled(7, 5, v);
            assert_eq!(median_filter_mask(&m, 2), m);
        }
    }

    #[test]
    fn median_border_tie_resolves_false() {
        // Corner window is 2x2 with two set pixels.
        let m = BinaryMask::from_fn(4, 4, |x, y| y == 0 && x < 2);
        assert!(!median_filter_mask(&m, 1).get(0, 0));
    }

    #[test]
    fn opening_keeps_aligned_lines_only() {
        let line = BinaryMask::from_fn(30, 11, |x, y| y == 5 && (5..25).contains(&x));
        let horiz = StructuringElement::line(0.0, 9).unwrap();
        let vert = StructuringElement::line(90.0, 9).unwrap();
        assert_eq!(directional_opening(&line, &horiz), line);
        assert_eq!(directional_opening(&line, &vert).count(), 0);
    }

    #[test]
    fn thirty_degree_line_survives_union() {
        let se = StructuringElement::line(30.0, 31).unwrap();
        let mut m = BinaryMask::new(40, 40);
        for &(dx, dy) in se.offsets() {
            m.set((20 + dx) as usize, (20 + dy) as usize, true);
        }
        // Digital sub-segments of a long line need not be exact translates of
        // the short element, so some pixels may drop; most must survive.
        let out = combine_openings(&m, &PostConfig::default()).unwrap();
        assert!(out.is_subset_of(&m));
        assert!(
            out.count() * 10 >= m.count() * 7,
            "{} of {}",
            out.count(),
            m.count()
        );
        // A thicker band at the same angle survives intact away from its ends.
        let band = BinaryMask::from_fn(40, 40, |x, y| {
            let (fx, fy) = (x as f64 - 20.0, y as f64 - 20.0);
            let (s, c) = 30f64.to_radians().sin_cos();
            let along = fx * c - fy * s;
            let across = fx * s + fy * c;
            along.abs() <= 15.0 && across.abs() <= 1.5
        });
        let kept = combine_openings(&band, &PostConfig::default()).unwrap();
        let core = BinaryMask::from_fn(40, 40, |x, y| {
            let (fx, fy) = (x as f64 - 20.0, y as f64 - 20.0);
            let (s, c) = 30f64.to_radians().sin_cos();
            band.get(x, y) && (fx * c - fy * s).abs() <= 10.0
        });
        assert!(core.is_subset_of(&kept));
        let only_30 = PostConfig {
            directions: vec![30.0],
            ..PostConfig::default()
        };
        let thirty = StructuringElement::line(30.0, 9).unwrap();
        assert_eq!(
            combine_openings(&m, &only_30).unwrap(),
            directional_opening(&m, &thirty)
        );
    }

    #[test]
    fn opening_axioms_on_random_masks() {
        for seed in 0..10 {
            let m = random_mask(seed, 24, 20, 0.6);
            let bigger = m.or(&random_mask(seed + 100, 24, 20, 0.3)).unwrap();
            for dir in [0.0, 30.0, 60.0, 120.0, 150.0] {
                let se = StructuringElement::line(dir, 5).unwrap();
                let o = directional_opening(&m, &se);
                assert!(o.is_subset_of(&m));
                assert_eq!(directional_opening(&o, &se), o);
                assert!(o.is_subset_of(&directional_opening(&bigger, &se)));
            }
        }
    }

    #[test]
    fn short_component_examples() {
        let mut dot = BinaryMask::new(10, 10);
        dot.set(3, 3, true);
        assert_eq!(remove_short_components(&dot, 2.0).count(), 0);
        let line = BinaryMask::from_fn(30, 5, |x, y| y == 2 && (3..23).contains(&x));
        assert_eq!(remove_short_components(&line, 10.0), line);
        let m = random_mask(3, 20, 20, 0.3);
        assert_eq!(remove_short_components(&m, 1.0), m);
    }

    #[test]
    fn survivors_are_unchanged() {
        let m = random_mask(9, 40, 40, 0.45);
        let out = remove_short_components(&m, 6.0);
        assert!(out.is_subset_of(&m));
        // any pixel of m 8-adjacent to a surviving pixel must also survive
        for y in 0..40usize {
            for x in 0..40usize {
                if !out.get(x, y) {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(39) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(39) {
                        assert_eq!(m.get(nx, ny), out.get(nx, ny));
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_stays_inside_fov() {
        let fov = BinaryMask::from_fn(40, 40, |x, y| {
            (x as i32 - 20).pow(2) + (y as i32 - 20).pow(2) < 300
        });
        let empty = BinaryMask::new(40, 40);
        let cfg = PostConfig::default();
        assert_eq!(postprocess_pipeline(&empty, &fov, &cfg).unwrap().count(), 0);
        for seed in 0..5 {
            let m = random_mask(seed, 40, 40, 0.55);
            assert!(postprocess_pipeline(&m, &fov, &cfg)
                .unwrap()
                .is_subset_of(&fov));
        }
        assert!(postprocess_pipeline(&empty, &BinaryMask::new(4, 4), &cfg).is_err());
    }
}

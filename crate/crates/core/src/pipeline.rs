//! Image to normalized feature stack: grayscale, local AHE, inversion,
//! Morlet responses, per-image z-scoring.

use serde::{Deserialize, Serialize};

use crate::dataset::{to_gray, GrayMethod};
use crate::error::{Error, Result};
use crate::morlet::{
    angle_grid, build_feature_stack, compute_feature_stats, max_modulus_over_angles,
    normalize_features, FeatureStack, FeatureStats, MorletParams, SweepConfig,
};
use crate::preprocess::{extend_beyond_fov, invert, local_adaptive_hist_eq, AheConfig};
use crate::raster::{BinaryMask, GrayImage, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub grayscale: GrayMethod,
    pub window: usize,
    pub fov_restricted: bool,
    /// Rings grown outside the FOV before wavelet filtering; 0 keeps the
    /// zeroed surround.
    pub fov_extension: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let ahe = AheConfig::default();
        Self {
            grayscale: GrayMethod::Green,
            window: ahe.window,
            fov_restricted: ahe.fov_restricted,
            fov_extension: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn ahe(&self) -> AheConfig {
        AheConfig {
            window: self.window,
            fov_restricted: self.fov_restricted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorletConfig {
    pub k0: [f64; 2],
    pub epsilon: f64,
    pub scales: Vec<f64>,
    /// Orientation step in degrees; the sweep covers `[0, 180)`.
    pub angle_step: f64,
}

impl Default for MorletConfig {
    fn default() -> Self {
        let p = MorletParams::default();
        Self {
            k0: p.k0,
            epsilon: p.epsilon,
            scales: SweepConfig::default().scales,
            angle_step: 10.0,
        }
    }
}

impl MorletConfig {
    pub fn params(&self) -> MorletParams {
        MorletParams {
            k0: self.k0,
            epsilon: self.epsilon,
            c_psi: 1.0,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            scales: self.scales.clone(),
            angles: angle_grid(self.angle_step),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angle_step > 0.0 && self.angle_step < 180.0) {
            return Err(Error::Config(format!(
                "angle_step must lie in (0, 180), got {}",
                self.angle_step
            )));
        }
        self.params().validate()?;
        self.sweep().validate()
    }
}

/// Which statistics z-score the features of an image being classified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsSource {
    /// The training statistics stored in the model.
    #[default]
    Model,
    /// The image's own FOV statistics.
    Image,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturePipeline {
    pub preprocess: PreprocessConfig,
    pub morlet: MorletConfig,
}

impl FeaturePipeline {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.ahe().validate()?;
        self.morlet.validate()
    }

    pub fn feature_dim(&self) -> usize {
        1 + self.morlet.scales.len()
    }

    /// Preprocessed intensity: vessels bright, outside the FOV zero.
    pub fn intensity_from_gray(&self, gray: &GrayImage, fov: &BinaryMask) -> Result<GrayImage> {
        let eq = local_adaptive_hist_eq(gray, fov, &self.preprocess.ahe())?;
        invert(&eq, fov)
    }

    pub fn intensity(&self, image: &RgbImage, fov: &BinaryMask) -> Result<GrayImage> {
        self.intensity_from_gray(&to_gray(image, self.preprocess.grayscale), fov)
    }

    /// Intensity channel plus one max-modulus wavelet channel per scale.
    pub fn raw_features(&self, intensity: &GrayImage, fov: &BinaryMask) -> Result<FeatureStack> {
        if self.preprocess.fov_extension == 0 {
            return build_feature_stack(intensity, &self.morlet.sweep(), &self.morlet.params());
        }
        let extended = extend_beyond_fov(intensity, fov, self.preprocess.fov_extension)?;
        let (sweep, params) = (self.morlet.sweep(), self.morlet.params());
        sweep.validate()?;
        params.validate()?;
        let mut channels = vec![intensity.clone()];
        for &scale in &sweep.scales {
            channels.push(max_modulus_over_angles(&extended, scale, &sweep, &params)?);
        }
        FeatureStack::from_channels(&channels)
    }

    /// Features z-scored with given statistics.
    pub fn features_with_stats(
        &self,
        intensity: &GrayImage,
        fov: &BinaryMask,
        stats: &FeatureStats,
    ) -> Result<FeatureStack> {
        let raw = self.raw_features(intensity, fov)?;
        normalize_features(&raw, stats, fov)
    }

    /// Features z-scored with the image's own FOV statistics.
    pub fn normalized_features(
        &self,
        intensity: &GrayImage,
        fov: &BinaryMask,
    ) -> Result<(FeatureStack, FeatureStats)> {
        let raw = self.raw_features(intensity, fov)?;
        let stats = compute_feature_stats(&raw, fov)?;
        let norm = normalize_features(&raw, &stats, fov)?;
        Ok((norm, stats))
    }
}

/// Channel-wise average of several images' statistics.
pub fn average_stats(all: &[FeatureStats]) -> Option<FeatureStats> {
    let first = all.first()?;
    let n = all.len() as f64;
    let mut mean = vec![0.0; first.dim()];
    let mut std = vec![0.0; first.dim()];
    for s in all {
        mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b / n);
        std.iter_mut().zip(&s.std).for_each(|(a, b)| *a += b / n);
    }
    Some(FeatureStats { mean, std })
}

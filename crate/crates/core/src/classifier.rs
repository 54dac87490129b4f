//! Bayes pixel classifier with one Gaussian mixture likelihood per class.
//!
//! A pixel with feature vector `x` is labelled vessel iff
//! `p(x | vessel) P(vessel) > p(x | background) P(background)`; ties go to
//! background. Scores are compared in log space.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, EmConfig, Gmm};
use crate::morlet::{FeatureStack, FeatureStats};
use crate::pipeline::FeaturePipeline;
use crate::raster::{ensure_dims, BinaryMask, GrayImage};

pub const MODEL_FORMAT: &str = "vesselseg-bayes-gmm";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Vessel,
    Background,
}

/// Labelled feature vectors drawn from expert-segmented images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Class>,
    pub seed: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }

    /// Empirical fraction of vessel samples.
    pub fn vessel_fraction(&self) -> f64 {
        self.count(Class::Vessel) as f64 / self.len() as f64
    }

    pub fn class_samples(&self, class: Class) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .zip(&self.labels)
            .filter(|(_, &c)| c == class)
            .map(|(f, _)| f.clone())
            .collect()
    }

    fn check_classes(&self) -> Result<()> {
        if self.count(Class::Vessel) == 0 {
            return Err(Error::MissingClass("vessel"));
        }
        if self.count(Class::Background) == 0 {
            return Err(Error::MissingClass("background"));
        }
        Ok(())
    }
}

/// Which field-of-view pixels of each image enter the training set.
///
/// Drawing needs only the FOV sizes, so images can be featurized one at a
/// time afterwards.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    /// Per image: ordinals into its FOV pixel list, ascending.
    picks: Vec<Vec<usize>>,
    seed: u64,
}

impl SamplePlan {
    /// Draw `n_total` pixels uniformly without replacement from the union
    /// of all FOV pixels.
    pub fn new(fov_counts: &[usize], n_total: usize, seed: u64) -> Result<Self> {
        let available: usize = fov_counts.iter().sum();
        if n_total < 2 || n_total > available {
            return Err(Error::InsufficientPixels {
                requested: n_total,
                available,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut global = index::sample(&mut rng, available, n_total).into_vec();
        global.sort_unstable();
        let mut picks = vec![Vec::new(); fov_counts.len()];
        let mut image = 0;
        let mut offset = 0;
        for g in global {
            while g >= offset + fov_counts[image] {
                offset += fov_counts[image];
                image += 1;
            }
            picks[image].push(g - offset);
        }
        Ok(Self { picks, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn picks(&self, image: usize) -> &[usize] {
        &self.picks[image]
    }

    /// Extract the planned samples of one image.
    pub fn collect(
        &self,
        image: usize,
        stack: &FeatureStack,
        truth: &BinaryMask,
        fov: &BinaryMask,
    ) -> Result<(Vec<Vec<f64>>, Vec<Class>)> {
        ensure_dims(stack.dims(), truth.dims())?;
        ensure_dims(stack.dims(), fov.dims())?;
        let mut want = self.picks[image].iter().peekable();
        let mut features = Vec::with_capacity(self.picks[image].len());
        let mut labels = Vec::with_capacity(self.picks[image].len());
        let mut ordinal = 0;
        for (i, &inside) in fov.as_slice().iter().enumerate() {
            if !inside {
                continue;
            }
            if want.peek() == Some(&&ordinal) {
                want.next();
                features.push(stack.pixel(i).to_vec());
                labels.push(if truth.as_slice()[i] {
                    Class::Vessel
                } else {
                    Class::Background
                });
            }
            ordinal += 1;
        }
        if want.next().is_some() {
            return Err(Error::InsufficientPixels {
                requested: self.picks[image].len(),
                available: ordinal,
            });
        }
        Ok((features, labels))
    }
}

/// Uniform random draw of `n_total` FOV pixels across `stacks`, each given
/// with its ground truth and FOV mask.
pub fn sample_training_set(
    stacks: &[(&FeatureStack, &BinaryMask, &BinaryMask)],
    n_total: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let counts: Vec<usize> = stacks.iter().map(|(_, _, fov)| fov.count()).collect();
    let plan = SamplePlan::new(&counts, n_total, seed)?;
    let mut set = TrainingSet {
        features: Vec::with_capacity(n_total),
        labels: Vec::with_capacity(n_total),
        seed,
    };
    for (i, (stack, truth, fov)) in stacks.iter().enumerate() {
        let (f, l) = plan.collect(i, stack, truth, fov)?;
        set.features.extend(f);
        set.labels.extend(l);
    }
    set.check_classes()?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub vessel: f64,
    pub background: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModels {
    pub vessel: Gmm,
    pub background: Gmm,
}

/// Trained classifier, serialized as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesModel {
    pub format: String,
    pub version: u32,
    pub priors: Priors,
    /// Average of the per-image feature statistics seen during training.
    pub feature_stats: FeatureStats,
    /// Feature extraction settings the model was trained with.
    pub pipeline: FeaturePipeline,
    pub classes: ClassModels,
}

impl BayesModel {
    pub fn new(
        priors: Priors,
        vessel: Gmm,
        background: Gmm,
        feature_stats: FeatureStats,
        pipeline: FeaturePipeline,
    ) -> Result<Self> {
        if !(priors.vessel > 0.0 && priors.background > 0.0)
            || (priors.vessel + priors.background - 1.0).abs() > 1e-12
        {
            return Err(Error::Model("priors must be positive and sum to 1".into()));
        }
        if vessel.dim() != background.dim() || vessel.dim() != feature_stats.dim() {
            return Err(Error::Model(
                "class mixtures and feature stats disagree on dimension".into(),
            ));
        }
        Ok(Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            priors,
            feature_stats,
            pipeline,
            classes: ClassModels { vessel, background },
        })
    }

    pub fn dim(&self) -> usize {
        self.classes.vessel.dim()
    }

    /// `(ln p(x|vessel) + ln P(vessel), ln p(x|background) + ln P(background))`.
    fn class_scores(&self, x: &[f64], scratch: &mut [f64]) -> (f64, f64) {
        let v = self.classes.vessel.log_pdf_with(x, scratch) + self.priors.vessel.ln();
        let b = self.classes.background.log_pdf_with(x, scratch) + self.priors.background.ln();
        (v, b)
    }

    fn scratch(&self) -> Vec<f64> {
        let k = self.classes.vessel.k().max(self.classes.background.k());
        vec![0.0; self.dim() + k]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims((self.dim(), 1), (x.len(), 1)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature vector must be finite".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: BayesModel =
            serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if model.format != MODEL_FORMAT {
            return Err(Error::Model(format!(
                "unexpected format tag {:?}",
                model.format
            )));
        }
        if model.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {}",
                model.version
            )));
        }
        BayesModel::new(
            model.priors,
            model.classes.vessel,
            model.classes.background,
            model.feature_stats,
            model.pipeline,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Write via a temporary sibling and rename, so a failed run never leaves
    /// a truncated model behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Fit both class likelihoods. Priors are the empirical class fractions of
/// the sample, or 1/2 each with `equal_priors`.
pub fn train_bayes_model(
    set: &TrainingSet,
    em: &EmConfig,
    equal_priors: bool,
    feature_stats: FeatureStats,
    pipeline: FeaturePipeline,
) -> Result<BayesModel> {
    set.check_classes()?;
    let vessel_cfg = em.clone();
    let background_cfg = EmConfig {
        seed: em.seed.wrapping_add(0x5851_F42D_4C95_7F2D),
        ..em.clone()
    };
    let vessel = fit_gmm(&set.class_samples(Class::Vessel), &vessel_cfg)?;
    let background = fit_gmm(&set.class_samples(Class::Background), &background_cfg)?;
    let priors = if equal_priors {
        Priors {
            vessel: 0.5,
            background: 0.5,
        }
    } else {
        let v = set.vessel_fraction();
        Priors {
            vessel: v,
            background: 1.0 - v,
        }
    };
    BayesModel::new(priors, vessel, background, feature_stats, pipeline)
}

/// Vessel posterior from the two class scores; `None` flags the case where
/// both likelihoods underflow to zero (the posterior is then 1/2).
fn posterior_from_scores(v: f64, b: f64) -> (f64, bool) {
    if v == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return (0.5, true);
    }
    let delta = v - b;
    let p = 1.0 / (1.0 + (-delta).exp());
    // Keep `p > 1/2` exactly when the decision rule says vessel.
    let p = if delta > 0.0 && p <= 0.5 {
        f64::from_bits(0.5f64.to_bits() + 1)
    } else if delta <= 0.0 && p > 0.5 {
        0.5
    } else {
        p
    };
    (p, false)
}

/// `p(vessel | x)` by Bayes' rule, evaluated in log space.
pub fn posterior_vessel(model: &BayesModel, x: &[f64]) -> Result<f64> {
    model.check_input(x)?;
    let (v, b) = model.class_scores(x, &mut model.scratch());
    let (p, underflow) = posterior_from_scores(v, b);
    if underflow {
        warn!("both class likelihoods underflow; posterior set to 0.5");
    }
    Ok(p)
}

/// `p(background | x)`.
pub fn posterior_background(model: &BayesModel, x: &[f64]) -> Result<f64> {
    model.check_input(x)?;
    let (v, b) = model.class_scores(x, &mut model.scratch());
    if v == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return Ok(0.5);
    }
    Ok(1.0 / (1.0 + (v - b).exp()))
}

/// Label every FOV pixel and return the vessel posterior map alongside.
/// Pixels outside the FOV are background with posterior 0.
pub fn classify_stack(
    model: &BayesModel,
    stack: &FeatureStack,
    fov: &BinaryMask,
) -> Result<(BinaryMask, GrayImage)> {
    ensure_dims(stack.dims(), fov.dims())?;
    if stack.dim() != model.dim() {
        return Err(Error::StatsMismatch(format!(
            "stack has {} channels, model expects {}",
            stack.dim(),
            model.dim()
        )));
    }
    if !stack.is_normalized() {
        return Err(Error::StatsMismatch(
            "feature stack is not normalized".into(),
        ));
    }
    let (w, h) = stack.dims();
    let inside = fov.as_slice();
    let rows: Vec<(Vec<bool>, Vec<f64>, usize)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut scratch = model.scratch();
            let mut labels = vec![false; w];
            let mut probs = vec![0.0; w];
            let mut underflows = 0;
            for x in 0..w {
                let i = y * w + x;
                if !inside[i] {
                    continue;
                }
                let (v, b) = model.class_scores(stack.pixel(i), &mut scratch);
                let (p, under) = posterior_from_scores(v, b);
                underflows += under as usize;
                labels[x] = v > b;
                probs[x] = p;
            }
            (labels, probs, underflows)
        })
        .collect();
    let mut labels = Vec::with_capacity(w * h);
    let mut probs = Vec::with_capacity(w * h);
    let mut underflows = 0;
    for (l, p, u) in rows {
        labels.extend(l);
        probs.extend(p);
        underflows += u;
    }
    if underflows > 0 {
        warn!("{underflows} pixels had both class likelihoods underflow; posterior set to 0.5");
    }
    Ok((
        BinaryMask::from_vec(w, h, labels)?,
        GrayImage::from_vec(w, h, probs)?,
    ))
}

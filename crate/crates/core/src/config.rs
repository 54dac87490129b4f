//! Run configuration: one TOML file plus `section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::EmConfig;
use crate::pipeline::{FeaturePipeline, MorletConfig, PreprocessConfig, StatsSource};
use crate::postprocess::PostConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// DRIVE-style root holding `training/` and `test/`, or a single split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<PathBuf>,
    /// Trained model used by `segment` and `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Parent of the per-run `run-<timestamp>` directories.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            model: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Mixture components per class.
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub cov_floor: f64,
    pub restarts: usize,
    /// Training pixels drawn uniformly from all training FOVs.
    pub n_samples: usize,
    /// Use `P(vessel) = P(background) = 1/2` instead of sample fractions.
    pub equal_priors: bool,
    /// Statistics used to z-score images at segmentation time. Training
    /// images are always z-scored with their own statistics.
    pub normalization: StatsSource,
    /// Overrides the global seed for sampling and EM.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            k: em.k_per_class,
            max_iters: em.max_iters,
            tol: em.tol,
            cov_floor: em.cov_floor,
            restarts: em.restarts,
            n_samples: 200_000,
            equal_priors: false,
            normalization: StatsSource::Model,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// ROC thresholds are `i / roc_thresholds`.
    pub roc_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            roc_thresholds: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_vessels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            n_train: 10,
            n_test: 5,
            n_vessels: 14,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub morlet: MorletConfig,
    pub classifier: ClassifierConfig,
    pub post: PostConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path` (or start from defaults) and apply `key=value`
    /// overrides, which win over the file.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        let seeds = [Some(self.seed), self.classifier.seed, self.synth.seed];
        if seeds.iter().flatten().any(|&s| s > i64::MAX as u64) {
            return Err(Error::Config("seeds must not exceed 2^63 - 1".into()));
        }
        self.pipeline().validate()?;
        self.em().validate()?;
        self.post.validate()?;
        if self.classifier.n_samples < 2 {
            return Err(Error::Config("n_samples must be at least 2".into()));
        }
        if self.eval.roc_thresholds < 2 {
            return Err(Error::Config("roc_thresholds must be at least 2".into()));
        }
        if self.synth.width < 64 || self.synth.height < 64 {
            return Err(Error::Config("synth images must be at least 64x64".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> FeaturePipeline {
        FeaturePipeline {
            preprocess: self.preprocess.clone(),
            morlet: self.morlet.clone(),
        }
    }

    pub fn classifier_seed(&self) -> u64 {
        self.classifier.seed.unwrap_or(self.seed)
    }

    pub fn em(&self) -> EmConfig {
        let c = &self.classifier;
        EmConfig {
            k_per_class: c.k,
            max_iters: c.max_iters,
            tol: c.tol,
            cov_floor: c.cov_floor,
            restarts: c.restarts,
            seed: self.classifier_seed(),
        }
    }

    pub fn synth_seed(&self) -> u64 {
        self.synth.seed.unwrap_or(self.seed)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string (so `paths.output_dir=out` works without quotes).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

//! Subcommand implementations behind the `vesselseg` binary.
//!
//! Every command writes its artifacts into a fresh `run-<timestamp>`
//! directory under `paths.output_dir` (except `synth`, which writes a
//! dataset into the directory it is given) together with a
//! `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    classify_stack, sample_training_set, train_bayes_model, write_atomic, BayesModel,
};
use crate::config::RunConfig;
use crate::dataset::{
    discover_split, ensure_uniform_depth, load_image, load_mask, save_gray, save_mask, save_rgb,
    DatasetRecord, LoadedRecord, SplitRole, IMAGES_DIR, MANUAL_DIR, MASK_DIR,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, confusion, Report, RocAccumulator, RocCurve};
use crate::phantom::generate_phantom;
use crate::pipeline::{average_stats, FeaturePipeline, StatsSource};
use crate::postprocess::{postprocess_pipeline, PostConfig};
use crate::raster::{BinaryMask, GrayImage, RgbImage};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MODEL_NAME: &str = "model.json";
pub const POSTERIOR_DIR: &str = "posterior";
pub const SEGMENTATION_DIR: &str = "segmentation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance record written next to a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started: String,
    /// The effective configuration as TOML; parses back to the same
    /// [`RunConfig`].
    pub config: String,
    pub timings: Vec<StageTiming>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Collects timings, input digests and outputs over one command.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    stage_start: Instant,
}

impl Run {
    fn new(command: &str, cfg: &RunConfig, dir: PathBuf) -> Self {
        Self {
            dir,
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                started: chrono::Local::now().to_rfc3339(),
                config: cfg.to_toml(),
                timings: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            stage_start: Instant::now(),
        }
    }

    fn stage_done(&mut self, stage: &str) {
        let seconds = self.stage_start.elapsed().as_secs_f64();
        info!("{stage}: {seconds:.2}s");
        self.manifest.timings.push(StageTiming {
            stage: stage.into(),
            seconds,
        });
        self.stage_start = Instant::now();
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    fn record_inputs(&mut self, records: &[DatasetRecord]) -> Result<()> {
        for r in records {
            for p in [&r.image, &r.fov, &r.truth] {
                self.input(p)?;
            }
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Note an artifact already written under the run directory.
    fn output(&mut self, rel: &str) -> Result<()> {
        let digest = file_digest(&self.path(rel))?;
        self.manifest.outputs.insert(rel.into(), digest);
        Ok(())
    }

    fn write_output(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.output(rel)
    }

    fn finish(self) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(
            &self.dir.join(MANIFEST_NAME),
            format!("{json}\n").as_bytes(),
        )?;
        Ok(self.dir)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn create_dir_all(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Create `<parent>/run-<timestamp>`, suffixed `-1`, `-2`, ... if taken.
pub fn create_run_dir(parent: &Path) -> Result<PathBuf> {
    create_dir_all(parent)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 {
            format!("run-{stamp}")
        } else {
            format!("run-{stamp}-{n}")
        };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

fn dataset_root(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.dataset_root.clone())
        .ok_or_else(|| Error::Config("no dataset root given (paths.dataset_root)".into()))
}

fn model_path(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.model.clone())
        .ok_or_else(|| Error::Config("no model given (paths.model)".into()))
}

fn load_records(records: &[DatasetRecord]) -> Result<Vec<LoadedRecord>> {
    let loaded = records
        .par_iter()
        .map(DatasetRecord::load)
        .collect::<Result<Vec<_>>>()?;
    ensure_uniform_depth(loaded.iter().map(|r| &r.image))?;
    Ok(loaded)
}

/// Model and pipeline agree on the feature layout; warn when other
/// extraction settings differ from those the model was trained with.
fn check_model(model: &BayesModel, pipeline: &FeaturePipeline) -> Result<()> {
    if pipeline.feature_dim() != model.dim() {
        return Err(Error::StatsMismatch(format!(
            "configuration yields {} features, model expects {}",
            pipeline.feature_dim(),
            model.dim()
        )));
    }
    if *pipeline != model.pipeline {
        warn!("feature settings differ from those the model was trained with");
    }
    Ok(())
}

/// Output of the full per-image chain.
#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Bayes labels before cleanup.
    pub raw: BinaryMask,
    pub posterior: GrayImage,
    /// Post-processed vessel mask, inside the FOV.
    pub mask: BinaryMask,
}

pub fn segment_image(
    model: &BayesModel,
    pipeline: &FeaturePipeline,
    normalization: StatsSource,
    post: &PostConfig,
    image: &RgbImage,
    fov: &BinaryMask,
) -> Result<Segmentation> {
    let intensity = pipeline.intensity(image, fov)?;
    let stack = match normalization {
        StatsSource::Model => {
            pipeline.features_with_stats(&intensity, fov, &model.feature_stats)?
        }
        StatsSource::Image => pipeline.normalized_features(&intensity, fov)?.0,
    };
    let (raw, posterior) = classify_stack(model, &stack, fov)?;
    let mask = postprocess_pipeline(&raw, fov, post)?;
    Ok(Segmentation {
        raw,
        posterior,
        mask,
    })
}

/// Prediction painted red over the source image.
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> RgbImage {
    let mut out = image.clone();
    for (c, value) in [(0, 1.0), (1, 0.0), (2, 0.0)] {
        for (v, &m) in out.plane_mut(c).iter_mut().zip(mask.as_slice()) {
            if m {
                *v = value;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub model_path: PathBuf,
    pub model: BayesModel,
}

/// Fit the classifier on the training split.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = dataset_root(cfg, dataset)?;
    let split = discover_split(&root, SplitRole::Train)?;
    let run_dir = create_run_dir(&cfg.paths.output_dir)?;
    let mut run = Run::new("train", cfg, run_dir);
    run.record_inputs(&split.records)?;
    info!(
        "training on {} records from {}",
        split.len(),
        root.display()
    );
    let loaded = load_records(&split.records)?;
    run.stage_done("load");

    let pipeline = cfg.pipeline();
    let features = loaded
        .par_iter()
        .map(|r| {
            let intensity = pipeline.intensity(&r.image, &r.fov)?;
            pipeline
                .normalized_features(&intensity, &r.fov)
                .map_err(|e| e.in_record(&r.id))
        })
        .collect::<Result<Vec<_>>>()?;
    run.stage_done("features");

    let inputs: Vec<_> = features
        .iter()
        .zip(&loaded)
        .map(|((stack, _), r)| (stack, &r.truth, &r.fov))
        .collect();
    let set = sample_training_set(&inputs, cfg.classifier.n_samples, cfg.classifier_seed())?;
    info!(
        "sampled {} pixels, vessel fraction {:.4}",
        set.len(),
        set.vessel_fraction()
    );
    let stats: Vec<_> = features.iter().map(|(_, s)| s.clone()).collect();
    let feature_stats = average_stats(&stats).expect("split has records");
    drop(inputs);
    drop(features);
    run.stage_done("sample");

    let model = train_bayes_model(
        &set,
        &cfg.em(),
        cfg.classifier.equal_priors,
        feature_stats,
        pipeline,
    )?;
    run.stage_done("em");

    run.write_output(MODEL_NAME, model.to_json().as_bytes())?;
    let model_path = run.path(MODEL_NAME);
    let run_dir = run.finish()?;
    Ok(TrainOutcome {
        run_dir,
        model_path,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub run_dir: PathBuf,
    pub segmentation: Segmentation,
}

/// Segment one image. Without a FOV mask the whole frame is used.
pub fn cmd_segment(
    cfg: &RunConfig,
    model: Option<&Path>,
    image: &Path,
    fov: Option<&Path>,
) -> Result<SegmentOutcome> {
    cfg.validate()?;
    let model_path = model_path(cfg, model)?;
    let model = BayesModel::load(&model_path)?;
    let pipeline = cfg.pipeline();
    check_model(&model, &pipeline)?;
    let img = load_image(image)?;
    let fov_mask = match fov {
        Some(p) => {
            let m = load_mask(p)?;
            if m.dims() != img.dims() {
                return Err(Error::dims(img.dims(), m.dims()));
            }
            m
        }
        None => {
            warn!("no FOV mask given; using the full frame");
            BinaryMask::filled(img.width(), img.height(), true)
        }
    };

    let run_dir = create_run_dir(&cfg.paths.output_dir)?;
    let mut run = Run::new("segment", cfg, run_dir);
    run.input(&model_path)?;
    run.input(image)?;
    if let Some(p) = fov {
        run.input(p)?;
    }
    let seg = segment_image(
        &model,
        &pipeline,
        cfg.classifier.normalization,
        &cfg.post,
        &img,
        &fov_mask,
    )?;
    run.stage_done("segment");

    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let names = [
        format!("{stem}_mask.png"),
        format!("{stem}_posterior.png"),
        format!("{stem}_overlay.png"),
    ];
    save_mask(run.path(&names[0]), &seg.mask)?;
    save_gray(run.path(&names[1]), &seg.posterior)?;
    save_rgb(run.path(&names[2]), &overlay(&img, &seg.mask))?;
    for n in &names {
        run.output(n)?;
    }
    run.stage_done("write");
    Ok(SegmentOutcome {
        run_dir: run.finish()?,
        segmentation: seg,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub report: Report,
    pub roc: RocCurve,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a Report,
    auc: f64,
}

fn posterior_name(id: &str) -> String {
    format!("{POSTERIOR_DIR}/{id}_posterior.png")
}

/// Segment every test record and score it against the manual annotation.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    model: Option<&Path>,
    dataset: Option<&Path>,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let model_path = model_path(cfg, model)?;
    let model = BayesModel::load(&model_path)?;
    let pipeline = cfg.pipeline();
    check_model(&model, &pipeline)?;
    let root = dataset_root(cfg, dataset)?;
    let split = discover_split(&root, SplitRole::Test)?;

    let run_dir = create_run_dir(&cfg.paths.output_dir)?;
    let mut run = Run::new("evaluate", cfg, run_dir);
    run.input(&model_path)?;
    run.record_inputs(&split.records)?;
    let loaded = load_records(&split.records)?;
    run.stage_done("load");

    let segs = loaded
        .par_iter()
        .map(|r| {
            segment_image(
                &model,
                &pipeline,
                cfg.classifier.normalization,
                &cfg.post,
                &r.image,
                &r.fov,
            )
            .map_err(|e| e.in_record(&r.id))
        })
        .collect::<Result<Vec<_>>>()?;
    run.stage_done("segment");

    create_dir_all(&run.path(POSTERIOR_DIR))?;
    create_dir_all(&run.path(SEGMENTATION_DIR))?;
    let mut roc = RocAccumulator::new(cfg.eval.roc_thresholds)?;
    let mut counts = Vec::with_capacity(loaded.len());
    for (r, seg) in loaded.iter().zip(&segs) {
        let c = confusion(&seg.mask, &r.truth, &r.fov).map_err(|e| e.in_record(&r.id))?;
        counts.push((r.id.clone(), c));
        roc.add(&seg.posterior, &r.truth, &r.fov)?;
        let post_name = posterior_name(&r.id);
        let mask_name = format!("{SEGMENTATION_DIR}/{}_mask.png", r.id);
        save_gray(run.path(&post_name), &seg.posterior)?;
        save_mask(run.path(&mask_name), &seg.mask)?;
        run.output(&post_name)?;
        run.output(&mask_name)?;
    }
    let report = aggregate_report(&counts)?;
    let roc = roc.finish();
    run.stage_done("metrics");

    info!(
        "pooled accuracy {:?}, mean accuracy {:?}, AUC {:.4}",
        report.pooled.accuracy, report.mean_accuracy, roc.auc
    );
    run.write_output("metrics.csv", report.to_csv().as_bytes())?;
    run.write_output("roc.csv", roc.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&ReportFile {
        report: &report,
        auc: roc.auc,
    })
    .expect("report serializes");
    run.write_output("report.json", format!("{json}\n").as_bytes())?;
    Ok(EvalOutcome {
        run_dir: run.finish()?,
        report,
        roc,
    })
}

/// Rebuild the pooled ROC from the posterior maps of an earlier
/// `evaluate` run.
pub fn cmd_roc(cfg: &RunConfig, eval_run: &Path, dataset: Option<&Path>) -> Result<RocCurve> {
    cfg.validate()?;
    let root = dataset_root(cfg, dataset)?;
    let split = discover_split(&root, SplitRole::Test)?;
    let run_dir = create_run_dir(&cfg.paths.output_dir)?;
    let mut run = Run::new("roc", cfg, run_dir);
    let mut acc = RocAccumulator::new(cfg.eval.roc_thresholds)?;
    for rec in &split.records {
        let post_path = eval_run.join(posterior_name(&rec.id));
        run.input(&post_path)?;
        run.input(&rec.fov)?;
        run.input(&rec.truth)?;
        let (prob, truth, fov) = (|| {
            let img = load_image(&post_path)?;
            let prob = GrayImage::from_vec(img.width(), img.height(), img.red().to_vec())?;
            let truth = load_mask(&rec.truth)?;
            let fov = load_mask(&rec.fov)?;
            Ok::<_, Error>((prob, truth, fov))
        })()
        .map_err(|e| e.in_record(&rec.id))?;
        acc.add(&prob, &truth, &fov)
            .map_err(|e| e.in_record(&rec.id))?;
    }
    let roc = acc.finish();
    run.stage_done("roc");
    info!("AUC {:.4}", roc.auc);
    run.write_output("roc.csv", roc.to_csv().as_bytes())?;
    run.finish()?;
    Ok(roc)
}

/// Write a phantom dataset in DRIVE layout: `training/` and `test/`, each
/// with `images/`, `mask/` and `1st_manual/`. Record numbers run on from
/// the training split into the test split.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let s = &cfg.synth;
    if s.n_train + s.n_test == 0 {
        return Err(Error::Config("synth needs at least one phantom".into()));
    }
    let mut run = Run::new("synth", cfg, out.to_path_buf());
    let seed = cfg.synth_seed();
    let jobs: Vec<(SplitRole, usize)> = (1..=s.n_train)
        .map(|i| (SplitRole::Train, i))
        .chain((s.n_train + 1..=s.n_train + s.n_test).map(|i| (SplitRole::Test, i)))
        .collect();
    for role in [SplitRole::Train, SplitRole::Test] {
        if jobs.iter().any(|(r, _)| *r == role) {
            for sub in [IMAGES_DIR, MASK_DIR, MANUAL_DIR] {
                create_dir_all(&out.join(role.dir_name()).join(sub))?;
            }
        }
    }
    let written = jobs
        .par_iter()
        .map(|&(role, i)| {
            let (img, truth, fov) =
                generate_phantom(s.width, s.height, s.n_vessels, seed.wrapping_add(i as u64))?;
            let split = role.dir_name();
            let files = [
                format!("{split}/{IMAGES_DIR}/{i:02}_phantom.png"),
                format!("{split}/{MASK_DIR}/{i:02}_phantom_mask.png"),
                format!("{split}/{MANUAL_DIR}/{i:02}_manual1.png"),
            ];
            save_rgb(out.join(&files[0]), &RgbImage::from_gray(&img))?;
            save_mask(out.join(&files[1]), &fov)?;
            save_mask(out.join(&files[2]), &truth)?;
            Ok(files)
        })
        .collect::<Result<Vec<_>>>()?;
    for f in written.iter().flatten() {
        run.output(f)?;
    }
    run.stage_done("synth");
    run.finish()
}

//! Run-directory orchestration: tie the dataset, the two training stages,
//! detection, patch extraction, and evaluation together behind a single
//! configuration, with provenance guards between every pair of artifacts.
//!
//! Layout of a run directory:
//!
//! ```text
//! runs/<name>/
//!   config.json              effective configuration
//!   folds.json               subject-level fold assignment
//!   fold<k>/
//!     stage1.ckpt, stage1.json, stage1_loss.csv
//!     detections_{train,test}.json
//!     bags/<image_id>.{bin,json}
//!     stage2[_dense].ckpt, stage2[_dense].json, stage2[_dense]_loss.csv
//!   eval[_dense]/report.json, roc.csv, froc.csv, predictions_fold<k>.json
//! ```

use crate::dataset::{load_manifest, load_sample};
use crate::detect::{detect, DetectionRecord, PostprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{
    classification_report, froc_curve, match_boxes, precision_recall, ClassificationReport,
    FoldPredictions, FrocPoint, MatchResult,
};
use crate::locnet::{LocLossConfig, LocNet, LocNetConfig};
use crate::mil::{MilNet, PatchEncoderConfig};
use crate::nn::io::{load_model, model_hash, save_model};
use crate::num::Scalar;
use crate::patches::{build_bag, load_bag, save_bag, BagMeta};
use crate::preprocess::{preprocess, AugmentationConfig, PreprocessedSample};
use crate::train::{
    dense_patch_bags, guard_same_fold, split_folds, subjects_hash, train_stage1, train_stage2,
    BagSource, EpochLog, FoldSplit, Stage1Schedule, Stage2Schedule, TrainProvenance,
};
use crate::types::{DatasetManifest, Label, PatchBag, SoftMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Everything a full run needs; every field has a paper-default value and
/// maps one-to-one onto a CLI flag and a config-file key.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub stage1: Stage1Schedule,
    pub locnet: LocNetConfig,
    pub loss: LocLossConfig,
    pub augment: AugmentationConfig,
    pub stage2: Stage2Schedule,
    pub encoder: PatchEncoderConfig,
    pub postprocess: PostprocessConfig,
    pub decision_threshold: f64,
    /// Number of evenly spaced FROC thresholds in `(0, 1)`.
    pub froc_thresholds: usize,
    pub dense_stride: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_folds: 5,
            seed: 0,
            deterministic: false,
            stage1: Stage1Schedule::default(),
            locnet: LocNetConfig::default(),
            loss: LocLossConfig::default(),
            augment: AugmentationConfig::default(),
            stage2: Stage2Schedule::default(),
            encoder: PatchEncoderConfig::default(),
            postprocess: PostprocessConfig::default(),
            decision_threshold: 0.5,
            froc_thresholds: 19,
            dense_stride: 8,
        }
    }
}

impl PipelineConfig {
    pub fn froc_threshold_list(&self) -> Vec<f64> {
        let n = self.froc_thresholds.max(1);
        (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
    }
}

/// Seed stream tags so each pipeline step draws independent randomness.
mod seed_tag {
    pub const FOLDS: u64 = 1;
    pub const STAGE1: u64 = 2;
    pub const EXTRACT: u64 = 3;
    pub const STAGE2: u64 = 4;
    pub const STAGE2_DENSE: u64 = 5;
}

fn derive_seed(base: u64, fold: usize, tag: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((fold as u64) << 8)
        .rotate_left(17)
        ^ tag
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        RunPaths {
            run_dir: run_dir.into(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.run_dir.join("config.json")
    }

    pub fn folds(&self) -> PathBuf {
        self.run_dir.join("folds.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.run_dir.join(format!("fold{fold}"))
    }

    pub fn stage1_ckpt(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("stage1.ckpt")
    }

    pub fn stage1_meta(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("stage1.json")
    }

    pub fn stage1_loss(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("stage1_loss.csv")
    }

    pub fn detections(&self, fold: usize, split: Split) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("detections_{}.json", split.name()))
    }

    pub fn bags_dir(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("bags")
    }

    fn stage2_stem(dense: bool) -> &'static str {
        if dense {
            "stage2_dense"
        } else {
            "stage2"
        }
    }

    pub fn stage2_ckpt(&self, fold: usize, dense: bool) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("{}.ckpt", Self::stage2_stem(dense)))
    }

    pub fn stage2_meta(&self, fold: usize, dense: bool) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("{}.json", Self::stage2_stem(dense)))
    }

    pub fn stage2_loss(&self, fold: usize, dense: bool) -> PathBuf {
        self.fold_dir(fold)
            .join(format!("{}_loss.csv", Self::stage2_stem(dense)))
    }

    pub fn eval_dir(&self, dense: bool) -> PathBuf {
        self.run_dir.join(if dense { "eval_dense" } else { "eval" })
    }
}

/// Sidecar for a Stage-1 checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Meta {
    pub locnet: LocNetConfig,
    pub loss: LocLossConfig,
    pub schedule: Stage1Schedule,
    pub augment: AugmentationConfig,
    pub provenance: TrainProvenance,
    pub param_hash: String,
    pub dtype: String,
    pub deterministic: bool,
}

/// Sidecar for a Stage-2 checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Meta {
    pub encoder: PatchEncoderConfig,
    pub schedule: Stage2Schedule,
    pub provenance: TrainProvenance,
    /// Hash of the Stage-1 checkpoint the training bags came from (absent
    /// for the dense ablation).
    pub stage1_hash: Option<String>,
    pub dense: bool,
    pub param_hash: String,
    pub dtype: String,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_loss_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::from("epoch,learning_rate,mean_loss,updates\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.epoch, l.learning_rate, l.mean_loss, l.updates
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the effective configuration into the run directory.
pub fn write_effective_config(paths: &RunPaths, cfg: &PipelineConfig) -> Result<()> {
    write_json(&paths.config(), cfg)
}

/// Load the fold assignment, creating and persisting it on first use.
pub fn load_or_create_folds(
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    paths: &RunPaths,
) -> Result<Vec<FoldSplit>> {
    let path = paths.folds();
    if path.exists() {
        let folds: Vec<FoldSplit> = read_json(&path)?;
        if folds.len() != cfg.n_folds {
            return Err(Error::config(format!(
                "existing folds.json has {} folds, run requests {}",
                folds.len(),
                cfg.n_folds
            )));
        }
        let mut all: BTreeSet<String> = BTreeSet::new();
        for f in &folds {
            all.extend(f.test_subjects.iter().cloned());
        }
        let manifest_subjects: BTreeSet<String> = manifest.subjects().into_iter().collect();
        if all != manifest_subjects {
            return Err(Error::Provenance(
                "folds.json subjects do not match the dataset".into(),
            ));
        }
        return Ok(folds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, seed_tag::FOLDS));
    let folds = split_folds(manifest, cfg.n_folds, &mut rng)?;
    write_json(&path, &folds)?;
    Ok(folds)
}

fn check_fold(fold: usize, n_folds: usize) -> Result<()> {
    if fold >= n_folds {
        return Err(Error::config(format!(
            "fold {fold} out of range (k = {n_folds})"
        )));
    }
    Ok(())
}

/// Load and preprocess every image whose subject belongs to `subjects`, in
/// manifest order.
pub fn preprocess_subjects<S: Scalar>(
    manifest: &DatasetManifest,
    subjects: &BTreeSet<String>,
) -> Result<Vec<PreprocessedSample<S>>> {
    let mut out = Vec::new();
    for sref in &manifest.samples {
        if subjects.contains(&sref.record.subject_id) {
            let sample = load_sample::<S>(manifest, sref)?;
            out.push(preprocess(&sample)?);
        }
    }
    Ok(out)
}

fn provenance_for(fold: &FoldSplit, n_folds: usize, seed: u64) -> TrainProvenance {
    TrainProvenance {
        fold_id: fold.fold_id,
        n_folds,
        train_subjects_hash: subjects_hash(&fold.train_subjects),
        seed,
    }
}

/// Train Stage 1 for one fold and persist checkpoint, sidecar, and loss
/// log.
pub fn run_train_stage1<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold: usize,
    cfg: &PipelineConfig,
) -> Result<Stage1Meta> {
    check_fold(fold, cfg.n_folds)?;
    let manifest = load_manifest(data_dir)?;
    let folds = load_or_create_folds(&manifest, cfg, paths)?;
    let samples = preprocess_subjects::<S>(&manifest, &folds[fold].train_subjects)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, seed_tag::STAGE1));
    let (mut net, logs) = train_stage1(
        &samples,
        &cfg.stage1,
        &cfg.locnet,
        &cfg.loss,
        &cfg.augment,
        &mut rng,
    )?;
    save_model(&mut net, &paths.stage1_ckpt(fold))?;
    let meta = Stage1Meta {
        locnet: cfg.locnet.clone(),
        loss: cfg.loss.clone(),
        schedule: cfg.stage1.clone(),
        augment: cfg.augment.clone(),
        provenance: provenance_for(&folds[fold], cfg.n_folds, cfg.seed),
        param_hash: model_hash(&mut net),
        dtype: S::DTYPE.to_string(),
        deterministic: cfg.deterministic,
    };
    write_json(&paths.stage1_meta(fold), &meta)?;
    write_loss_csv(&paths.stage1_loss(fold), &logs)?;
    Ok(meta)
}

/// Load a Stage-1 checkpoint and verify it belongs to the requested fold.
pub fn load_stage1<S: Scalar>(
    paths: &RunPaths,
    fold: usize,
    expected: &TrainProvenance,
) -> Result<(LocNet<S>, Stage1Meta)> {
    let meta: Stage1Meta = read_json(&paths.stage1_meta(fold)).map_err(|_| {
        Error::missing(format!(
            "stage-1 checkpoint for fold {fold}; run train-stage1 first"
        ))
    })?;
    guard_same_fold(expected, &meta.provenance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = LocNet::<S>::new(&meta.locnet, (crate::WORK_H, crate::WORK_W), &mut rng)?;
    load_model(&mut net, &paths.stage1_ckpt(fold))?;
    Ok((net, meta))
}

struct FoldData<S: Scalar> {
    samples: Vec<PreprocessedSample<S>>,
}

fn split_samples<S: Scalar>(
    manifest: &DatasetManifest,
    folds: &[FoldSplit],
    fold: usize,
    split: Split,
) -> Result<FoldData<S>> {
    let subjects = match split {
        Split::Train => &folds[fold].train_subjects,
        Split::Test => &folds[fold].test_subjects,
    };
    Ok(FoldData {
        samples: preprocess_subjects::<S>(manifest, subjects)?,
    })
}

/// Run detection over one split with the fold's Stage-1 checkpoint and
/// export the boxes.
pub fn run_detect<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold: usize,
    split: Split,
    cfg: &PipelineConfig,
) -> Result<Vec<DetectionRecord>> {
    check_fold(fold, cfg.n_folds)?;
    cfg.postprocess.validate()?;
    let manifest = load_manifest(data_dir)?;
    let folds = load_or_create_folds(&manifest, cfg, paths)?;
    let expected = provenance_for(&folds[fold], cfg.n_folds, cfg.seed);
    let (net, _) = load_stage1::<S>(paths, fold, &expected)?;
    let data = split_samples::<S>(&manifest, &folds, fold, split)?;
    let hash = cfg.postprocess.config_hash();
    let mut records = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let map = net.forward_softmap(&s.image)?;
        let boxes = detect(&map, &cfg.postprocess);
        records.push(DetectionRecord {
            image_id: s.image_id.clone(),
            boxes,
            threshold: cfg.postprocess.binarize_threshold,
            config_hash: hash.clone(),
        });
    }
    write_json(&paths.detections(fold, split), &records)?;
    Ok(records)
}

/// Build and cache the standard five-patch bags for both splits of one
/// fold, from that fold's own Stage-1 detections.
pub fn run_extract_patches<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold: usize,
    cfg: &PipelineConfig,
) -> Result<usize> {
    check_fold(fold, cfg.n_folds)?;
    let manifest = load_manifest(data_dir)?;
    let folds = load_or_create_folds(&manifest, cfg, paths)?;
    let expected = provenance_for(&folds[fold], cfg.n_folds, cfg.seed);
    let (net, meta) = load_stage1::<S>(paths, fold, &expected)?;
    let bags_dir = paths.bags_dir(fold);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, seed_tag::EXTRACT));
    let mut written = 0usize;
    for split in [Split::Train, Split::Test] {
        let data = split_samples::<S>(&manifest, &folds, fold, split)?;
        for s in &data.samples {
            let map = net.forward_softmap(&s.image)?;
            let boxes = detect(&map, &cfg.postprocess);
            let bag = build_bag(s, &boxes, &mut rng);
            let meta_record = BagMeta {
                image_id: bag.image_id.clone(),
                label: bag.label,
                n_patches: bag.len(),
                source_boxes: bag.source_boxes.clone(),
                fold_id: fold,
                split: split.name().to_string(),
                stage1_hash: meta.param_hash.clone(),
                dense: false,
            };
            save_bag(&bags_dir, &bag, &meta_record)?;
            written += 1;
        }
    }
    Ok(written)
}

fn load_cached_bags<S: Scalar>(
    paths: &RunPaths,
    fold: usize,
    split: Split,
    samples: &[PreprocessedSample<S>],
    stage1_hash: &str,
) -> Result<Vec<PatchBag<S>>> {
    let dir = paths.bags_dir(fold);
    let mut bags = Vec::with_capacity(samples.len());
    for s in samples {
        let (bag, meta) = load_bag::<S>(&dir, &s.image_id)
            .map_err(|e| Error::missing(format!("bag cache for `{}`: {e}", s.image_id)))?;
        if meta.fold_id != fold || meta.split != split.name() {
            return Err(Error::Provenance(format!(
                "bag `{}` belongs to fold {} split {}, expected fold {fold} split {}",
                s.image_id,
                meta.fold_id,
                meta.split,
                split.name()
            )));
        }
        if meta.stage1_hash != stage1_hash {
            return Err(Error::Provenance(format!(
                "bag `{}` was extracted with a different stage-1 checkpoint",
                s.image_id
            )));
        }
        bags.push(bag);
    }
    Ok(bags)
}

/// Train Stage 2 for one fold, either from the cached candidate-patch bags
/// (standard) or from dense stride-`dense_stride` bags (ablation).
pub fn run_train_stage2<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold: usize,
    cfg: &PipelineConfig,
    dense: bool,
) -> Result<Stage2Meta> {
    check_fold(fold, cfg.n_folds)?;
    let manifest = load_manifest(data_dir)?;
    let folds = load_or_create_folds(&manifest, cfg, paths)?;
    let expected = provenance_for(&folds[fold], cfg.n_folds, cfg.seed);
    let train = split_samples::<S>(&manifest, &folds, fold, Split::Train)?;

    let tag = if dense {
        seed_tag::STAGE2_DENSE
    } else {
        seed_tag::STAGE2
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, tag));

    let (net, logs, stage1_hash) = if dense {
        let source = BagSource::Dense {
            samples: &train.samples,
            stride: cfg.dense_stride,
        };
        let (net, logs) =
            train_stage2(&source, &cfg.stage2, &cfg.encoder, cfg.deterministic, &mut rng)?;
        (net, logs, None)
    } else {
        let meta1: Stage1Meta = read_json(&paths.stage1_meta(fold)).map_err(|_| {
            Error::missing(format!(
                "stage-2 training for fold {fold} needs a stage-1 checkpoint (or --dense)"
            ))
        })?;
        guard_same_fold(&expected, &meta1.provenance)?;
        let bags = load_cached_bags::<S>(paths, fold, Split::Train, &train.samples, &meta1.param_hash)?;
        let source = BagSource::Memory(&bags);
        let (net, logs) =
            train_stage2(&source, &cfg.stage2, &cfg.encoder, cfg.deterministic, &mut rng)?;
        (net, logs, Some(meta1.param_hash))
    };

    let mut net = net;
    save_model(&mut net, &paths.stage2_ckpt(fold, dense))?;
    let meta = Stage2Meta {
        encoder: cfg.encoder.clone(),
        schedule: cfg.stage2.clone(),
        provenance: provenance_for(&folds[fold], cfg.n_folds, cfg.seed),
        stage1_hash,
        dense,
        param_hash: model_hash(&mut net),
        dtype: S::DTYPE.to_string(),
        deterministic: cfg.deterministic,
    };
    write_json(&paths.stage2_meta(fold, dense), &meta)?;
    write_loss_csv(&paths.stage2_loss(fold, dense), &logs)?;
    Ok(meta)
}

/// Exported per-image prediction, mapping attention back to boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub label: Label,
    pub probability: f64,
    pub weights: Vec<f64>,
    pub boxes: Vec<crate::types::BoundingBox>,
}

/// Detection metrics for one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionFold {
    pub fold_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Detection metrics across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub per_fold: Vec<DetectionFold>,
    pub mean_precision: f64,
    pub std_precision: f64,
    pub mean_recall: f64,
    pub std_recall: f64,
}

/// Full evaluation output for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dense: bool,
    pub decision_threshold: f64,
    pub iou_threshold: f64,
    pub folds: Vec<usize>,
    pub detection: DetectionSummary,
    pub classification: ClassificationReport,
    pub froc: Vec<Vec<FrocPoint>>,
}

/// Per-fold evaluation products before aggregation.
pub struct FoldEval {
    pub fold_id: usize,
    pub matches: Vec<MatchResult>,
    pub froc: Vec<FrocPoint>,
    pub predictions: FoldPredictions,
    pub records: Vec<PredictionRecord>,
}

/// Evaluate one fold's test split end to end.
pub fn evaluate_fold<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold: usize,
    cfg: &PipelineConfig,
    dense: bool,
) -> Result<FoldEval> {
    check_fold(fold, cfg.n_folds)?;
    let manifest = load_manifest(data_dir)?;
    let folds = load_or_create_folds(&manifest, cfg, paths)?;
    let expected = provenance_for(&folds[fold], cfg.n_folds, cfg.seed);
    let test = split_samples::<S>(&manifest, &folds, fold, Split::Test)?;

    let meta2: Stage2Meta = read_json(&paths.stage2_meta(fold, dense)).map_err(|_| {
        Error::missing(format!(
            "stage-2 checkpoint for fold {fold} (dense = {dense}); run train-stage2 first"
        ))
    })?;
    guard_same_fold(&expected, &meta2.provenance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut mil = MilNet::<S>::new(&meta2.encoder, &mut rng)?;
    load_model(&mut mil, &paths.stage2_ckpt(fold, dense))?;

    // Stage 1 softmaps drive detection metrics, FROC, and standard bags.
    let mut matches = Vec::new();
    let mut softmaps: Vec<SoftMap<S>> = Vec::new();
    let (net1, meta1) = load_stage1::<S>(paths, fold, &expected)?;
    for s in &test.samples {
        softmaps.push(net1.forward_softmap(&s.image)?);
    }
    let mut detections = Vec::with_capacity(test.samples.len());
    for (s, map) in test.samples.iter().zip(&softmaps) {
        let boxes = detect(map, &cfg.postprocess);
        matches.push(match_boxes(&boxes, &s.gt_boxes, 0.5));
        detections.push(boxes);
    }
    let froc_items: Vec<(&SoftMap<S>, &[crate::types::BoundingBox])> = test
        .samples
        .iter()
        .zip(&softmaps)
        .map(|(s, m)| (m, s.gt_boxes.as_slice()))
        .collect();
    let froc = froc_curve(&froc_items, &cfg.froc_threshold_list());

    // Classification probabilities.
    let mut probabilities = Vec::with_capacity(test.samples.len());
    let mut labels = Vec::with_capacity(test.samples.len());
    let mut records = Vec::with_capacity(test.samples.len());
    let mut extract_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold, seed_tag::EXTRACT));
    for (i, s) in test.samples.iter().enumerate() {
        let bag = if dense {
            dense_patch_bags(s, cfg.dense_stride)
        } else {
            match load_bag::<S>(&paths.bags_dir(fold), &s.image_id) {
                Ok((bag, bmeta)) => {
                    if bmeta.stage1_hash != meta1.param_hash {
                        return Err(Error::Provenance(format!(
                            "cached bag `{}` does not match the fold's stage-1 checkpoint",
                            s.image_id
                        )));
                    }
                    bag
                }
                Err(_) => build_bag(s, &detections[i], &mut extract_rng),
            }
        };
        let out = mil.classify_patches(&bag.patches, cfg.deterministic)?;
        let p = out.probability.as_f64();
        probabilities.push(p);
        labels.push(s.label);
        records.push(PredictionRecord {
            image_id: s.image_id.clone(),
            label: s.label,
            probability: p,
            weights: out.weights.iter().map(|w| w.as_f64()).collect(),
            boxes: bag.source_boxes.clone(),
        });
    }

    Ok(FoldEval {
        fold_id: fold,
        matches,
        froc,
        predictions: FoldPredictions {
            probabilities,
            labels,
        },
        records,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Evaluate the given folds and write the aggregated report plus CSV and
/// prediction exports.
pub fn run_eval<S: Scalar>(
    data_dir: &Path,
    paths: &RunPaths,
    fold_ids: &[usize],
    cfg: &PipelineConfig,
    dense: bool,
) -> Result<EvalReport> {
    if fold_ids.is_empty() {
        return Err(Error::config("no folds requested for evaluation"));
    }
    let mut missing = Vec::new();
    for &f in fold_ids {
        if !paths.stage2_meta(f, dense).exists() {
            missing.push(f.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::missing(format!(
            "stage-2 checkpoints missing for fold(s): {}",
            missing.join(", ")
        )));
    }

    let mut fold_evals = Vec::with_capacity(fold_ids.len());
    for &f in fold_ids {
        fold_evals.push(evaluate_fold::<S>(data_dir, paths, f, cfg, dense)?);
    }

    let per_fold: Vec<DetectionFold> = fold_evals
        .iter()
        .map(|fe| {
            let (precision, recall) = precision_recall(fe.matches.iter());
            let (tp, fp, fn_count) = fe.matches.iter().fold((0, 0, 0), |acc, m| {
                (acc.0 + m.tp, acc.1 + m.fp, acc.2 + m.fn_count)
            });
            DetectionFold {
                fold_id: fe.fold_id,
                precision,
                recall,
                tp,
                fp,
                fn_count,
            }
        })
        .collect();
    let (mean_precision, std_precision) =
        mean_std(&per_fold.iter().map(|d| d.precision).collect::<Vec<_>>());
    let (mean_recall, std_recall) =
        mean_std(&per_fold.iter().map(|d| d.recall).collect::<Vec<_>>());

    let classification = classification_report(
        &fold_evals
            .iter()
            .map(|fe| fe.predictions.clone())
            .collect::<Vec<_>>(),
        cfg.decision_threshold,
    )?;

    let report = EvalReport {
        dense,
        decision_threshold: cfg.decision_threshold,
        iou_threshold: 0.5,
        folds: fold_ids.to_vec(),
        detection: DetectionSummary {
            per_fold,
            mean_precision,
            std_precision,
            mean_recall,
            std_recall,
        },
        classification,
        froc: fold_evals.iter().map(|fe| fe.froc.clone()).collect(),
    };

    let eval_dir = paths.eval_dir(dense);
    std::fs::create_dir_all(&eval_dir)?;
    write_json(&eval_dir.join("report.json"), &report)?;

    let mut roc_csv = String::from("fold,threshold,fpr,tpr\n");
    for (fe, roc) in fold_evals.iter().zip(&report.classification.roc) {
        for p in roc {
            roc_csv.push_str(&format!(
                "{},{},{},{}\n",
                fe.fold_id, p.threshold, p.fpr, p.tpr
            ));
        }
    }
    std::fs::write(eval_dir.join("roc.csv"), roc_csv)?;

    let mut froc_csv = String::from("fold,threshold,avg_fp_pixels_per_image,tp_pixel_fraction\n");
    for fe in &fold_evals {
        for p in &fe.froc {
            froc_csv.push_str(&format!(
                "{},{},{},{}\n",
                fe.fold_id, p.threshold, p.avg_fp_pixels_per_image, p.tp_pixel_fraction
            ));
        }
    }
    std::fs::write(eval_dir.join("froc.csv"), froc_csv)?;

    for fe in &fold_evals {
        write_json(
            &eval_dir.join(format!("predictions_fold{}.json", fe.fold_id)),
            &fe.records,
        )?;
    }
    Ok(report)
}

/// Preprocessing cache entry written by the `preprocess` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub image_id: String,
    pub subject_id: String,
    pub label: Label,
    pub gt_boxes: Vec<crate::types::BoundingBox>,
    pub crop_record: crate::preprocess::CropRecord,
}

/// Materialize deterministic preprocessing for inspection: a JSON record
/// per image plus a viewable PNG of the whitened image.
pub fn run_preprocess_cache<S: Scalar>(data_dir: &Path, out_dir: &Path) -> Result<usize> {
    let manifest = load_manifest(data_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let mut n = 0usize;
    for sref in &manifest.samples {
        let sample = load_sample::<S>(&manifest, sref)?;
        let pre = preprocess(&sample)?;
        let record = PreprocessRecord {
            image_id: pre.image_id.clone(),
            subject_id: pre.subject_id.clone(),
            label: pre.label,
            gt_boxes: pre.gt_boxes.clone(),
            crop_record: pre.crop_record.clone(),
        };
        write_json(&out_dir.join(format!("{}.json", pre.image_id)), &record)?;
        // Rescale to [0, 1] for viewing.
        let min = pre.image.iter().cloned().fold(S::infinity(), |a, b| a.min(b));
        let max = pre
            .image
            .iter()
            .cloned()
            .fold(S::neg_infinity(), |a, b| a.max(b));
        let range = (max - min).max(S::of_f64(1e-9));
        let view = pre.image.map(|&v| (v - min) / range);
        crate::dataset::save_image(&out_dir.join(format!("{}.png", pre.image_id)), &view)?;
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn froc_threshold_list_is_strictly_inside_unit_interval() {
        let cfg = PipelineConfig::default();
        let t = cfg.froc_threshold_list();
        assert_eq!(t.len(), 19);
        assert!(t.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(7, 0, seed_tag::STAGE1);
        let b = derive_seed(7, 0, seed_tag::STAGE2);
        let c = derive_seed(7, 1, seed_tag::STAGE1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fold_range_checked() {
        assert!(check_fold(5, 5).is_err());
        assert!(check_fold(4, 5).is_ok());
    }
}

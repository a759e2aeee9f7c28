//! Training loops and schedules for both stages, subject-level stratified
//! k-fold splitting, and the dense-patch ablation input.

use crate::error::{Error, Result};
use crate::locnet::{
    boxes_to_mask, composite_loss_batch_with_grad, LocLossConfig, LocNet, LocNetConfig,
};
use crate::mil::{oversample_schedule, MilNet, PatchEncoderConfig};
use crate::nn::sgd::Sgd;
use crate::num::Scalar;
use crate::preprocess::{AugmentParams, AugmentationConfig, PreprocessedSample};
use crate::types::{BoundingBox, DatasetManifest, Label, PatchBag};
use crate::{PATCH_SIZE, WORK_H, WORK_W};
use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

/// Stage-1 optimization schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub updates_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
}

impl Default for Stage1Schedule {
    fn default() -> Self {
        Stage1Schedule {
            epochs: 300,
            batch_size: 8,
            updates_per_epoch: 36,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![50, 200, 250],
        }
    }
}

fn validate_decay(epochs: usize, decay: &[usize]) -> Result<()> {
    for w in decay.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::config("lr decay epochs must be strictly increasing"));
        }
    }
    if let Some(&last) = decay.last() {
        if last >= epochs {
            return Err(Error::config(format!(
                "lr decay epoch {last} must be below the epoch count {epochs}"
            )));
        }
    }
    Ok(())
}

fn lr_at(epoch: usize, base: f64, factor: f64, decay: &[usize]) -> f64 {
    let k = decay.iter().filter(|&&d| epoch > d).count();
    base * factor.powi(k as i32)
}

impl Stage1Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.updates_per_epoch == 0 {
            return Err(Error::config("stage-1 schedule has a zero count"));
        }
        validate_decay(self.epochs, &self.lr_decay_epochs)
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.learning_rate, self.lr_decay_factor, &self.lr_decay_epochs)
    }
}

/// Stage-2 optimization schedule. Each update consumes all patches of one
/// image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub oversample_ratio: f64,
    /// Upper bound on patches per update; oversized bags are subsampled
    /// afresh at each presentation. `None` keeps full bags.
    pub max_bag_size: Option<usize>,
}

impl Default for Stage2Schedule {
    fn default() -> Self {
        Stage2Schedule {
            epochs: 100,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![50],
            oversample_ratio: 1.0,
            max_bag_size: None,
        }
    }
}

impl Stage2Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("stage-2 schedule has zero epochs"));
        }
        if self.oversample_ratio <= 0.0 {
            return Err(Error::config("oversample ratio must be positive"));
        }
        validate_decay(self.epochs, &self.lr_decay_epochs)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.learning_rate, self.lr_decay_factor, &self.lr_decay_epochs)
    }
}

/// One cross-validation fold: disjoint train/test subject sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    /// `(benign, malignant)` image counts in the test subjects.
    pub test_counts: (usize, usize),
    /// `(benign, malignant)` image counts in the train subjects.
    pub train_counts: (usize, usize),
}

#[derive(Debug, Clone)]
struct SubjectInfo {
    id: String,
    label: Label,
    benign_images: usize,
    malignant_images: usize,
}

impl SubjectInfo {
    fn images(&self) -> usize {
        self.benign_images + self.malignant_images
    }
}

fn subject_infos(manifest: &DatasetManifest) -> Vec<SubjectInfo> {
    let mut map: BTreeMap<String, SubjectInfo> = BTreeMap::new();
    for s in &manifest.samples {
        let e = map
            .entry(s.record.subject_id.clone())
            .or_insert_with(|| SubjectInfo {
                id: s.record.subject_id.clone(),
                label: Label::Benign,
                benign_images: 0,
                malignant_images: 0,
            });
        match s.record.label {
            Label::Benign => e.benign_images += 1,
            Label::Malignant => {
                e.malignant_images += 1;
                // A subject with any malignant image stratifies as
                // malignant.
                e.label = Label::Malignant;
            }
        }
    }
    map.into_values().collect()
}

/// Worst absolute deviation of any fold's malignant-image count from the
/// globally proportional share of its size.
fn stratification_deviation(assign: &[usize], subjects: &[SubjectInfo], k: usize) -> f64 {
    let total_m: usize = subjects.iter().map(|s| s.malignant_images).sum();
    let total: usize = subjects.iter().map(|s| s.images()).sum();
    if total == 0 {
        return 0.0;
    }
    let p = total_m as f64 / total as f64;
    let mut m = vec![0usize; k];
    let mut n = vec![0usize; k];
    for (s, &f) in subjects.iter().zip(assign) {
        m[f] += s.malignant_images;
        n[f] += s.images();
    }
    (0..k)
        .map(|f| (m[f] as f64 - n[f] as f64 * p).abs())
        .fold(0.0, f64::max)
}

/// Stratified subject-level split: subjects are shuffled, dealt
/// size-balanced per class into `k` folds, then locally repaired until each
/// fold's class mix stays within two images of the global proportion.
pub fn split_folds<R: Rng>(
    manifest: &DatasetManifest,
    k: usize,
    rng: &mut R,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    let mut subjects = subject_infos(manifest);
    if subjects.len() < k {
        return Err(Error::config(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    // Shuffle, then order classes separately by size (stable, so equal-size
    // subjects keep their shuffled order).
    for i in (1..subjects.len()).rev() {
        subjects.swap(i, rng.gen_range(0..=i));
    }
    subjects.sort_by_key(|s| (s.label, std::cmp::Reverse(s.images())));

    let mut class_counts = vec![(0usize, 0usize); k]; // (benign, malignant) images
    let mut totals = vec![0usize; k];
    let mut subject_counts = vec![0usize; k];
    let mut assign = vec![0usize; subjects.len()];
    for (i, s) in subjects.iter().enumerate() {
        let key = |f: usize| {
            let c = match s.label {
                Label::Benign => class_counts[f].0,
                Label::Malignant => class_counts[f].1,
            };
            (c, totals[f], subject_counts[f], f)
        };
        let fold = (0..k).min_by_key(|&f| key(f)).unwrap();
        assign[i] = fold;
        class_counts[fold].0 += s.benign_images;
        class_counts[fold].1 += s.malignant_images;
        totals[fold] += s.images();
        subject_counts[fold] += 1;
    }

    // Local repair: single moves and pair swaps while stratification
    // deviates by more than two images (and no fold empties out).
    let mut best = stratification_deviation(&assign, &subjects, k);
    for _ in 0..200 {
        if best <= 2.0 {
            break;
        }
        let mut improved = false;
        let mut fold_sizes = vec![0usize; k];
        for &f in &assign {
            fold_sizes[f] += 1;
        }
        let mut best_change: Option<(f64, usize, usize)> = None;
        for i in 0..subjects.len() {
            let orig = assign[i];
            if fold_sizes[orig] <= 1 {
                continue;
            }
            for f in 0..k {
                if f == orig {
                    continue;
                }
                assign[i] = f;
                let d = stratification_deviation(&assign, &subjects, k);
                if d < best_change.map_or(best, |(bd, _, _)| bd) {
                    best_change = Some((d, i, f));
                }
                assign[i] = orig;
            }
        }
        if let Some((d, i, f)) = best_change {
            if d < best {
                assign[i] = f;
                best = d;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    let mut folds: Vec<FoldSplit> = (0..k)
        .map(|fold_id| FoldSplit {
            fold_id,
            train_subjects: BTreeSet::new(),
            test_subjects: BTreeSet::new(),
            test_counts: (0, 0),
            train_counts: (0, 0),
        })
        .collect();
    for (s, &f) in subjects.iter().zip(&assign) {
        for (fold_id, fold) in folds.iter_mut().enumerate() {
            if fold_id == f {
                fold.test_subjects.insert(s.id.clone());
                fold.test_counts.0 += s.benign_images;
                fold.test_counts.1 += s.malignant_images;
            } else {
                fold.train_subjects.insert(s.id.clone());
                fold.train_counts.0 += s.benign_images;
                fold.train_counts.1 += s.malignant_images;
            }
        }
    }
    Ok(folds)
}

/// Checkpoint provenance recorded with every trained artifact; the guards
/// compare these to prevent cross-fold leakage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub fold_id: usize,
    pub n_folds: usize,
    pub train_subjects_hash: String,
    pub seed: u64,
}

pub fn subjects_hash(subjects: &BTreeSet<String>) -> String {
    let mut h = Sha256::new();
    for s in subjects {
        h.update(s.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..16])
}

/// Error unless two provenance records describe the same fold of the same
/// split.
pub fn guard_same_fold(expected: &TrainProvenance, actual: &TrainProvenance) -> Result<()> {
    if expected.fold_id != actual.fold_id
        || expected.n_folds != actual.n_folds
        || expected.train_subjects_hash != actual.train_subjects_hash
    {
        return Err(Error::Provenance(format!(
            "artifact was built for fold {}/{} (subjects {}), expected fold {}/{} (subjects {})",
            actual.fold_id,
            actual.n_folds,
            actual.train_subjects_hash,
            expected.fold_id,
            expected.n_folds,
            expected.train_subjects_hash
        )));
    }
    Ok(())
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub updates: usize,
}

/// Train the localization network on the fold's preprocessed training
/// samples. Each update draws `batch_size` images uniformly with
/// replacement, augments them, and rasterizes their boxes as the target.
pub fn train_stage1<S: Scalar, R: Rng>(
    samples: &[PreprocessedSample<S>],
    schedule: &Stage1Schedule,
    net_cfg: &LocNetConfig,
    loss_cfg: &LocLossConfig,
    aug_cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(LocNet<S>, Vec<EpochLog>)> {
    schedule.validate()?;
    loss_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("stage-1 training set is empty"));
    }
    let mut net = LocNet::new(net_cfg, (WORK_H, WORK_W), rng)?;
    let mut opt = Sgd::new(schedule.weight_decay, schedule.momentum);
    let mut logs = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..schedule.updates_per_epoch {
            let mut batch = Array4::zeros((schedule.batch_size, 1, WORK_H, WORK_W));
            let mut targets = Vec::with_capacity(schedule.batch_size);
            for b in 0..schedule.batch_size {
                let s = &samples[rng.gen_range(0..samples.len())];
                let aug = crate::preprocess::augment(s, aug_cfg, rng)?;
                batch
                    .index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&aug.image);
                targets.push(boxes_to_mask(&aug.gt_boxes, (WORK_H, WORK_W)));
            }
            crate::nn::zero_grads(&mut net);
            let (probs, cache) = net.forward_train(&batch)?;
            let (loss, grad) = composite_loss_batch_with_grad(&probs, &targets, loss_cfg)?;
            net.backward(&cache, &grad);
            opt.step(&mut net, lr);
            loss_sum += loss;
        }
        logs.push(EpochLog {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / schedule.updates_per_epoch as f64,
            updates: schedule.updates_per_epoch,
        });
        log::info!(
            "stage1 epoch {epoch}/{}: lr {lr:.2e}, loss {:.5}",
            schedule.epochs,
            logs.last().unwrap().mean_loss
        );
    }
    Ok((net, logs))
}

/// Augmentation applied to repeated (oversampled) patch presentations.
pub fn patch_augment_config(seed: u64) -> AugmentationConfig {
    AugmentationConfig {
        enable_flips: true,
        max_translate_frac: 0.05,
        max_scale_frac: 0.1,
        max_rotation_deg: 30.0,
        rng_seed: seed,
    }
}

fn augment_patch<S: Scalar, R: Rng>(
    patch: &Array2<S>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Array2<S> {
    let (h, w) = patch.dim();
    let params = AugmentParams::draw(cfg, rng, w, h);
    crate::preprocess::warp_patch(patch, params)
}

/// Where Stage-2 training bags come from. Dense bags are rebuilt per
/// presentation rather than held in memory.
pub enum BagSource<'a, S: Scalar> {
    Memory(&'a [PatchBag<S>]),
    Dense {
        samples: &'a [PreprocessedSample<S>],
        stride: usize,
    },
}

impl<S: Scalar> BagSource<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            BagSource::Memory(b) => b.len(),
            BagSource::Dense { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<(String, Label)> {
        match self {
            BagSource::Memory(b) => b.iter().map(|x| (x.image_id.clone(), x.label)).collect(),
            BagSource::Dense { samples, .. } => samples
                .iter()
                .map(|s| (s.image_id.clone(), s.label))
                .collect(),
        }
    }

    pub fn bag(&self, idx: usize) -> PatchBag<S> {
        match self {
            BagSource::Memory(b) => b[idx].clone(),
            BagSource::Dense { samples, stride } => dense_patch_bags(&samples[idx], *stride),
        }
    }
}

/// Train the MIL classifier. One update per bag presentation per epoch,
/// order shuffled each epoch, malignant bags oversampled; repeated
/// presentations see freshly augmented patches.
pub fn train_stage2<S: Scalar, R: Rng>(
    source: &BagSource<S>,
    schedule: &Stage2Schedule,
    encoder_cfg: &PatchEncoderConfig,
    deterministic: bool,
    rng: &mut R,
) -> Result<(MilNet<S>, Vec<EpochLog>)> {
    schedule.validate()?;
    if source.is_empty() {
        return Err(Error::validation("stage-2 training set is empty"));
    }
    let mut net = MilNet::new(encoder_cfg, rng)?;
    let mut opt = Sgd::new(schedule.weight_decay, schedule.momentum);
    let labels = source.labels();
    let aug_cfg = patch_augment_config(0);
    let mut logs = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let seq = oversample_schedule(&labels, schedule.oversample_ratio, rng)?;
        let mut loss_sum = 0.0;
        for entry in &seq {
            let bag = source.bag(entry.index);
            let mut patches: Vec<Array2<S>> = if entry.repetition > 0 {
                bag.patches
                    .iter()
                    .map(|p| augment_patch(p, &aug_cfg, rng))
                    .collect()
            } else {
                bag.patches
            };
            if let Some(cap) = schedule.max_bag_size {
                if patches.len() > cap {
                    // Fresh uniform subsample at each presentation.
                    for i in 0..cap {
                        let j = rng.gen_range(i..patches.len());
                        patches.swap(i, j);
                    }
                    patches.truncate(cap);
                }
            }
            crate::nn::zero_grads(&mut net);
            let (loss, _) = net.train_step(&patches, bag.label, deterministic)?;
            opt.step(&mut net, lr);
            loss_sum += loss;
        }
        logs.push(EpochLog {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / seq.len().max(1) as f64,
            updates: seq.len(),
        });
        log::info!(
            "stage2 epoch {epoch}/{}: lr {lr:.2e}, loss {:.5}",
            schedule.epochs,
            logs.last().unwrap().mean_loss
        );
    }
    Ok((net, logs))
}

/// All 64x64 windows at the given stride whose center pixel lies in the
/// breast foreground. Falls back to the single centered window when the
/// foreground is empty.
pub fn dense_patch_bags<S: Scalar>(sample: &PreprocessedSample<S>, stride: usize) -> PatchBag<S> {
    let (h, w) = sample.image.dim();
    let stride = stride.max(1);
    let mut patches = Vec::new();
    let mut source_boxes = Vec::new();
    let mut y = 0usize;
    while y + PATCH_SIZE <= h {
        let mut x = 0usize;
        while x + PATCH_SIZE <= w {
            let (cy, cx) = (y + PATCH_SIZE / 2, x + PATCH_SIZE / 2);
            if sample.foreground[[cy, cx]] {
                patches.push(
                    sample
                        .image
                        .slice(ndarray::s![y..y + PATCH_SIZE, x..x + PATCH_SIZE])
                        .to_owned(),
                );
                source_boxes.push(BoundingBox {
                    x_min: x as u32,
                    y_min: y as u32,
                    x_max: (x + PATCH_SIZE) as u32,
                    y_max: (y + PATCH_SIZE) as u32,
                });
            }
            x += stride;
        }
        y += stride;
    }
    if patches.is_empty() {
        let y0 = (h - PATCH_SIZE) / 2;
        let x0 = (w - PATCH_SIZE) / 2;
        patches.push(
            sample
                .image
                .slice(ndarray::s![y0..y0 + PATCH_SIZE, x0..x0 + PATCH_SIZE])
                .to_owned(),
        );
        source_boxes.push(BoundingBox {
            x_min: x0 as u32,
            y_min: y0 as u32,
            x_max: (x0 + PATCH_SIZE) as u32,
            y_max: (y0 + PATCH_SIZE) as u32,
        });
    }
    PatchBag {
        patches,
        label: sample.label,
        image_id: sample.image_id.clone(),
        source_boxes,
    }
}

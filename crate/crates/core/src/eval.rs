//! Detection and classification metrics: box matching at an IoU threshold,
//! precision/recall, pixel-level FROC, ROC/AUC, and the per-fold
//! classification report.

use crate::error::{Error, Result};
use crate::locnet::boxes_to_mask;
use crate::num::Scalar;
use crate::types::{BoundingBox, Label, SoftMap};
use serde::{Deserialize, Serialize};

/// Intersection over union of two half-open boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Match counts for one image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// Matched `(pred_index, gt_index, iou)` pairs.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching in descending IoU order; a pair is eligible
/// when its IoU exceeds `iou_thresh` strictly.
pub fn match_boxes(
    pred: &[BoundingBox],
    gt: &[BoundingBox],
    iou_thresh: f64,
) -> MatchResult {
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(p, g);
            if v > iou_thresh {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let mut used_pred = vec![false; pred.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (i, j, v) in candidates {
        if !used_pred[i] && !used_gt[j] {
            used_pred[i] = true;
            used_gt[j] = true;
            pairs.push((i, j, v));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_count: gt.len() - tp,
        pairs,
    }
}

/// Micro-averaged precision and recall over per-image match results. Zero
/// denominators yield 0 with a logged warning.
pub fn precision_recall<'a, I>(results: I) -> (f64, f64)
where
    I: IntoIterator<Item = &'a MatchResult>,
{
    let (mut tp, mut fp, mut fn_count) = (0usize, 0usize, 0usize);
    for r in results {
        tp += r.tp;
        fp += r.fp;
        fn_count += r.fn_count;
    }
    let precision = if tp + fp == 0 {
        log::warn!("precision undefined (no predictions); reporting 0");
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_count == 0 {
        log::warn!("recall undefined (no ground-truth boxes); reporting 0");
        0.0
    } else {
        tp as f64 / (tp + fn_count) as f64
    };
    (precision, recall)
}

/// One operating point of the pixel-level FROC curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub avg_fp_pixels_per_image: f64,
    pub tp_pixel_fraction: f64,
}

/// Pixel-level FROC: at each threshold, TP pixels are predicted-positive
/// pixels inside any GT box and FP pixels those outside all. The y-value
/// pools TP pixels over all images against the total GT-box pixel count;
/// the x-value is the mean FP pixel count per image. Images without GT
/// boxes contribute false positives only.
pub fn froc_curve<S: Scalar>(
    items: &[(&SoftMap<S>, &[BoundingBox])],
    thresholds: &[f64],
) -> Vec<FrocPoint> {
    let mut sorted: Vec<f64> = thresholds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let t = sorted.len();
    // bucket[k] counts pixels for which exactly k thresholds are <= p, so
    // the pixel is predicted positive at thresholds with index < k.
    let mut tp_at = vec![0u64; t];
    let mut fp_at = vec![0u64; t];
    let mut total_gt_pixels = 0u64;
    let n_images = items.len();
    for (map, boxes) in items {
        let shape = map.shape();
        let gt = boxes_to_mask(boxes, shape);
        total_gt_pixels += gt.iter().filter(|&&b| b).count() as u64;
        let mut in_bucket = vec![0u64; t + 1];
        let mut out_bucket = vec![0u64; t + 1];
        for (&p, &g) in map.probs.iter().zip(gt.iter()) {
            let pf = p.as_f64();
            let k = sorted.partition_point(|&th| th <= pf);
            if g {
                in_bucket[k] += 1;
            } else {
                out_bucket[k] += 1;
            }
        }
        // positives at threshold index i = sum of buckets with k > i.
        let mut in_suffix = 0u64;
        let mut out_suffix = 0u64;
        for i in (0..t).rev() {
            in_suffix += in_bucket[i + 1];
            out_suffix += out_bucket[i + 1];
            tp_at[i] += in_suffix;
            fp_at[i] += out_suffix;
        }
    }
    if total_gt_pixels == 0 {
        log::warn!("FROC over images without any GT boxes: TP fraction is 0 everywhere");
    }
    sorted
        .iter()
        .enumerate()
        .map(|(i, &threshold)| FrocPoint {
            threshold,
            avg_fp_pixels_per_image: if n_images == 0 {
                0.0
            } else {
                fp_at[i] as f64 / n_images as f64
            },
            tp_pixel_fraction: if total_gt_pixels == 0 {
                0.0
            } else {
                tp_at[i] as f64 / total_gt_pixels as f64
            },
        })
        .collect()
}

/// One point of the ROC curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC via a threshold sweep over the unique scores, and AUC by the
/// trapezoidal rule. Errors when only one class is present.
pub fn roc_auc(probabilities: &[f64], labels: &[Label]) -> Result<(Vec<RocPoint>, f64)> {
    if probabilities.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| **l == Label::Malignant).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation(
            "ROC needs both classes present".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .partial_cmp(&probabilities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let score = probabilities[order[i]];
        // Consume the whole tie group at once so ties produce one diagonal
        // segment.
        while i < order.len() && probabilities[order[i]] == score {
            match labels[order[i]] {
                Label::Malignant => tp += 1,
                Label::Benign => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

/// AUC as the Mann-Whitney pair statistic with ties counted one half.
pub fn mann_whitney_auc(probabilities: &[f64], labels: &[Label]) -> Result<f64> {
    let pos: Vec<f64> = probabilities
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == Label::Malignant)
        .map(|(p, _)| *p)
        .collect();
    let neg: Vec<f64> = probabilities
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == Label::Benign)
        .map(|(p, _)| *p)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::validation(
            "Mann-Whitney AUC needs both classes present".to_string(),
        ));
    }
    let mut s = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(s / (pos.len() as f64 * neg.len() as f64))
}

/// Threshold metrics for one fold.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
    pub auc: f64,
}

/// Classification metrics per fold plus mean and sample standard deviation
/// across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub decision_threshold: f64,
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
    pub roc: Vec<Vec<RocPoint>>,
}

/// Predictions for one fold's test split.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub probabilities: Vec<f64>,
    pub labels: Vec<Label>,
}

/// Compute sensitivity, specificity, balanced accuracy (at the decision
/// threshold, predicting malignant when `p >= threshold`) and AUC per fold,
/// then mean and sample standard deviation across folds.
pub fn classification_report(
    folds: &[FoldPredictions],
    decision_threshold: f64,
) -> Result<ClassificationReport> {
    if folds.is_empty() {
        return Err(Error::validation("no folds to evaluate"));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut rocs = Vec::with_capacity(folds.len());
    for f in folds {
        let (mut tp, mut tn, mut fp, mut fn_count) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &l) in f.probabilities.iter().zip(&f.labels) {
            let predicted_malignant = p >= decision_threshold;
            match (l, predicted_malignant) {
                (Label::Malignant, true) => tp += 1,
                (Label::Malignant, false) => fn_count += 1,
                (Label::Benign, true) => fp += 1,
                (Label::Benign, false) => tn += 1,
            }
        }
        let sensitivity = if tp + fn_count == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_count) as f64
        };
        let specificity = if tn + fp == 0 {
            0.0
        } else {
            tn as f64 / (tn + fp) as f64
        };
        let (roc, auc) = roc_auc(&f.probabilities, &f.labels)?;
        rocs.push(roc);
        per_fold.push(FoldMetrics {
            sensitivity,
            specificity,
            balanced_accuracy: (sensitivity + specificity) / 2.0,
            auc,
        });
    }
    let n = per_fold.len() as f64;
    let mean_of = |get: fn(&FoldMetrics) -> f64| per_fold.iter().map(get).sum::<f64>() / n;
    let mean = FoldMetrics {
        sensitivity: mean_of(|m| m.sensitivity),
        specificity: mean_of(|m| m.specificity),
        balanced_accuracy: mean_of(|m| m.balanced_accuracy),
        auc: mean_of(|m| m.auc),
    };
    let std_of = |get: fn(&FoldMetrics) -> f64, mu: f64| {
        if per_fold.len() < 2 {
            0.0
        } else {
            (per_fold.iter().map(|m| (get(m) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let std = FoldMetrics {
        sensitivity: std_of(|m| m.sensitivity, mean.sensitivity),
        specificity: std_of(|m| m.specificity, mean.specificity),
        balanced_accuracy: std_of(|m| m.balanced_accuracy, mean.balanced_accuracy),
        auc: std_of(|m| m.auc, mean.auc),
    };
    Ok(ClassificationReport {
        decision_threshold,
        folds: per_fold,
        mean,
        std,
        roc: rocs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20, 20, 30, 30)), 0.0);
        let b = bb(5, 0, 15, 10);
        // Rasterization oracle.
        let mut inter = 0u32;
        let mut union = 0u32;
        for y in 0..20u32 {
            for x in 0..20u32 {
                let ia = a.contains_pixel(x, y);
                let ib = b.contains_pixel(x, y);
                inter += u32::from(ia && ib);
                union += u32::from(ia || ib);
            }
        }
        assert_eq!(iou(&a, &b), f64::from(inter) / f64::from(union));
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_bounded_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ax = rng.gen_range(0..50);
            let ay = rng.gen_range(0..50);
            let a = bb(ax, ay, rng.gen_range(ax + 1..60), rng.gen_range(ay + 1..60));
            let bx = rng.gen_range(0..50);
            let by = rng.gen_range(0..50);
            let b = bb(bx, by, rng.gen_range(bx + 1..60), rng.gen_range(by + 1..60));
            let v = iou(&a, &b);
            assert_eq!(v, iou(&b, &a));
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v == 1.0, a == b);
        }
    }

    #[test]
    fn match_examples() {
        let g = vec![bb(0, 0, 10, 10)];
        let m = match_boxes(&g, &g, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_count), (1, 0, 0));

        let m = match_boxes(&[bb(0, 0, 5, 5)], &[], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_count), (0, 1, 0));

        let m = match_boxes(&[], &g, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_count), (0, 0, 1));
    }

    /// Exhaustive assignment oracle: maximize matched pairs, then total IoU.
    fn oracle_match(pred: &[BoundingBox], gt: &[BoundingBox], thresh: f64) -> (usize, f64) {
        fn rec(
            i: usize,
            used: &mut Vec<bool>,
            pred: &[BoundingBox],
            gt: &[BoundingBox],
            thresh: f64,
        ) -> (usize, f64) {
            if i == pred.len() {
                return (0, 0.0);
            }
            // Option: leave pred i unmatched.
            let mut best = rec(i + 1, used, pred, gt, thresh);
            for j in 0..gt.len() {
                if !used[j] {
                    let v = iou(&pred[i], &gt[j]);
                    if v > thresh {
                        used[j] = true;
                        let (c, s) = rec(i + 1, used, pred, gt, thresh);
                        used[j] = false;
                        if c + 1 > best.0 || (c + 1 == best.0 && s + v > best.1) {
                            best = (c + 1, s + v);
                        }
                    }
                }
            }
            best
        }
        rec(0, &mut vec![false; gt.len()], pred, gt, thresh)
    }

    fn random_disjoint_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
        // Disjoint ground-truth boxes, as produced by the phantom generator.
        let mut out: Vec<BoundingBox> = Vec::new();
        let mut attempts = 0;
        while out.len() < n && attempts < 200 {
            attempts += 1;
            let x0 = rng.gen_range(0..80);
            let y0 = rng.gen_range(0..80);
            let b = bb(
                x0,
                y0,
                x0 + rng.gen_range(4..20),
                y0 + rng.gen_range(4..20),
            );
            if out.iter().all(|o| o.intersection_area(&b) == 0) {
                out.push(b);
            }
        }
        out
    }

    #[test]
    fn greedy_matching_equals_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n_gt = rng.gen_range(0..=4);
            let gt = random_disjoint_boxes(&mut rng, n_gt);
            // Predictions jitter the GTs plus random noise boxes.
            let mut pred = Vec::new();
            for g in &gt {
                if rng.gen_bool(0.8) {
                    let dx = rng.gen_range(0..4);
                    let dy = rng.gen_range(0..4);
                    pred.push(bb(g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy));
                }
            }
            while pred.len() < 4 && rng.gen_bool(0.5) {
                let x0 = rng.gen_range(0..90);
                let y0 = rng.gen_range(0..90);
                pred.push(bb(x0, y0, x0 + rng.gen_range(3..15), y0 + rng.gen_range(3..15)));
            }
            let m = match_boxes(&pred, &gt, 0.5);
            let (oc, os) = oracle_match(&pred, &gt, 0.5);
            assert_eq!(m.tp, oc, "pred {pred:?} gt {gt:?}");
            let greedy_sum: f64 = m.pairs.iter().map(|p| p.2).sum();
            assert!((greedy_sum - os).abs() < 1e-9);
        }
    }

    #[test]
    fn precision_recall_examples() {
        let r = MatchResult {
            tp: 3,
            fp: 1,
            fn_count: 2,
            pairs: vec![],
        };
        let (p, rec) = precision_recall([&r]);
        assert_eq!((p, rec), (0.75, 0.6));

        let empty = MatchResult {
            tp: 0,
            fp: 0,
            fn_count: 1,
            pairs: vec![],
        };
        let (p, rec) = precision_recall([&empty]);
        assert_eq!((p, rec), (0.0, 0.0));

        let perfect = MatchResult {
            tp: 4,
            fp: 0,
            fn_count: 0,
            pairs: vec![],
        };
        let (p, rec) = precision_recall([&perfect]);
        assert_eq!((p, rec), (1.0, 1.0));
    }

    #[test]
    fn froc_extremes_and_hand_count() {
        let probs = ndarray::arr2(&[
            [0.9, 0.8, 0.1, 0.0],
            [0.7, 0.6, 0.2, 0.0],
            [0.1, 0.1, 0.55, 0.0],
            [0.0, 0.0, 0.0, 0.45],
        ]);
        let map = SoftMap::new(probs).unwrap();
        let boxes = vec![bb(0, 0, 2, 2)];
        let items = vec![(&map, boxes.as_slice())];

        let pts = froc_curve(&items, &[0.0, 0.5, 1.1]);
        // threshold 0: everything predicted.
        assert_eq!(pts[0].tp_pixel_fraction, 1.0);
        assert_eq!(pts[0].avg_fp_pixels_per_image, 12.0);
        // threshold 0.5: inside-box pixels >= 0.5 are (0,0),(0,1),(1,0),(1,1)
        // -> all 4; outside >= 0.5: the 0.55 pixel only.
        assert_eq!(pts[1].tp_pixel_fraction, 1.0);
        assert_eq!(pts[1].avg_fp_pixels_per_image, 1.0);
        // threshold above 1: nothing predicted.
        assert_eq!(pts[2].tp_pixel_fraction, 0.0);
        assert_eq!(pts[2].avg_fp_pixels_per_image, 0.0);
    }

    #[test]
    fn froc_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps: Vec<SoftMap<f64>> = (0..3)
            .map(|_| SoftMap::new(Array2::from_shape_fn((16, 16), |_| rng.gen())).unwrap())
            .collect();
        let boxes: Vec<Vec<BoundingBox>> = vec![
            vec![bb(2, 2, 8, 8)],
            vec![],
            vec![bb(0, 0, 4, 4), bb(10, 10, 15, 14)],
        ];
        let items: Vec<_> = maps.iter().zip(boxes.iter().map(|b| b.as_slice())).collect();
        let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let pts = froc_curve(&items, &thresholds);
        for w in pts.windows(2) {
            assert!(w[1].tp_pixel_fraction <= w[0].tp_pixel_fraction + 1e-12);
            assert!(w[1].avg_fp_pixels_per_image <= w[0].avg_fp_pixels_per_image + 1e-12);
        }
    }

    #[test]
    fn roc_auc_examples() {
        let labels = vec![Label::Benign, Label::Benign, Label::Malignant, Label::Malignant];
        let (_, auc) = roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap();
        assert_eq!(auc, 1.0);
        let (_, auc) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert_eq!(auc, 0.0);
        let (_, auc) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
        assert!(roc_auc(&[0.5, 0.6], &[Label::Benign, Label::Benign]).is_err());
    }

    #[test]
    fn trapezoid_equals_mann_whitney_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(4..40);
            // Coarse grid of scores forces plenty of ties.
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<Label> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.4) {
                        Label::Malignant
                    } else {
                        Label::Benign
                    }
                })
                .collect();
            labels[0] = Label::Malignant;
            labels[1] = Label::Benign;
            let (_, trap) = roc_auc(&probs, &labels).unwrap();
            let mw = mann_whitney_auc(&probs, &labels).unwrap();
            assert!(
                (trap - mw).abs() < 1e-9,
                "trapezoid {trap} vs mann-whitney {mw}"
            );
        }
    }

    #[test]
    fn report_perfect_and_bacc_identity() {
        let fold = FoldPredictions {
            probabilities: vec![0.9, 0.8, 0.1, 0.2],
            labels: vec![Label::Malignant, Label::Malignant, Label::Benign, Label::Benign],
        };
        let report = classification_report(&[fold.clone(), fold], 0.5).unwrap();
        assert_eq!(report.mean.sensitivity, 1.0);
        assert_eq!(report.mean.specificity, 1.0);
        assert_eq!(report.mean.balanced_accuracy, 1.0);
        assert_eq!(report.mean.auc, 1.0);
        assert_eq!(report.std.auc, 0.0);
    }

    #[test]
    fn bacc_is_mean_of_sens_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let folds: Vec<FoldPredictions> = (0..5)
            .map(|_| {
                let n = 20;
                let mut labels: Vec<Label> = (0..n)
                    .map(|_| {
                        if rng.gen_bool(0.3) {
                            Label::Malignant
                        } else {
                            Label::Benign
                        }
                    })
                    .collect();
                labels[0] = Label::Malignant;
                labels[1] = Label::Benign;
                FoldPredictions {
                    probabilities: (0..n).map(|_| rng.gen()).collect(),
                    labels,
                }
            })
            .collect();
        let report = classification_report(&folds, 0.5).unwrap();
        for m in &report.folds {
            assert!((m.balanced_accuracy - (m.sensitivity + m.specificity) / 2.0).abs() < 1e-9);
        }
    }
}

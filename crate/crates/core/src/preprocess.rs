//! Breast-region cropping, resizing to the working resolution, intensity
//! whitening, and training-time augmentation.

use crate::detect::{connected_components, Mask};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::types::{BoundingBox, Label, MammogramSample};
use crate::{WORK_H, WORK_W};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Crop rectangle and sizes applied during preprocessing, kept for mapping
/// working-frame coordinates back to the original image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropRecord {
    /// Crop rectangle in original-image pixels.
    pub crop: BoundingBox,
    /// Original image size `(width, height)`.
    pub original_size: (u32, u32),
    /// Working size `(width, height)` the crop was resized to.
    pub work_size: (u32, u32),
}

/// Sample mapped into the whitened 640x320 working frame.
#[derive(Debug, Clone)]
pub struct PreprocessedSample<S: Scalar> {
    /// Whitened image, shape (WORK_H, WORK_W).
    pub image: Array2<S>,
    /// GT boxes remapped into the working frame.
    pub gt_boxes: Vec<BoundingBox>,
    /// Breast foreground in the working frame.
    pub foreground: Mask,
    pub crop_record: CropRecord,
    pub label: Label,
    pub subject_id: String,
    pub image_id: String,
}

impl<S: Scalar> PreprocessedSample<S> {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != (WORK_H, WORK_W) {
            return Err(Error::ShapeMismatch(format!(
                "preprocessed image is {:?}, expected {WORK_H}x{WORK_W}",
                self.image.dim()
            )));
        }
        let (mean, std) = mean_std(&self.image);
        if mean.abs() >= 1e-5 || (std - 1.0).abs() >= 1e-4 {
            return Err(Error::validation(format!(
                "image not whitened: mean {mean:.2e}, std {std}"
            )));
        }
        for b in &self.gt_boxes {
            b.validate()?;
            if !b.inside_frame(WORK_W as u32, WORK_H as u32) {
                return Err(Error::validation(format!("box {b:?} outside working frame")));
            }
        }
        Ok(())
    }
}

/// Training-time augmentation ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Independent horizontal and vertical flips with probability 0.5 each.
    pub enable_flips: bool,
    /// Translation bound as a fraction of each image dimension.
    pub max_translate_frac: f64,
    /// Scale drawn from `[1 - f, 1 + f]`.
    pub max_scale_frac: f64,
    /// Rotation bound in degrees.
    pub max_rotation_deg: f64,
    /// Base seed recorded with training runs.
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enable_flips: true,
            max_translate_frac: 0.2,
            max_scale_frac: 0.2,
            max_rotation_deg: 30.0,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_translate_frac < 0.0 || self.max_scale_frac < 0.0 || self.max_rotation_deg < 0.0
        {
            return Err(Error::config("augmentation ranges must be nonnegative"));
        }
        Ok(())
    }

    /// Null augmentation: identity transform for evaluation paths.
    pub fn disabled() -> Self {
        AugmentationConfig {
            enable_flips: false,
            max_translate_frac: 0.0,
            max_scale_frac: 0.0,
            max_rotation_deg: 0.0,
            rng_seed: 0,
        }
    }
}

/// Mean and population standard deviation with f64 accumulation.
pub fn mean_std<S: Scalar>(image: &Array2<S>) -> (f64, f64) {
    let n = image.len() as f64;
    let mut sum = 0.0f64;
    for &v in image.iter() {
        sum += v.as_f64();
    }
    let mean = sum / n;
    let mut ss = 0.0f64;
    for &v in image.iter() {
        let d = v.as_f64() - mean;
        ss += d * d;
    }
    (mean, (ss / n).sqrt())
}

/// Bin-edge threshold maximizing the between-class variance of the
/// intensity histogram. Values are assumed to lie in `[0, 1]`; the returned
/// threshold is a bin edge `k / bins` and foreground is `value >= threshold`.
/// Ties resolve to the first (lowest) optimal edge.
pub fn otsu_threshold<S: Scalar>(image: &Array2<S>, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::config("otsu needs at least 2 bins"));
    }
    if image.is_empty() {
        return Err(Error::validation("otsu on empty image"));
    }
    let mut hist = vec![0u64; bins];
    for &v in image.iter() {
        let idx = ((v.as_f64() * bins as f64) as usize).min(bins - 1);
        hist[idx] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_f = total as f64;
    // First moment uses bin centers.
    let centers: Vec<f64> = (0..bins).map(|i| (i as f64 + 0.5) / bins as f64).collect();
    let full_sum: f64 = hist
        .iter()
        .zip(&centers)
        .map(|(&c, &x)| c as f64 * x)
        .sum();

    let mut best_k = 0usize;
    let mut best_var = 0.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for k in 1..bins {
        w0 += hist[k - 1] as f64;
        sum0 += hist[k - 1] as f64 * centers[k - 1];
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (full_sum - sum0) / w1;
        let var = w0 / total_f * (w1 / total_f) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    if best_var == 0.0 {
        return Err(Error::DegenerateHistogram);
    }
    Ok(best_k as f64 / bins as f64)
}

/// Crop output: still in original-image intensity space, not yet resized
/// or whitened.
#[derive(Debug, Clone)]
pub struct CroppedSample<S: Scalar> {
    pub image: Array2<S>,
    pub gt_boxes: Vec<BoundingBox>,
    pub foreground: Mask,
    pub crop: BoundingBox,
    pub original_size: (u32, u32),
    pub label: Label,
    pub subject_id: String,
    pub image_id: String,
}

/// Tight crop around the breast: binarize at the Otsu threshold, keep the
/// largest connected foreground component, crop to its bounding rectangle.
/// A degenerate histogram falls back to the full image.
pub fn crop_breast<S: Scalar>(sample: &MammogramSample<S>) -> Result<CroppedSample<S>> {
    sample.validate()?;
    let (h, w) = sample.image.dim();
    let full = BoundingBox::new(0, 0, w as u32, h as u32)?;

    let (crop, fg_full) = match otsu_threshold(&sample.image, 256) {
        Ok(t) => {
            let ts = S::of_f64(t);
            let mask: Mask = sample.image.map(|&v| v >= ts);
            let comps = connected_components(&mask, 1);
            match comps.iter().max_by_key(|c| c.len()) {
                Some(largest) => {
                    let boxes = crate::detect::components_to_boxes(&[largest.clone()]);
                    let mut fg = Array2::from_elem((h, w), false);
                    for &(y, x) in largest {
                        fg[[y as usize, x as usize]] = true;
                    }
                    (boxes[0], fg)
                }
                None => (full, Array2::from_elem((h, w), true)),
            }
        }
        Err(Error::DegenerateHistogram) => (full, Array2::from_elem((h, w), true)),
        Err(e) => return Err(e),
    };

    let mut gt_boxes = Vec::new();
    let mut dropped = 0usize;
    for b in &sample.gt_boxes {
        match b.intersect(&crop) {
            Some(i) => gt_boxes.push(BoundingBox {
                x_min: i.x_min - crop.x_min,
                y_min: i.y_min - crop.y_min,
                x_max: i.x_max - crop.x_min,
                y_max: i.y_max - crop.y_min,
            }),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "crop of `{}` dropped {dropped} GT box(es) outside the breast region",
            sample.image_id
        );
    }

    let image = sample
        .image
        .slice(ndarray::s![
            crop.y_min as usize..crop.y_max as usize,
            crop.x_min as usize..crop.x_max as usize
        ])
        .to_owned();
    let foreground = fg_full
        .slice(ndarray::s![
            crop.y_min as usize..crop.y_max as usize,
            crop.x_min as usize..crop.x_max as usize
        ])
        .to_owned();

    Ok(CroppedSample {
        image,
        gt_boxes,
        foreground,
        crop,
        original_size: (w as u32, h as u32),
        label: sample.label,
        subject_id: sample.subject_id.clone(),
        image_id: sample.image_id.clone(),
    })
}

/// Bilinear resize to `(out_h, out_w)` with the half-pixel-center
/// convention and edge clamping.
pub fn resize_bilinear<S: Scalar>(image: &Array2<S>, out_h: usize, out_w: usize) -> Array2<S> {
    let (h, w) = image.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = S::of_f64(fy - y0 as f64);
        let dx = S::of_f64(fx - x0 as f64);
        let one = S::one();
        image[[y0, x0]] * (one - dy) * (one - dx)
            + image[[y0, x1]] * (one - dy) * dx
            + image[[y1, x0]] * dy * (one - dx)
            + image[[y1, x1]] * dy * dx
    })
}

fn resize_mask_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let (h, w) = mask.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let x = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        mask[[y, x]]
    })
}

/// Scale a box from an `(old_w, old_h)` frame to a `(new_w, new_h)` frame
/// with outward rounding, exactly in integer arithmetic.
pub fn scale_box_outward(
    b: &BoundingBox,
    old: (u32, u32),
    new: (u32, u32),
) -> BoundingBox {
    let (ow, oh) = (u64::from(old.0), u64::from(old.1));
    let (nw, nh) = (u64::from(new.0), u64::from(new.1));
    let floor_div = |a: u64, d: u64| a / d;
    let ceil_div = |a: u64, d: u64| a.div_ceil(d);
    BoundingBox {
        x_min: floor_div(u64::from(b.x_min) * nw, ow) as u32,
        y_min: floor_div(u64::from(b.y_min) * nh, oh) as u32,
        x_max: (ceil_div(u64::from(b.x_max) * nw, ow) as u32).min(new.0),
        y_max: (ceil_div(u64::from(b.y_max) * nh, oh) as u32).min(new.1),
    }
}

/// Resize a cropped sample to the working resolution, scaling boxes by the
/// same factors with outward rounding.
pub fn resize_to_working<S: Scalar>(cropped: &CroppedSample<S>) -> (Array2<S>, Vec<BoundingBox>, Mask) {
    let (h, w) = cropped.image.dim();
    let image = resize_bilinear(&cropped.image, WORK_H, WORK_W);
    let fg = resize_mask_nearest(&cropped.foreground, WORK_H, WORK_W);
    let boxes = cropped
        .gt_boxes
        .iter()
        .map(|b| scale_box_outward(b, (w as u32, h as u32), (WORK_W as u32, WORK_H as u32)))
        .collect();
    (image, boxes, fg)
}

/// `(x - mean) / std` elementwise, population std, f64 accumulation.
pub fn whiten<S: Scalar>(image: &Array2<S>) -> Result<Array2<S>> {
    let (mean, std) = mean_std(image);
    if std == 0.0 {
        return Err(Error::validation("whiten: zero variance image"));
    }
    let m = S::of_f64(mean);
    let inv = S::of_f64(1.0 / std);
    Ok(image.map(|&v| (v - m) * inv))
}

/// Full deterministic preprocessing: crop, resize, whiten.
pub fn preprocess<S: Scalar>(sample: &MammogramSample<S>) -> Result<PreprocessedSample<S>> {
    let cropped = crop_breast(sample)?;
    let (image, gt_boxes, foreground) = resize_to_working(&cropped);
    let image = whiten(&image)?;
    let out = PreprocessedSample {
        image,
        gt_boxes,
        foreground,
        crop_record: CropRecord {
            crop: cropped.crop,
            original_size: cropped.original_size,
            work_size: (WORK_W as u32, WORK_H as u32),
        },
        label: cropped.label,
        subject_id: cropped.subject_id,
        image_id: cropped.image_id,
    };
    out.validate()?;
    Ok(out)
}

/// Affine map in pixel-region coordinates (pixel `i` covers `[i, i+1)`).
#[derive(Debug, Clone, Copy)]
struct Affine {
    // Forward: p' = A * (p - c) + c + t
    a: [[f64; 2]; 2],
    c: (f64, f64),
    t: (f64, f64),
}

impl Affine {
    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.c.0;
        let dy = y - self.c.1;
        (
            self.a[0][0] * dx + self.a[0][1] * dy + self.c.0 + self.t.0,
            self.a[1][0] * dx + self.a[1][1] * dy + self.c.1 + self.t.1,
        )
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let dx = x - self.c.0 - self.t.0;
        let dy = y - self.c.1 - self.t.1;
        (
            inv[0][0] * dx + inv[0][1] * dy + self.c.0,
            inv[1][0] * dx + inv[1][1] * dy + self.c.1,
        )
    }
}

/// Parameters drawn for one augmentation call.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub translate: (f64, f64),
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub fn draw<R: Rng>(cfg: &AugmentationConfig, rng: &mut R, width: usize, height: usize) -> Self {
        let flip_h = cfg.enable_flips && rng.gen_bool(0.5);
        let flip_v = cfg.enable_flips && rng.gen_bool(0.5);
        let draw_sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let tx = draw_sym(rng, cfg.max_translate_frac * width as f64);
        let ty = draw_sym(rng, cfg.max_translate_frac * height as f64);
        let scale = if cfg.max_scale_frac > 0.0 {
            rng.gen_range(1.0 - cfg.max_scale_frac..=1.0 + cfg.max_scale_frac)
        } else {
            1.0
        };
        let rotation_deg = draw_sym(rng, cfg.max_rotation_deg);
        AugmentParams {
            flip_h,
            flip_v,
            translate: (tx, ty),
            scale,
            rotation_deg,
        }
    }

    fn to_affine(self, width: usize, height: usize) -> Affine {
        let th = self.rotation_deg.to_radians();
        let (sin, cos) = th.sin_cos();
        let s = self.scale;
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        // A = R(th) * S(s) * F(fx, fy)
        let a = [
            [cos * s * fx, -sin * s * fy],
            [sin * s * fx, cos * s * fy],
        ];
        Affine {
            a,
            c: (width as f64 / 2.0, height as f64 / 2.0),
            t: self.translate,
        }
    }
}

fn warp_image<S: Scalar>(image: &Array2<S>, affine: &Affine, fill: S) -> Array2<S> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        // Output pixel center in region coordinates.
        let (sx, sy) = affine.inverse(ox as f64 + 0.5, oy as f64 + 0.5);
        // Back to pixel-center coordinates.
        let fx = sx - 0.5;
        let fy = sy - 0.5;
        if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
            return fill;
        }
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dx = S::of_f64(fx - x0 as f64);
        let dy = S::of_f64(fy - y0 as f64);
        let one = S::one();
        image[[y0, x0]] * (one - dy) * (one - dx)
            + image[[y0, x1]] * (one - dy) * dx
            + image[[y1, x0]] * dy * (one - dx)
            + image[[y1, x1]] * dy * dx
    })
}

fn warp_mask(mask: &Mask, affine: &Affine) -> Mask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        let (sx, sy) = affine.inverse(ox as f64 + 0.5, oy as f64 + 0.5);
        let x = (sx - 0.5).round();
        let y = (sy - 0.5).round();
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            false
        } else {
            mask[[y as usize, x as usize]]
        }
    })
}

fn transform_box(b: &BoundingBox, affine: &Affine, width: usize, height: usize) -> Option<BoundingBox> {
    let corners = [
        (f64::from(b.x_min), f64::from(b.y_min)),
        (f64::from(b.x_max), f64::from(b.y_min)),
        (f64::from(b.x_min), f64::from(b.y_max)),
        (f64::from(b.x_max), f64::from(b.y_max)),
    ];
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (x, y) in corners {
        let (tx, ty) = affine.forward(x, y);
        min_x = min_x.min(tx);
        min_y = min_y.min(ty);
        max_x = max_x.max(tx);
        max_y = max_y.max(ty);
    }
    let x_min = min_x.floor().max(0.0) as u32;
    let y_min = min_y.floor().max(0.0) as u32;
    let x_max = (max_x.ceil().min(width as f64) as u32).max(x_min);
    let y_max = (max_y.ceil().min(height as f64) as u32).max(y_min);
    if x_max <= x_min || y_max <= y_min {
        return None;
    }
    let out = BoundingBox {
        x_min,
        y_min,
        x_max,
        y_max,
    };
    if out.area() < 4 {
        None
    } else {
        Some(out)
    }
}

/// Warp a single patch with the given augmentation parameters (no
/// re-whitening; out-of-frame samples fill with the patch minimum). Used
/// for patch-level augmentation of oversampled bags.
pub fn warp_patch<S: Scalar>(patch: &Array2<S>, params: AugmentParams) -> Array2<S> {
    let (h, w) = patch.dim();
    let affine = params.to_affine(w, h);
    let fill = patch
        .iter()
        .cloned()
        .fold(S::infinity(), |a, b| if b < a { b } else { a });
    warp_image(patch, &affine, fill)
}

/// Apply one random flip + affine augmentation. Boxes become the
/// axis-aligned hull of their transformed corners, clipped to the frame and
/// dropped below 4 pixels of area; the output is re-whitened.
pub fn augment<S: Scalar, R: Rng>(
    sample: &PreprocessedSample<S>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<PreprocessedSample<S>> {
    cfg.validate()?;
    let (h, w) = sample.image.dim();
    let params = AugmentParams::draw(cfg, rng, w, h);
    augment_with_params(sample, params)
}

/// Deterministic core of [`augment`], exposed for targeted tests.
pub fn augment_with_params<S: Scalar>(
    sample: &PreprocessedSample<S>,
    params: AugmentParams,
) -> Result<PreprocessedSample<S>> {
    let (h, w) = sample.image.dim();
    let affine = params.to_affine(w, h);
    let fill = sample
        .image
        .iter()
        .cloned()
        .fold(S::infinity(), |a, b| if b < a { b } else { a });
    let warped = warp_image(&sample.image, &affine, fill);
    let image = whiten(&warped)?;
    let foreground = warp_mask(&sample.foreground, &affine);
    let gt_boxes = sample
        .gt_boxes
        .iter()
        .filter_map(|b| transform_box(b, &affine, w, h))
        .collect();
    Ok(PreprocessedSample {
        image,
        gt_boxes,
        foreground,
        crop_record: sample.crop_record.clone(),
        label: sample.label,
        subject_id: sample.subject_id.clone(),
        image_id: sample.image_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_otsu(image: &Array2<f64>, bins: usize) -> Option<f64> {
        // Independent route: per candidate edge, partition the histogram and
        // compute the two class statistics directly.
        let mut hist = vec![0u64; bins];
        for &v in image.iter() {
            hist[((v * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let center = |i: usize| (i as f64 + 0.5) / bins as f64;
        let mut best: Option<(usize, f64)> = None;
        for k in 1..bins {
            let (mut w0, mut w1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..bins {
                let c = hist[i] as f64;
                if i < k {
                    w0 += c;
                    s0 += c * center(i);
                } else {
                    w1 += c;
                    s1 += c * center(i);
                }
            }
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let total = w0 + w1;
            let var = (w0 / total) * (w1 / total) * (s0 / w0 - s1 / w1).powi(2);
            if var > best.map_or(0.0, |(_, v)| v) {
                best = Some((k, var));
            }
        }
        best.map(|(k, _)| k as f64 / bins as f64)
    }

    #[test]
    fn otsu_two_constant_regions() {
        let mut img = Array2::from_elem((10, 10), 0.0);
        for y in 0..5 {
            for x in 0..10 {
                img[[y, x]] = 0.8;
            }
        }
        let t = otsu_threshold(&img, 256).unwrap();
        assert!(t > 0.0 && t < 0.8, "t = {t}");
    }

    #[test]
    fn otsu_matches_brute_force_on_bimodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array2::from_shape_fn((40, 40), |_| {
            let (mu, sd) = if rng.gen_bool(0.5) { (0.1, 0.03) } else { (0.7, 0.05) };
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (mu + sd * z).clamp(0.0, 1.0)
        });
        let t = otsu_threshold(&img, 256).unwrap();
        assert_eq!(t, brute_force_otsu(&img, 256).unwrap());
        assert!(t > 0.1 && t < 0.7);
    }

    #[test]
    fn otsu_matches_brute_force_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let img = Array2::from_shape_fn((12, 13), |_| rng.gen::<f64>());
            match otsu_threshold(&img, 64) {
                Ok(t) => assert_eq!(t, brute_force_otsu(&img, 64).unwrap()),
                Err(_) => assert!(brute_force_otsu(&img, 64).is_none()),
            }
        }
    }

    #[test]
    fn otsu_constant_image_is_degenerate() {
        let img = Array2::from_elem((8, 8), 0.4);
        assert!(matches!(
            otsu_threshold(&img, 256),
            Err(Error::DegenerateHistogram)
        ));
    }

    fn sample_from(image: Array2<f64>, boxes: Vec<BoundingBox>) -> MammogramSample<f64> {
        MammogramSample {
            image,
            subject_id: "s0".into(),
            image_id: "i0".into(),
            label: Label::Benign,
            gt_boxes: boxes,
            view: None,
        }
    }

    #[test]
    fn crop_bright_half_plane() {
        let mut img = Array2::from_elem((40, 60), 0.05);
        for y in 0..40 {
            for x in 0..30 {
                img[[y, x]] = 0.7;
            }
        }
        let c = crop_breast(&sample_from(img, vec![])).unwrap();
        assert_eq!(c.crop, BoundingBox::new(0, 0, 30, 40).unwrap());
        assert_eq!(c.image.dim(), (40, 30));
    }

    #[test]
    fn crop_remaps_inner_box_by_origin() {
        let mut img = Array2::from_elem((40, 60), 0.05);
        for y in 10..40 {
            for x in 20..55 {
                img[[y, x]] = 0.7;
            }
        }
        let b = BoundingBox::new(25, 15, 30, 22).unwrap();
        let c = crop_breast(&sample_from(img, vec![b])).unwrap();
        assert_eq!(c.crop, BoundingBox::new(20, 10, 55, 40).unwrap());
        assert_eq!(c.gt_boxes, vec![BoundingBox::new(5, 5, 10, 12).unwrap()]);
    }

    #[test]
    fn degenerate_image_crops_to_full_frame() {
        let img = Array2::from_elem((15, 20), 0.3);
        let c = crop_breast(&sample_from(img, vec![])).unwrap();
        assert_eq!(c.crop, BoundingBox::new(0, 0, 20, 15).unwrap());
        assert!(c.foreground.iter().all(|&b| b));
    }

    #[test]
    fn box_scaling_exact_halving() {
        let b = BoundingBox::new(100, 200, 300, 400).unwrap();
        let out = scale_box_outward(&b, (640, 1280), (320, 640));
        assert_eq!(out, BoundingBox::new(50, 100, 150, 200).unwrap());
    }

    #[test]
    fn box_scaling_identity() {
        let b = BoundingBox::new(7, 9, 31, 44).unwrap();
        assert_eq!(scale_box_outward(&b, (320, 640), (320, 640)), b);
    }

    #[test]
    fn box_scaling_outward_rounding_oracle() {
        // Oracle in exact rational arithmetic: corner * new / old with
        // floor for mins and ceil for maxes, via i128 integer division.
        let cases = [
            (BoundingBox::new(123, 77, 456, 460).unwrap(), (481u32, 959u32)),
            (BoundingBox::new(0, 0, 481, 959).unwrap(), (481, 959)),
            (BoundingBox::new(5, 3, 11, 17).unwrap(), (481, 959)),
        ];
        for (b, (ow, oh)) in cases {
            let out = scale_box_outward(&b, (ow, oh), (320, 640));
            let floor = |a: u32, n: u32, d: u32| {
                ((i128::from(a) * i128::from(n)) / i128::from(d)) as u32
            };
            let ceil = |a: u32, n: u32, d: u32| {
                let num = i128::from(a) * i128::from(n);
                let d = i128::from(d);
                ((num + d - 1) / d) as u32
            };
            assert_eq!(out.x_min, floor(b.x_min, 320, ow));
            assert_eq!(out.y_min, floor(b.y_min, 640, oh));
            assert_eq!(out.x_max, ceil(b.x_max, 320, ow).min(320));
            assert_eq!(out.y_max, ceil(b.y_max, 640, oh).min(640));
        }
    }

    #[test]
    fn box_remap_preserves_containment() {
        // A point inside the original box maps inside the remapped box
        // under crop + resize.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let (ow, oh) = (rng.gen_range(50..900), rng.gen_range(50..900));
            let x0 = rng.gen_range(0..ow - 2);
            let y0 = rng.gen_range(0..oh - 2);
            let b = BoundingBox::new(
                x0,
                y0,
                rng.gen_range(x0 + 1..ow),
                rng.gen_range(y0 + 1..oh),
            )
            .unwrap();
            let out = scale_box_outward(&b, (ow, oh), (320, 640));
            // Sample points in the box (pixel centers), map them with the
            // continuous scale factors.
            for _ in 0..10 {
                let px = rng.gen_range(b.x_min..b.x_max) as f64 + 0.5;
                let py = rng.gen_range(b.y_min..b.y_max) as f64 + 0.5;
                let mx = px * 320.0 / ow as f64;
                let my = py * 640.0 / oh as f64;
                assert!(mx >= out.x_min as f64 && mx <= out.x_max as f64);
                assert!(my >= out.y_min as f64 && my <= out.y_max as f64);
            }
        }
    }

    #[test]
    fn whiten_examples() {
        let img = ndarray::arr2(&[[0.0f64, 2.0]]);
        let w = whiten(&img).unwrap();
        assert!((w[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((w[[0, 1]] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array2::from_shape_fn((33, 21), |_| rng.gen::<f64>());
        let w = whiten(&img).unwrap();
        let (m, s) = mean_std(&w);
        assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-4);
        // Idempotence within tolerance.
        let w2 = whiten(&w).unwrap();
        for (a, b) in w.iter().zip(w2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(whiten(&Array2::<f64>::zeros((4, 4))).is_err());
    }

    fn whitened_sample(seed: u64, boxes: Vec<BoundingBox>) -> PreprocessedSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((WORK_H, WORK_W), |_| rng.gen::<f64>());
        PreprocessedSample {
            image: whiten(&raw).unwrap(),
            gt_boxes: boxes,
            foreground: Array2::from_elem((WORK_H, WORK_W), true),
            crop_record: CropRecord {
                crop: BoundingBox::new(0, 0, WORK_W as u32, WORK_H as u32).unwrap(),
                original_size: (WORK_W as u32, WORK_H as u32),
                work_size: (WORK_W as u32, WORK_H as u32),
            },
            label: Label::Benign,
            subject_id: "s".into(),
            image_id: "i".into(),
        }
    }

    #[test]
    fn null_augmentation_is_identity() {
        let b = BoundingBox::new(40, 80, 120, 200).unwrap();
        let s = whitened_sample(5, vec![b]);
        let out = augment_with_params(
            &s,
            AugmentParams {
                flip_h: false,
                flip_v: false,
                translate: (0.0, 0.0),
                scale: 1.0,
                rotation_deg: 0.0,
            },
        )
        .unwrap();
        assert_eq!(out.gt_boxes, vec![b]);
        for (a, b) in s.image.iter().zip(out.image.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn horizontal_flip_mirrors_boxes() {
        let b = BoundingBox::new(40, 80, 120, 200).unwrap();
        let s = whitened_sample(6, vec![b]);
        let out = augment_with_params(
            &s,
            AugmentParams {
                flip_h: true,
                flip_v: false,
                translate: (0.0, 0.0),
                scale: 1.0,
                rotation_deg: 0.0,
            },
        )
        .unwrap();
        let w = WORK_W as u32;
        assert_eq!(
            out.gt_boxes,
            vec![BoundingBox::new(w - 120, 80, w - 40, 200).unwrap()]
        );
    }

    #[test]
    fn augment_is_deterministic_under_seed() {
        let s = whitened_sample(7, vec![BoundingBox::new(10, 10, 80, 90).unwrap()]);
        let cfg = AugmentationConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        let a = augment(&s, &cfg, &mut r1).unwrap();
        let b = augment(&s, &cfg, &mut r2).unwrap();
        assert_eq!(a.gt_boxes, b.gt_boxes);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn augmented_output_is_whitened_and_in_frame() {
        let s = whitened_sample(8, vec![BoundingBox::new(100, 300, 200, 420).unwrap()]);
        let cfg = AugmentationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let out = augment(&s, &cfg, &mut rng).unwrap();
            out.validate().unwrap();
        }
    }
}

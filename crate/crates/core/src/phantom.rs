//! Deterministic mammogram-like phantom generator with exact ground truth.
//!
//! Each phantom is a half-ellipse "breast" on a dark background with
//! low-frequency tissue texture and noise. Masses are bright compact blobs
//! with a defined margin: benign masses are smooth ellipses, malignant
//! masses carry a sinusoidal radial perturbation (spiculated margin).
//! Distractors are diffuse Gaussian blushes of mass-like peak intensity but
//! with no margin, so the two stages have something to learn and something
//! to ignore.

use crate::dataset;
use crate::detect::Mask;
use crate::error::Result;
use crate::num::Scalar;
use crate::types::{AnnotationRecord, BoundingBox, DatasetManifest, Label, MammogramSample};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Output size `(height, width)`.
    pub image_size: (usize, usize),
    /// Additive Gaussian noise level.
    pub noise_sigma: f64,
    /// Maximum number of masses per image.
    pub max_masses: usize,
    /// Mass radius range in pixels.
    pub mass_radius: (f64, f64),
    /// Radial perturbation amplitude range for malignant margins.
    pub spiculation_amp: (f64, f64),
    /// Range of diffuse distractor blobs per image.
    pub distractor_count: (usize, usize),
    pub rng_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: (640, 320),
            noise_sigma: 0.02,
            max_masses: 2,
            mass_radius: (16.0, 30.0),
            spiculation_amp: (0.2, 0.4),
            distractor_count: (0, 3),
            rng_seed: 0,
        }
    }
}

/// Kind of rendered mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassKind {
    Smooth,
    Spiculated,
}

/// Ground truth for one rendered mass.
#[derive(Debug, Clone)]
pub struct MassTruth {
    pub kind: MassKind,
    pub gt_box: BoundingBox,
    pub support: Vec<(u32, u32)>,
}

/// Generator-internal ground truth, used by verification tests.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub masses: Vec<MassTruth>,
    pub foreground: Mask,
}

struct Breast {
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Breast {
    fn dist(&self, y: f64, x: f64) -> f64 {
        let dx = x / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Margin radius of a mass as a function of polar angle.
enum Margin {
    Ellipse { a: f64, b: f64, theta: f64 },
    Spiculated {
        r: f64,
        amp: f64,
        k1: f64,
        k2: f64,
        p1: f64,
        p2: f64,
    },
}

impl Margin {
    fn radius(&self, phi: f64) -> f64 {
        match *self {
            Margin::Ellipse { a, b, theta } => {
                let c = (phi - theta).cos();
                let s = (phi - theta).sin();
                a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
            }
            Margin::Spiculated {
                r,
                amp,
                k1,
                k2,
                p1,
                p2,
            } => r * (1.0 + amp * (0.65 * (k1 * phi + p1).sin() + 0.35 * (k2 * phi + p2).sin())),
        }
    }

    fn max_radius(&self) -> f64 {
        match *self {
            Margin::Ellipse { a, b, .. } => a.max(b),
            Margin::Spiculated { r, amp, .. } => r * (1.0 + amp),
        }
    }
}

struct MassSpec {
    cy: f64,
    cx: f64,
    contrast: f64,
    margin: Margin,
    kind: MassKind,
}

fn render_mass(canvas: &mut Array2<f64>, spec: &MassSpec) -> MassTruth {
    let (h, w) = canvas.dim();
    let rmax = spec.margin.max_radius();
    let y0 = (spec.cy - rmax - 2.0).floor().max(0.0) as usize;
    let y1 = ((spec.cy + rmax + 2.0).ceil() as usize).min(h - 1);
    let x0 = (spec.cx - rmax - 2.0).floor().max(0.0) as usize;
    let x1 = ((spec.cx + rmax + 2.0).ceil() as usize).min(w - 1);
    let mut support = Vec::new();
    let (mut bx0, mut by0, mut bx1, mut by1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - spec.cy;
            let dx = x as f64 - spec.cx;
            let rho = (dx * dx + dy * dy).sqrt();
            let phi = dy.atan2(dx);
            let r = spec.margin.radius(phi);
            if rho <= r {
                // Bright interior with a crisp 1.2-pixel margin.
                let profile = 1.0 - 0.45 * (rho / r).powi(2);
                let edge = ((r - rho) / 1.2).clamp(0.0, 1.0);
                canvas[[y, x]] += spec.contrast * profile * edge;
                if edge > 0.0 {
                    support.push((y as u32, x as u32));
                    bx0 = bx0.min(x as u32);
                    by0 = by0.min(y as u32);
                    bx1 = bx1.max(x as u32 + 1);
                    by1 = by1.max(y as u32 + 1);
                }
            }
        }
    }
    MassTruth {
        kind: spec.kind,
        gt_box: BoundingBox {
            x_min: bx0,
            y_min: by0,
            x_max: bx1,
            y_max: by1,
        },
        support,
    }
}

/// Render one phantom along with its internal ground truth.
pub fn render_phantom<S: Scalar, R: Rng>(
    cfg: &PhantomConfig,
    label: Label,
    rng: &mut R,
) -> (MammogramSample<S>, PhantomTruth) {
    let (h, w) = cfg.image_size;
    let breast = Breast {
        cy: h as f64 * rng.gen_range(0.47..0.53),
        rx: w as f64 * rng.gen_range(0.62..0.8),
        ry: h as f64 * rng.gen_range(0.38..0.46),
    };

    // Low-frequency tissue texture.
    let n_tex = 5;
    let tex: Vec<(f64, f64, f64, f64)> = (0..n_tex)
        .map(|_| {
            let amp = rng.gen_range(-0.05..0.05);
            let sigma: f64 = rng.gen_range(25.0..70.0);
            // Center inside the breast.
            loop {
                let y = rng.gen_range(0.0..h as f64);
                let x = rng.gen_range(0.0..w as f64);
                if breast.dist(y, x) < 0.7 {
                    break (y, x, amp, sigma);
                }
            }
        })
        .collect();

    let mut canvas = Array2::from_shape_fn((h, w), |(y, x)| {
        let d = breast.dist(y as f64, x as f64);
        if d < 1.0 {
            let body = 0.3 + 0.22 * (1.0 - d).powf(1.3);
            let skin = smoothstep((1.0 - d) / 0.08);
            0.02 + body * skin
        } else {
            0.02
        }
    });
    for &(ty, tx, amp, sigma) in &tex {
        let reach = (3.0 * sigma) as usize;
        let y0 = (ty as usize).saturating_sub(reach);
        let y1 = ((ty as usize) + reach).min(h - 1);
        let x0 = (tx as usize).saturating_sub(reach);
        let x1 = ((tx as usize) + reach).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if breast.dist(y as f64, x as f64) < 1.0 {
                    let d2 = (y as f64 - ty).powi(2) + (x as f64 - tx).powi(2);
                    canvas[[y, x]] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }

    // Mass count: malignant images get one spiculated mass and maybe one
    // smooth extra; benign images get 0-2 smooth masses.
    let n_masses = match label {
        Label::Malignant => {
            let extra = usize::from(cfg.max_masses >= 2 && rng.gen_bool(0.35));
            (1 + extra).min(cfg.max_masses.max(1))
        }
        Label::Benign => {
            let roll: f64 = rng.gen();
            let n = if roll < 0.3 {
                0
            } else if roll < 0.8 {
                1
            } else {
                2
            };
            n.min(cfg.max_masses)
        }
    };

    let mut specs: Vec<MassSpec> = Vec::new();
    for m in 0..n_masses {
        let radius = rng.gen_range(cfg.mass_radius.0..=cfg.mass_radius.1);
        let kind = if label == Label::Malignant && m == 0 {
            MassKind::Spiculated
        } else {
            MassKind::Smooth
        };
        let margin = match kind {
            MassKind::Spiculated => Margin::Spiculated {
                r: radius,
                amp: rng.gen_range(cfg.spiculation_amp.0..=cfg.spiculation_amp.1),
                k1: rng.gen_range(5..=9) as f64,
                k2: rng.gen_range(10..=16) as f64,
                p1: rng.gen_range(0.0..std::f64::consts::TAU),
                p2: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            MassKind::Smooth => Margin::Ellipse {
                a: radius * rng.gen_range(0.8..1.2),
                b: radius * rng.gen_range(0.8..1.2),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            },
        };
        let rmax = margin.max_radius();
        // Rejection-sample a center well inside the breast and clear of
        // earlier masses.
        let mut placed = None;
        for _ in 0..500 {
            let y = rng.gen_range(rmax + 2.0..h as f64 - rmax - 2.0);
            let x = rng.gen_range(2.0..w as f64 - rmax - 2.0);
            if breast.dist(y, x) > 0.5 {
                continue;
            }
            let clear = specs.iter().all(|s| {
                let d = ((s.cy - y).powi(2) + (s.cx - x).powi(2)).sqrt();
                d > s.margin.max_radius() + rmax + 12.0
            });
            if clear {
                placed = Some((y, x));
                break;
            }
        }
        if let Some((cy, cx)) = placed {
            specs.push(MassSpec {
                cy,
                cx,
                contrast: rng.gen_range(0.2..0.32),
                margin,
                kind,
            });
        }
    }

    let mut masses: Vec<MassTruth> = specs.iter().map(|s| render_mass(&mut canvas, s)).collect();
    // A malignant image must contain a malignant mass; placement cannot
    // fail for the first mass because its center range is never empty.
    if label == Label::Malignant {
        assert!(masses.iter().any(|m| m.kind == MassKind::Spiculated));
    }

    // Diffuse distractors: same brightness scale, no margin.
    let n_distract = rng.gen_range(cfg.distractor_count.0..=cfg.distractor_count.1);
    for _ in 0..n_distract {
        let sigma: f64 = rng.gen_range(14.0..30.0);
        let peak = rng.gen_range(0.16..0.28);
        for _ in 0..200 {
            let y = rng.gen_range(0.0..h as f64);
            let x = rng.gen_range(0.0..w as f64);
            if breast.dist(y, x) > 0.55 {
                continue;
            }
            let clear = specs.iter().all(|s| {
                let d = ((s.cy - y).powi(2) + (s.cx - x).powi(2)).sqrt();
                d > s.margin.max_radius() + 2.0 * sigma + 8.0
            });
            if !clear {
                continue;
            }
            let reach = (3.0 * sigma) as usize;
            let y0 = (y as usize).saturating_sub(reach);
            let y1 = ((y as usize) + reach).min(h - 1);
            let x0 = (x as usize).saturating_sub(reach);
            let x1 = ((x as usize) + reach).min(w - 1);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if breast.dist(yy as f64, xx as f64) < 1.0 {
                        let d2 = (yy as f64 - y).powi(2) + (xx as f64 - x).powi(2);
                        canvas[[yy, xx]] += peak * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            break;
        }
    }

    // Noise and clipping.
    for v in canvas.iter_mut() {
        *v = (*v + cfg.noise_sigma * crate::nn::randn(rng)).clamp(0.0, 0.98);
    }

    let foreground = Array2::from_shape_fn((h, w), |(y, x)| breast.dist(y as f64, x as f64) < 1.0);
    masses.retain(|m| !m.support.is_empty());
    let gt_boxes = masses.iter().map(|m| m.gt_box).collect();
    let image = canvas.map(|&v| S::of_f64(v));
    (
        MammogramSample {
            image,
            subject_id: String::new(),
            image_id: String::new(),
            label,
            gt_boxes,
            view: None,
        },
        PhantomTruth { masses, foreground },
    )
}

/// Generate one phantom sample (ids left for the caller to fill).
pub fn generate_phantom<S: Scalar, R: Rng>(
    cfg: &PhantomConfig,
    label: Label,
    rng: &mut R,
) -> MammogramSample<S> {
    render_phantom(cfg, label, rng).0
}

/// Split `total` images into subject groups of roughly `total / subjects`
/// images (clamped to at least 1 per subject).
fn subject_sizes(total: usize, subjects: usize) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let k = subjects.clamp(1, total);
    let base = total / k;
    let extra = total % k;
    (0..k)
        .map(|i| base + usize::from(i < extra))
        .filter(|&s| s > 0)
        .collect()
}

/// Generate a dataset on disk in the standard layout. Images are grouped
/// into synthetic subjects (several views per subject, all sharing the
/// subject's label) so subject-level splitting is exercised.
pub fn generate_dataset(
    cfg: &PhantomConfig,
    n_images: usize,
    malignant_fraction: f64,
    n_subjects: usize,
    root: &Path,
) -> Result<DatasetManifest> {
    if n_subjects > n_images {
        return Err(crate::Error::config(
            "n_subjects must not exceed n_images",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n_malignant = ((n_images as f64) * malignant_fraction).round() as usize;
    let n_benign = n_images - n_malignant;
    let mal_subjects = ((n_subjects as f64) * malignant_fraction).round() as usize;
    let ben_subjects = n_subjects.saturating_sub(mal_subjects);

    let mut assignments: Vec<(String, Label, usize)> = Vec::new();
    for (si, size) in subject_sizes(n_malignant, mal_subjects.max(1)).into_iter().enumerate() {
        assignments.push((format!("subj_m{si:03}"), Label::Malignant, size));
    }
    for (si, size) in subject_sizes(n_benign, ben_subjects.max(1)).into_iter().enumerate() {
        assignments.push((format!("subj_b{si:03}"), Label::Benign, size));
    }

    let mut records = Vec::with_capacity(n_images);
    let mut idx = 0usize;
    for (subject_id, label, size) in assignments {
        for v in 0..size {
            let image_id = format!("img{idx:04}");
            let view = if v % 2 == 0 { "MLO" } else { "CC" };
            let sample: MammogramSample<f64> = generate_phantom(cfg, label, &mut rng);
            dataset::save_image(&dataset::image_path(root, &image_id), &sample.image)?;
            records.push(AnnotationRecord {
                image_id,
                subject_id: subject_id.clone(),
                label,
                view: Some(view.to_string()),
                boxes: sample.gt_boxes,
            });
            idx += 1;
        }
    }
    dataset::save_annotations(root, &records)?;
    dataset::load_manifest(root)
}

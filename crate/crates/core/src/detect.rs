//! Softmap post-processing: threshold, morphological closing, connected
//! components, tight boxes.

use crate::error::Result;
use crate::num::Scalar;
use crate::types::{BoundingBox, SoftMap};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Binary pixel mask, row-major `(height, width)`.
pub type Mask = Array2<bool>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Softmap binarization threshold (`>=` convention).
    pub binarize_threshold: f64,
    /// Radius of the disk structuring element used for closing.
    pub closing_radius: u32,
    /// Components smaller than this many pixels are discarded.
    pub min_component_area: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            binarize_threshold: 0.5,
            closing_radius: 3,
            min_component_area: 25,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(crate::Error::config(format!(
                "binarize_threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }

    /// Stable hash of the configuration, recorded in detection exports.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

/// `mask = probs >= threshold`.
pub fn binarize<S: Scalar>(softmap: &SoftMap<S>, threshold: f64) -> Mask {
    let t = S::of_f64(threshold);
    softmap.probs.map(|&p| p >= t)
}

/// Offsets of a disk structuring element of the given radius.
fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = i64::from(radius);
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn dilate(mask: &Mask, offsets: &[(i64, i64)]) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                for &(dy, dx) in offsets {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        out[[ny as usize, nx as usize]] = true;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &Mask, offsets: &[(i64, i64)]) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let mut keep = true;
            for &(dy, dx) in offsets {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny < 0
                    || ny >= h as i64
                    || nx < 0
                    || nx >= w as i64
                    || !mask[[ny as usize, nx as usize]]
                {
                    keep = false;
                    break;
                }
            }
            out[[y, x]] = keep;
        }
    }
    out
}

/// Morphological closing with a disk structuring element: dilation followed
/// by erosion, computed on a radius-padded domain so the frame border does
/// not distort the result. Radius 0 is the identity.
pub fn morph_close(mask: &Mask, radius: u32) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as usize;
    let mut padded = Array2::from_elem((h + 2 * r, w + 2 * r), false);
    for y in 0..h {
        for x in 0..w {
            padded[[y + r, x + r]] = mask[[y, x]];
        }
    }
    let offsets = disk_offsets(radius);
    let closed = erode(&dilate(&padded, &offsets), &offsets);
    Array2::from_shape_fn((h, w), |(y, x)| closed[[y + r, x + r]])
}

/// 8-connected foreground components with at least `min_area` pixels, as
/// pixel lists of `(y, x)` coordinates. Components are reported in scan
/// order of their first pixel.
pub fn connected_components(mask: &Mask, min_area: usize) -> Vec<Vec<(u32, u32)>> {
    let (h, w) = mask.dim();
    let mut labels = vec![0u32; h * w];
    let mut components: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[y * w + x] != 0 {
                continue;
            }
            let id = components.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels[y * w + x] = id;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                pixels.push((cy as u32, cx as u32));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[ny * w + nx] == 0 {
                            labels[ny * w + nx] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            components.push(pixels);
        }
    }
    components.retain(|c| c.len() >= min_area);
    components
}

/// Minimal half-open box containing every pixel of each component.
pub fn components_to_boxes(components: &[Vec<(u32, u32)>]) -> Vec<BoundingBox> {
    components
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let mut x_min = u32::MAX;
            let mut y_min = u32::MAX;
            let mut x_max = 0u32;
            let mut y_max = 0u32;
            for &(y, x) in c {
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x + 1);
                y_max = y_max.max(y + 1);
            }
            BoundingBox {
                x_min,
                y_min,
                x_max,
                y_max,
            }
        })
        .collect()
}

/// Full post-processing pipeline: binarize, close, label, box.
pub fn detect<S: Scalar>(softmap: &SoftMap<S>, cfg: &PostprocessConfig) -> Vec<BoundingBox> {
    let mask = binarize(softmap, cfg.binarize_threshold);
    let closed = morph_close(&mask, cfg.closing_radius);
    let components = connected_components(&closed, cfg.min_component_area);
    components_to_boxes(&components)
}

/// Detections for one image, as exported to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
    pub threshold: f64,
    pub config_hash: String,
}

//! Stage-2 patch extraction: five 64x64 patches per detected box (center
//! plus the four corners), with a bright-region fallback when Stage 1 found
//! nothing, and an on-disk bag cache.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::preprocess::PreprocessedSample;
use crate::types::{BoundingBox, Label, PatchBag};
use crate::PATCH_SIZE;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Clamp a window of `size` pixels centered at `c` into `[0, dim)`.
fn clamped_window_start(c: f64, size: usize, dim: usize) -> usize {
    let half = (size / 2) as f64;
    let start = (c - half).round() as i64;
    start.clamp(0, (dim - size) as i64) as usize
}

fn extract_window<S: Scalar>(image: &Array2<S>, cy: f64, cx: f64) -> Array2<S> {
    let (h, w) = image.dim();
    let y0 = clamped_window_start(cy, PATCH_SIZE, h);
    let x0 = clamped_window_start(cx, PATCH_SIZE, w);
    image
        .slice(ndarray::s![y0..y0 + PATCH_SIZE, x0..x0 + PATCH_SIZE])
        .to_owned()
}

/// Five candidate patches for one detected box: centered at the box center
/// and at its four corners, each window shifted as needed to lie fully in
/// the frame.
pub fn patches_from_box<S: Scalar>(image: &Array2<S>, b: &BoundingBox) -> Vec<Array2<S>> {
    let (cx, cy) = b.center();
    let corners = [
        (cy, cx),
        (f64::from(b.y_min), f64::from(b.x_min)),
        (f64::from(b.y_min), f64::from(b.x_max)),
        (f64::from(b.y_max), f64::from(b.x_min)),
        (f64::from(b.y_max), f64::from(b.x_max)),
    ];
    corners
        .iter()
        .map(|&(cy, cx)| extract_window(image, cy, cx))
        .collect()
}

/// Sample `k` patches centered on pixels brighter than the 90th intensity
/// percentile (uniform over all pixels when the image is constant).
pub fn fallback_bright_patches<S: Scalar, R: Rng>(
    image: &Array2<S>,
    k: usize,
    rng: &mut R,
) -> Vec<Array2<S>> {
    let (h, w) = image.dim();
    let mut vals: Vec<S> = image.iter().cloned().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q_idx = ((vals.len() as f64 * 0.9) as usize).min(vals.len() - 1);
    let q = vals[q_idx];
    let bright: Vec<(usize, usize)> = image
        .indexed_iter()
        .filter(|(_, &v)| v > q)
        .map(|((y, x), _)| (y, x))
        .collect();
    (0..k)
        .map(|_| {
            let (cy, cx) = if bright.is_empty() {
                (rng.gen_range(0..h), rng.gen_range(0..w))
            } else {
                bright[rng.gen_range(0..bright.len())]
            };
            extract_window(image, cy as f64, cx as f64)
        })
        .collect()
}

/// Build the bag for one image: five patches per box, or the bright-region
/// fallback when no boxes were detected. For fallback bags the source boxes
/// record the five sampled windows.
pub fn build_bag<S: Scalar, R: Rng>(
    sample: &PreprocessedSample<S>,
    boxes: &[BoundingBox],
    rng: &mut R,
) -> PatchBag<S> {
    let (h, w) = sample.image.dim();
    let (patches, source_boxes) = if boxes.is_empty() {
        let patches = fallback_bright_patches(&sample.image, 5, rng);
        // Window positions are recoverable only from the patch content, so
        // record full-frame provenance boxes is not possible; store the
        // frame itself once.
        let frame = BoundingBox {
            x_min: 0,
            y_min: 0,
            x_max: w as u32,
            y_max: h as u32,
        };
        (patches, vec![frame])
    } else {
        let mut patches = Vec::with_capacity(5 * boxes.len());
        for b in boxes {
            patches.extend(patches_from_box(&sample.image, b));
        }
        (patches, boxes.to_vec())
    };
    PatchBag {
        patches,
        label: sample.label,
        image_id: sample.image_id.clone(),
        source_boxes,
    }
}

/// Sidecar metadata stored next to each cached bag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagMeta {
    pub image_id: String,
    pub label: Label,
    pub n_patches: usize,
    pub source_boxes: Vec<BoundingBox>,
    /// Fold the Stage-1 checkpoint was trained on.
    pub fold_id: usize,
    /// `train` or `test` relative to that fold.
    pub split: String,
    /// Parameter hash of the Stage-1 checkpoint that produced the boxes.
    pub stage1_hash: String,
    pub dense: bool,
}

const BAG_MAGIC: &[u8; 8] = b"MMILBAG1";

pub fn bag_bin_path(dir: &Path, image_id: &str) -> std::path::PathBuf {
    dir.join(format!("{image_id}.bin"))
}

pub fn bag_meta_path(dir: &Path, image_id: &str) -> std::path::PathBuf {
    dir.join(format!("{image_id}.json"))
}

/// Write the bag's patches as flat binary plus a JSON sidecar.
pub fn save_bag<S: Scalar>(dir: &Path, bag: &PatchBag<S>, meta: &BagMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(std::fs::File::create(bag_bin_path(dir, &bag.image_id))?);
    w.write_all(BAG_MAGIC)?;
    w.write_u32::<LittleEndian>(bag.patches.len() as u32)?;
    w.write_u32::<LittleEndian>(PATCH_SIZE as u32)?;
    for p in &bag.patches {
        for v in p.iter() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
    }
    w.flush()?;
    std::fs::write(
        bag_meta_path(dir, &bag.image_id),
        serde_json::to_string_pretty(meta)?,
    )?;
    Ok(())
}

/// Load a cached bag and its sidecar.
pub fn load_bag<S: Scalar>(dir: &Path, image_id: &str) -> Result<(PatchBag<S>, BagMeta)> {
    let meta_path = bag_meta_path(dir, image_id);
    let meta: BagMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::missing(format!("bag cache for `{image_id}`: {e}")))?,
    )?;
    let mut r = BufReader::new(std::fs::File::open(bag_bin_path(dir, image_id))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BAG_MAGIC {
        return Err(Error::validation(format!(
            "bag cache for `{image_id}` has a bad header"
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let ps = r.read_u32::<LittleEndian>()? as usize;
    if ps != PATCH_SIZE || n != meta.n_patches {
        return Err(Error::validation(format!(
            "bag cache for `{image_id}` is inconsistent with its sidecar"
        )));
    }
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
        for v in p.iter_mut() {
            *v = S::of_f64(r.read_f64::<LittleEndian>()?);
        }
        patches.push(p);
    }
    let bag = PatchBag {
        patches,
        label: meta.label,
        image_id: image_id.to_string(),
        source_boxes: meta.source_boxes.clone(),
    };
    bag.validate()?;
    Ok((bag, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{whiten, CropRecord};
    use crate::{WORK_H, WORK_W};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame_image() -> Array2<f64> {
        // Every pixel holds its own flat index, so a window's origin can be
        // read off its top-left value.
        Array2::from_shape_fn((WORK_H, WORK_W), |(y, x)| (y * WORK_W + x) as f64)
    }

    fn window_origin(patch: &Array2<f64>, image: &Array2<f64>) -> (usize, usize) {
        let v = patch[[0, 0]] as usize;
        let (y, x) = (v / WORK_W, v % WORK_W);
        let win = image.slice(ndarray::s![y..y + PATCH_SIZE, x..x + PATCH_SIZE]);
        assert!(
            win.iter().zip(patch.iter()).all(|(a, b)| a == b),
            "window content mismatch at ({y}, {x})"
        );
        (y, x)
    }

    #[test]
    fn patch_centers_are_center_and_corners() {
        let img = frame_image();
        let b = BoundingBox::new(100, 100, 200, 200).unwrap();
        let patches = patches_from_box(&img, &b);
        assert_eq!(patches.len(), 5);
        let expected_centers = [(150, 150), (100, 100), (100, 200), (200, 100), (200, 200)];
        for (p, &(ey, ex)) in patches.iter().zip(&expected_centers) {
            let (y0, x0) = window_origin(p, &img);
            assert_eq!((y0 + 32, x0 + 32), (ey, ex));
        }
    }

    #[test]
    fn corner_box_windows_are_clamped() {
        let img = frame_image();
        let b = BoundingBox::new(0, 0, 40, 40).unwrap();
        for p in patches_from_box(&img, &b) {
            assert_eq!(p.dim(), (PATCH_SIZE, PATCH_SIZE));
        }
        // The top-left corner patch starts exactly at the origin.
        let tl = &patches_from_box(&img, &b)[1];
        assert_eq!(window_origin(tl, &img), (0, 0));
    }

    #[test]
    fn tiny_box_gives_five_valid_patches() {
        let img = frame_image();
        let b = BoundingBox::new(10, 10, 12, 12).unwrap();
        let patches = patches_from_box(&img, &b);
        assert_eq!(patches.len(), 5);
        for p in &patches {
            assert_eq!(p.dim(), (PATCH_SIZE, PATCH_SIZE));
        }
    }

    #[test]
    fn random_boxes_always_give_in_frame_64x64_patches() {
        let img = frame_image();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..200 {
            let x0 = rng.gen_range(0..WORK_W as u32 - 1);
            let y0 = rng.gen_range(0..WORK_H as u32 - 1);
            let b = BoundingBox::new(
                x0,
                y0,
                rng.gen_range(x0 + 1..=WORK_W as u32),
                rng.gen_range(y0 + 1..=WORK_H as u32),
            )
            .unwrap();
            for p in patches_from_box(&img, &b) {
                assert_eq!(p.dim(), (PATCH_SIZE, PATCH_SIZE));
            }
        }
    }

    #[test]
    fn bright_fallback_targets_bright_square() {
        let mut img = Array2::from_elem((WORK_H, WORK_W), 0.0f64);
        for y in 200..264 {
            for x in 100..164 {
                img[[y, x]] = 1.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in fallback_bright_patches(&img, 5, &mut rng) {
            // Every sampled center is inside the bright square, so each
            // window overlaps it heavily.
            let ones = p.iter().filter(|&&v| v == 1.0).count();
            assert!(ones > 1000, "patch has only {ones} bright pixels");
        }
    }

    #[test]
    fn bright_fallback_deterministic_and_constant_image_ok() {
        let img = frame_image();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = fallback_bright_patches(&img, 5, &mut r1);
        let b = fallback_bright_patches(&img, 5, &mut r2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        let flat = Array2::from_elem((WORK_H, WORK_W), 0.5f64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(fallback_bright_patches(&flat, 5, &mut rng).len(), 5);
    }

    fn preprocessed(boxes: Vec<BoundingBox>) -> PreprocessedSample<f64> {
        let img = whiten(&frame_image()).unwrap();
        PreprocessedSample {
            image: img,
            gt_boxes: boxes,
            foreground: Array2::from_elem((WORK_H, WORK_W), true),
            crop_record: CropRecord {
                crop: BoundingBox::new(0, 0, WORK_W as u32, WORK_H as u32).unwrap(),
                original_size: (WORK_W as u32, WORK_H as u32),
                work_size: (WORK_W as u32, WORK_H as u32),
            },
            label: Label::Malignant,
            subject_id: "s".into(),
            image_id: "img7".into(),
        }
    }

    #[test]
    fn bag_sizes_follow_box_count() {
        let s = preprocessed(vec![]);
        let boxes = vec![
            BoundingBox::new(10, 10, 60, 60).unwrap(),
            BoundingBox::new(100, 100, 150, 160).unwrap(),
            BoundingBox::new(200, 300, 250, 400).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bag = build_bag(&s, &boxes, &mut rng);
        assert_eq!(bag.len(), 15);
        assert_eq!(bag.source_boxes.len(), 3);
        bag.validate().unwrap();

        let empty = build_bag(&s, &[], &mut rng);
        assert_eq!(empty.len(), 5);
        empty.validate().unwrap();
    }

    #[test]
    fn build_bag_deterministic_under_seed() {
        let s = preprocessed(vec![]);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let a = build_bag(&s, &[], &mut r1);
        let b = build_bag(&s, &[], &mut r2);
        for (x, y) in a.patches.iter().zip(&b.patches) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn bag_cache_roundtrip() {
        let s = preprocessed(vec![]);
        let boxes = vec![BoundingBox::new(30, 40, 90, 120).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bag = build_bag(&s, &boxes, &mut rng);
        let meta = BagMeta {
            image_id: bag.image_id.clone(),
            label: bag.label,
            n_patches: bag.len(),
            source_boxes: bag.source_boxes.clone(),
            fold_id: 0,
            split: "train".into(),
            stage1_hash: "abc".into(),
            dense: false,
        };
        let dir = tempfile::TempDir::new().unwrap();
        save_bag(dir.path(), &bag, &meta).unwrap();
        let (loaded, meta2): (PatchBag<f64>, _) = load_bag(dir.path(), &bag.image_id).unwrap();
        assert_eq!(loaded.len(), bag.len());
        assert_eq!(meta2.stage1_hash, "abc");
        for (a, b) in loaded.patches.iter().zip(&bag.patches) {
            assert_eq!(a, b);
        }
    }
}

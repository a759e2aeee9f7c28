//! Domain data model: samples, boxes, softmaps, patch bags.
//!
//! Boxes use a half-open integer convention `[x_min, x_max) x [y_min, y_max)`
//! with the origin at the top-left corner, `x` indexing columns and `y`
//! indexing rows. Half-open boxes make areas and IoU integer-exact.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::PATCH_SIZE;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Image-level class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::validation(format!(
                "label must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    /// Training target value: 0.0 for benign, 1.0 for malignant.
    pub fn target<S: Scalar>(self) -> S {
        S::of_f64(f64::from(self.as_u8()))
    }
}

impl Serialize for Label {
    fn serialize<T: serde::Serializer>(&self, s: T) -> std::result::Result<T::Ok, T::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned rectangle, half-open in both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    /// Build a box, rejecting nonpositive area.
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::validation(format!(
                "box must have positive area: ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    /// Number of pixels covered by the box.
    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// True when the box lies fully inside a `width x height` frame.
    pub fn inside_frame(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Intersection box, if nonempty.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        if x_min < x_max && y_min < y_max {
            Some(BoundingBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            None
        }
    }

    /// Pixel count of the intersection (0 when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        self.intersect(other).map_or(0, |b| b.area())
    }

    /// True when the pixel with top-left corner `(x, y)` lies in the box.
    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Center in continuous coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            f64::from(self.x_min + self.x_max) / 2.0,
            f64::from(self.y_min + self.y_max) / 2.0,
        )
    }
}

/// Pixel-count area of a bounding box.
pub fn box_area(b: &BoundingBox) -> u64 {
    b.area()
}

/// One grayscale image plus its annotation.
#[derive(Debug, Clone)]
pub struct MammogramSample<S: Scalar> {
    /// Row-major intensities in `[0, 1]`, shape `(height, width)`.
    pub image: Array2<S>,
    pub subject_id: String,
    pub image_id: String,
    pub label: Label,
    pub gt_boxes: Vec<BoundingBox>,
    /// Informational view tag, e.g. MLO or CC.
    pub view: Option<String>,
}

impl<S: Scalar> MammogramSample<S> {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "image `{}` has empty shape {h}x{w}",
                self.image_id
            )));
        }
        for b in &self.gt_boxes {
            b.validate()?;
            if !b.inside_frame(w as u32, h as u32) {
                return Err(Error::validation(format!(
                    "gt box ({}, {}, {}, {}) outside {w}x{h} image `{}`",
                    b.x_min, b.y_min, b.x_max, b.y_max, self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel mass-probability map, same spatial shape as its input image.
#[derive(Debug, Clone)]
pub struct SoftMap<S: Scalar> {
    pub probs: Array2<S>,
}

impl<S: Scalar> SoftMap<S> {
    pub fn new(probs: Array2<S>) -> Result<Self> {
        let m = SoftMap { probs };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for &v in self.probs.iter() {
            if !(v >= S::zero() && v <= S::one()) {
                return Err(Error::validation(format!(
                    "softmap value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.probs.dim()
    }
}

/// Bag of 64x64 instance patches for one image.
#[derive(Debug, Clone)]
pub struct PatchBag<S: Scalar> {
    pub patches: Vec<Array2<S>>,
    pub label: Label,
    pub image_id: String,
    /// Boxes the patches were extracted from (one per group of five under
    /// the standard extractor, one per patch for dense bags).
    pub source_boxes: Vec<BoundingBox>,
}

impl<S: Scalar> PatchBag<S> {
    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::validation(format!(
                "patch bag for `{}` is empty",
                self.image_id
            )));
        }
        for p in &self.patches {
            if p.dim() != (PATCH_SIZE, PATCH_SIZE) {
                return Err(Error::ShapeMismatch(format!(
                    "patch of shape {:?} in bag `{}`, expected {PATCH_SIZE}x{PATCH_SIZE}",
                    p.dim(),
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Annotation record as stored in `annotations.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub subject_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
}

/// Lightweight reference to one dataset entry; pixels are loaded on demand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRef {
    #[serde(flatten)]
    pub record: AnnotationRecord,
    /// Image dimensions `(width, height)` read from the file header.
    pub size: (u32, u32),
}

/// Parsed dataset directory: annotation entries plus the root path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root_path: String,
    pub samples: Vec<SampleRef>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if seen.insert(s.record.subject_id.clone()) {
                out.push(s.record.subject_id.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_area_matches_spec_examples() {
        assert_eq!(box_area(&BoundingBox::new(0, 0, 10, 10).unwrap()), 100);
        assert_eq!(box_area(&BoundingBox::new(3, 7, 4, 8).unwrap()), 1);
        assert_eq!(
            box_area(&BoundingBox::new(0, 0, 640, 320).unwrap()),
            204_800
        );
    }

    #[test]
    fn zero_area_box_rejected() {
        assert!(BoundingBox::new(5, 5, 5, 10).is_err());
        assert!(BoundingBox::new(5, 5, 10, 5).is_err());
        assert!(BoundingBox::new(5, 5, 4, 10).is_err());
    }

    #[test]
    fn intersection() {
        let a = BoundingBox::new(0, 0, 10, 10).unwrap();
        let b = BoundingBox::new(5, 0, 15, 10).unwrap();
        assert_eq!(a.intersection_area(&b), 50);
        let c = BoundingBox::new(20, 20, 30, 30).unwrap();
        assert_eq!(a.intersection_area(&c), 0);
    }

    #[test]
    fn out_of_frame_box_detected() {
        let img = Array2::<f64>::zeros((20, 30));
        let sample = MammogramSample {
            image: img,
            subject_id: "s".into(),
            image_id: "i".into(),
            label: Label::Benign,
            gt_boxes: vec![BoundingBox::new(25, 5, 31, 10).unwrap()],
            view: None,
        };
        assert!(sample.validate().is_err());
    }

    #[test]
    fn label_roundtrip() {
        assert_eq!(Label::from_u8(0).unwrap(), Label::Benign);
        assert_eq!(Label::from_u8(1).unwrap(), Label::Malignant);
        assert!(Label::from_u8(2).is_err());
        let j = serde_json::to_string(&Label::Malignant).unwrap();
        assert_eq!(j, "1");
        let back: Label = serde_json::from_str(&j).unwrap();
        assert_eq!(back, Label::Malignant);
    }
}

//! Two-stage weakly supervised pipeline for whole-image malignancy
//! classification of mammogram-like images.
//!
//! Stage 1 ([`locnet`]) is a small encoder-decoder network that maps a
//! preprocessed image to a per-pixel mass-probability softmap, which is
//! post-processed ([`detect`]) into candidate bounding boxes. Stage 2
//! ([`mil`]) classifies the whole image benign vs. malignant by encoding
//! 64x64 patches taken from those boxes ([`patches`]) and pooling them with
//! softmax attention.
//!
//! Everything numeric is generic over the scalar type ([`Scalar`]): the
//! pipeline runs in `f32`, verification (gradient checks, loss oracles)
//! instantiates the same code in `f64`.

pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod locnet;
pub mod mil;
pub mod nn;
pub mod num;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use num::Scalar;
pub use types::{BoundingBox, DatasetManifest, Label, MammogramSample, PatchBag, SoftMap};

/// Working resolution after preprocessing: height.
pub const WORK_H: usize = 640;
/// Working resolution after preprocessing: width.
pub const WORK_W: usize = 320;
/// Side length of Stage-2 instance patches.
pub const PATCH_SIZE: usize = 64;

/// Scalar type used by the training pipeline and the CLI.
pub type PipelineFloat = f32;
/// Scalar type used by gradient checks and numeric verification.
pub type VerifyFloat = f64;

/// Localization network at pipeline precision.
pub type LocNet32 = locnet::LocNet<f32>;
/// Localization network at verification precision.
pub type LocNet64 = locnet::LocNet<f64>;
/// MIL classifier at pipeline precision.
pub type MilNet32 = mil::MilNet<f32>;
/// MIL classifier at verification precision.
pub type MilNet64 = mil::MilNet<f64>;

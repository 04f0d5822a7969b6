//! Copy-move forgery detection with a-contrario thresholded matching of
//! raw gradient-patch descriptors.
//!
//! Keypoints come from a difference-of-Gaussians scale space. Around each
//! one an oriented, scale-normalized patch is sampled per color channel and
//! its central-difference gradients form the descriptor. Two descriptors
//! match only when every cell agrees within `τ`, where `τ` is derived from
//! a Gaussian noise model so that the expected number of false matches over
//! all tests stays below a user-chosen `ε`. Mirrored copies are caught by
//! also comparing against the flipped descriptor.
//!
//! The pipeline is [`pipeline::detect`]; the building blocks live in
//! [`scale_space`], [`descriptor`], [`acontrario`] and [`matcher`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acontrario;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod image_io;
pub mod matcher;
pub mod pipeline;
pub mod scale_space;
pub mod synthetic;

pub use acontrario::{AContrarioParams, Threshold, ThresholdMode};
pub use config::Config;
pub use descriptor::{GradientDescriptor, Patch};
pub use error::{Error, Result};
pub use image_io::Raster;
pub use matcher::{MatchPair, PairTest};
pub use pipeline::{DatasetSummary, DetectionReport, Verdict};
pub use scale_space::{Keypoint, Pyramid, ScaleSpaceConfig};

//! Desk-scale harness for measuring and mitigating good-weather bias in
//! object detectors.
//!
//! The crate renders labeled synthetic traffic scenes, corrupts them with
//! parametric weather effects, trains a small single-shot multibox detector
//! from scratch, and reports per-class AP / mAP for each stage of the bias
//! identification and mitigation procedure.

pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod ingest;
pub mod pipeline;
pub mod rng;
pub mod scenegen;

pub use bbox::{iou, BBox};
pub use dataset::{Annotation, ClassSet, ConditionTag, DatasetManifest, Detection, ImageRecord};

//! Temporal action detection over pre-extracted clip features.
//!
//! Long videos are cut into overlapping fixed-length windows of clip
//! features. A small boundary-matching network scores every candidate
//! segment inside each window, candidates are pooled per video and thinned
//! with Soft-NMS, and each surviving proposal is labelled by sampling the
//! clip-level verb/noun classifier scores stored next to the features.
//! Detections are scored with mAP at temporal IoU 0.1 to 0.5.

pub mod bmn;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod postproc;
pub mod synth;
pub mod types;
pub mod windowing;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use exec::Execution;
pub use types::{segment_iou, ClipFeatureSequence, GroundTruth, GroundTruthEntry, Segment, TimeBase};

//! Object-guided attention for short-term object interaction anticipation.
//!
//! The pipeline runs a two-branch backbone (a 2-D still branch over the
//! high-resolution last frame and a 3-D fast branch over the sampled clip),
//! fuses embedded object detections into the 3-D feature stack with
//! cross-attention, merges both stacks in a feature pyramid, and predicts
//! next-active-object boxes, nouns, verbs and time to contact with a
//! two-stage detection head. Evaluation uses Top-5 mean average precision.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attention;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod train;
pub mod types;
pub mod world;

pub use error::{Error, Result};
pub use types::{
    box_iou, rescale_box, validate, BoundingBox, Detection, DetectionSet, Frame, StaAnnotation, StaPrediction, StillFrame,
    VideoClip, Vocab,
};

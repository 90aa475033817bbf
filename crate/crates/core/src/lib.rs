//! Recovering missed person detections in uncalibrated multi-camera streams.
//!
//! Detections from every view are tracked per camera with a two-stage
//! high/low score tracker, then a geometric encoder trained on a cross-view
//! synchronization pretext retrieves boxes in the other views. The merged
//! set is emitted as augmented detections and pseudo labels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod mva;
pub mod nms;
pub mod pipeline;
pub mod simulator;
pub mod tracker;

pub use assignment::{hungarian, AssignmentResult};
pub use detection::{Detection, Provenance, StreamHeader};
pub use error::{Error, Result};
pub use geometry::{iou, Box2D, CameraMeta, CameraSet};
pub use nms::nms;

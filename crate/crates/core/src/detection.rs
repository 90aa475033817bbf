//! Detection records and the stream header shared by every detection file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box2D;

pub const SCHEMA_VERSION: u32 = 1;

/// Where a box in an augmented set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Tracked,
    CrossView,
}

/// One candidate box in one camera view at one frame.
///
/// This is also the JSON-lines wire record; field order here is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub video: String,
    pub frame: u32,
    pub camera: u32,
    pub bbox: Box2D,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    /// Ground-truth linkage written by the simulator. Never read by the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
}

impl Detection {
    pub fn new(video: impl Into<String>, frame: u32, camera: u32, bbox: Box2D, score: f64) -> Self {
        Self {
            video: video.into(),
            frame,
            camera,
            bbox,
            score,
            embedding: None,
            track_id: None,
            identity: None,
            provenance: None,
            round: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn validate(&self, embedding_dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::input(format!(
                "score {} outside [0, 1] ({} frame {} camera {})",
                self.score, self.video, self.frame, self.camera
            )));
        }
        if let Some(e) = &self.embedding {
            if e.len() != embedding_dim {
                return Err(Error::input(format!(
                    "embedding has dimension {} but the stream declares {}",
                    e.len(),
                    embedding_dim
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("non-finite embedding value"));
            }
        }
        Ok(())
    }

    /// Total order used for every emitted file: video, frame, camera, then
    /// box corners and score.
    pub fn output_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
        a.video
            .cmp(&b.video)
            .then(a.frame.cmp(&b.frame))
            .then(a.camera.cmp(&b.camera))
            .then(a.bbox.x1().total_cmp(&b.bbox.x1()))
            .then(a.bbox.y1().total_cmp(&b.bbox.y1()))
            .then(a.bbox.x2().total_cmp(&b.bbox.x2()))
            .then(a.bbox.y2().total_cmp(&b.bbox.y2()))
            .then(b.score.total_cmp(&a.score))
            .then(a.track_id.cmp(&b.track_id))
    }
}

/// First line of every detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHeader {
    pub schema_version: u32,
    pub embedding_dim: usize,
    /// Path of the cameras file, relative to the stream's directory.
    pub cameras: String,
    pub fps: f64,
}

impl StreamHeader {
    pub fn new(embedding_dim: usize, cameras: impl Into<String>, fps: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            embedding_dim,
            cameras: cameras.into(),
            fps,
        }
    }
}

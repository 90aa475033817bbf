//! Synthetic multi-camera scenes with exact ground truth.

pub mod corruption;
pub mod render;
pub mod world;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, StreamHeader};
use crate::error::Result;
use crate::geometry::CameraSet;
use crate::io::{write_json, write_jsonl, DetectionStream};

pub use corruption::{corrupt_detections, CorruptionModel};
pub use render::{project_to_views, GroundTruthRecord, Keypoints, PinholeCamera, HARD_OCCLUSION};
pub use world::{simulate_world, CameraConfig, Trajectory, WorldConfig};

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GT_FILE: &str = "gt.jsonl";
pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub world: WorldConfig,
    pub corruption: CorruptionModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub cameras: CameraSet,
    pub fps: f64,
    pub embedding_dim: usize,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthRecord>,
}

/// Runs the world, renders every view and corrupts the result.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    let w = &cfg.world;
    let trajectories = simulate_world(w)?;
    let ground_truth = project_to_views(&trajectories, w)?;
    let cameras = CameraSet::new(
        w.cameras
            .iter()
            .map(|c| PinholeCamera::new(c).meta(w.fps))
            .collect(),
    )?;
    let detections = corrupt_detections(
        &ground_truth,
        &cfg.corruption,
        &cameras,
        &w.video,
        w.frames,
        w.seed,
    )?;
    Ok(Simulation {
        cameras,
        fps: w.fps,
        embedding_dim: cfg.corruption.embedding_dim,
        detections,
        ground_truth,
    })
}

impl Simulation {
    pub fn stream(&self) -> DetectionStream {
        DetectionStream::new(
            StreamHeader::new(self.embedding_dim, CAMERAS_FILE, self.fps),
            self.detections.clone(),
        )
    }

    /// Writes detections, ground truth and camera metadata into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        write_json(&dir.join(CAMERAS_FILE), &self.cameras)?;
        write_jsonl::<(), _>(&dir.join(GT_FILE), None, &self.ground_truth)?;
        self.stream().write(&dir.join(DETECTIONS_FILE))
    }
}

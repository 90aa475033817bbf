//! Per-camera temporal tracking producing the tracked box set.

mod bidirectional;
mod byte;
pub mod kalman;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use bidirectional::{run_bidirectional, run_forward};
pub use byte::{byte_step, ByteTracker, HistoryEntry, TrackStatus, TrackerConfig, Tracklet};
pub use kalman::{KalmanFilter, KalmanState};

use crate::detection::Detection;
use crate::error::Result;

/// Tracks every (video, camera) stream in `dets` independently and numbers
/// the resulting tracklets consecutively in (video, camera, local id) order.
pub fn track_stream(dets: &[Detection], cfg: &TrackerConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    let mut groups: BTreeMap<(String, u32), Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups
            .entry((d.video.clone(), d.camera))
            .or_default()
            .push(d.clone());
    }
    for g in groups.values_mut() {
        g.sort_by_key(|d| d.frame);
    }
    let per_group: Vec<Vec<Tracklet>> = groups
        .par_iter()
        .map(|(_, g)| run_bidirectional(g, cfg))
        .collect::<Result<_>>()?;

    let mut next = 0u64;
    let mut out = Vec::new();
    for group in per_group {
        for mut t in group {
            t.track_id = next;
            for h in &mut t.history {
                h.detection.track_id = Some(next);
            }
            next += 1;
            out.push(t);
        }
    }
    Ok(out)
}

/// Flattens tracklets into detection records carrying their track id.
pub fn tracked_detections(tracklets: &[Tracklet]) -> Vec<Detection> {
    let mut out: Vec<Detection> = tracklets
        .iter()
        .flat_map(|t| {
            t.history.iter().map(move |h| {
                let mut d = h.detection.clone();
                d.track_id = Some(t.track_id);
                d
            })
        })
        .collect();
    out.sort_by(Detection::output_order);
    out
}

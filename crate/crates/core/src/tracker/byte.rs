//! Two-stage high/low score association for a single camera.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::iou_corners;

use super::kalman::{KalmanFilter, KalmanState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Detections scoring above this form the high-score set.
    pub high_thresh: f64,
    /// Detections at or below this are ignored entirely.
    pub low_thresh: f64,
    /// Maximum IoU distance `1 - IoU` accepted in the high-score stage.
    pub match_iou_first: f64,
    /// Maximum IoU distance accepted in the low-score stage.
    pub match_iou_second: f64,
    /// Unmatched frames after which a tracklet is removed.
    pub max_lost_age: u32,
    /// Unmatched high-score detections above this start new tracklets.
    pub new_track_min_score: f64,
    pub bidirectional: bool,
    /// IoU above which boxes recovered by the two passes are duplicates.
    pub merge_iou: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            high_thresh: 0.6,
            low_thresh: 0.1,
            match_iou_first: 0.8,
            match_iou_second: 0.5,
            max_lost_age: 30,
            new_track_min_score: 0.6,
            bidirectional: true,
            merge_iou: 0.9,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_thresh
            && self.low_thresh < self.high_thresh
            && self.high_thresh <= 1.0)
        {
            return Err(Error::input(
                "tracker thresholds need 0 <= low_thresh < high_thresh <= 1",
            ));
        }
        for (name, v) in [
            ("match_iou_first", self.match_iou_first),
            ("match_iou_second", self.match_iou_second),
            ("merge_iou", self.merge_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::input(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.max_lost_age == 0 {
            return Err(Error::input("max_lost_age must be at least 1"));
        }
        // Every high-score detection has to be able to start a tracklet.
        if self.new_track_min_score > self.high_thresh {
            return Err(Error::input(
                "new_track_min_score may not exceed high_thresh",
            ));
        }
        Ok(())
    }

    pub fn is_high(&self, score: f64) -> bool {
        score > self.high_thresh
    }

    pub fn is_low(&self, score: f64) -> bool {
        score > self.low_thresh && score <= self.high_thresh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub frame: u32,
    /// Position of the detection in its frame's detection list.
    pub slot: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub track_id: u64,
    pub video: String,
    pub camera: u32,
    pub state: KalmanState,
    /// Strictly increasing in frame for forward tracking.
    pub history: Vec<HistoryEntry>,
    pub status: TrackStatus,
    pub frames_since_update: u32,
}

impl Tracklet {
    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.history.iter().map(|h| h.frame)
    }
}

/// Stateful per-camera tracker driving [`byte_step`] one frame at a time.
#[derive(Debug, Clone)]
pub struct ByteTracker {
    pub cfg: TrackerConfig,
    pub kf: KalmanFilter,
    pub tracklets: Vec<Tracklet>,
    next_id: u64,
}

impl ByteTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            kf: KalmanFilter::default(),
            tracklets: Vec::new(),
            next_id: 0,
        }
    }

    pub fn step(&mut self, frame: u32, dets: &[Detection]) -> Result<()> {
        let tracklets = std::mem::take(&mut self.tracklets);
        self.tracklets = byte_step(
            tracklets,
            frame,
            dets,
            &self.cfg,
            &self.kf,
            &mut self.next_id,
        )?;
        Ok(())
    }

    pub fn finish(self) -> Vec<Tracklet> {
        self.tracklets
    }
}

/// Cost used for gated-out pairs; far above any IoU distance.
const INFEASIBLE: f64 = 1e6;

fn gated_match(
    tracks: &[usize],
    all: &[Tracklet],
    dets: &[usize],
    frame_dets: &[Detection],
    max_cost: f64,
) -> Result<Vec<(usize, usize)>> {
    if tracks.is_empty() || dets.is_empty() {
        return Ok(Vec::new());
    }
    let mut cost = Array2::from_elem((tracks.len(), dets.len()), INFEASIBLE);
    for (r, &t) in tracks.iter().enumerate() {
        let pred = all[t].state.corners();
        for (c, &d) in dets.iter().enumerate() {
            let dist = 1.0 - iou_corners(&pred, &frame_dets[d].bbox.corners());
            if dist <= max_cost {
                cost[[r, c]] = dist;
            }
        }
    }
    let res = hungarian(cost.view())?;
    Ok(res
        .pairs()
        .filter(|&(r, c)| cost[[r, c]] <= max_cost)
        .map(|(r, c)| (tracks[r], dets[c]))
        .collect())
}

/// Advances `tracklets` by one frame.
///
/// Active and lost tracklets are predicted forward, matched against the
/// high-score detections, then the leftovers against the low-score ones.
/// Unmatched high-score detections start new tracklets; tracklets unmatched
/// for `max_lost_age` consecutive steps are removed. Removed tracklets are
/// carried along untouched so their history survives.
pub fn byte_step(
    mut tracklets: Vec<Tracklet>,
    frame: u32,
    frame_dets: &[Detection],
    cfg: &TrackerConfig,
    kf: &KalmanFilter,
    next_id: &mut u64,
) -> Result<Vec<Tracklet>> {
    if let Some(first) = frame_dets.first() {
        if frame_dets
            .iter()
            .any(|d| d.camera != first.camera || d.video != first.video)
        {
            return Err(Error::input(
                "byte_step needs detections from a single camera",
            ));
        }
        if tracklets
            .iter()
            .any(|t| t.camera != first.camera || t.video != first.video)
        {
            return Err(Error::input(
                "tracklets and detections come from different cameras",
            ));
        }
    }

    let live: Vec<usize> = (0..tracklets.len())
        .filter(|&i| tracklets[i].status != TrackStatus::Removed)
        .collect();
    for &i in &live {
        tracklets[i].state = kf.predict(&tracklets[i].state);
    }

    let high: Vec<usize> = (0..frame_dets.len())
        .filter(|&i| cfg.is_high(frame_dets[i].score))
        .collect();
    let low: Vec<usize> = (0..frame_dets.len())
        .filter(|&i| cfg.is_low(frame_dets[i].score))
        .collect();

    let first = gated_match(&live, &tracklets, &high, frame_dets, cfg.match_iou_first)?;
    let mut track_matched = vec![false; tracklets.len()];
    let mut det_matched = vec![false; frame_dets.len()];
    for &(t, d) in &first {
        track_matched[t] = true;
        det_matched[d] = true;
    }
    let remaining: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&t| !track_matched[t])
        .collect();
    let second = gated_match(
        &remaining,
        &tracklets,
        &low,
        frame_dets,
        cfg.match_iou_second,
    )?;
    for &(t, d) in &second {
        track_matched[t] = true;
        det_matched[d] = true;
    }

    for (t, d) in first.into_iter().chain(second) {
        let det = &frame_dets[d];
        let tr = &mut tracklets[t];
        tr.state = kf.update(&tr.state, &det.bbox);
        tr.history.push(HistoryEntry {
            frame,
            slot: d,
            detection: det.clone(),
        });
        tr.status = TrackStatus::Active;
        tr.frames_since_update = 0;
    }

    for &t in &live {
        if !track_matched[t] {
            let tr = &mut tracklets[t];
            tr.frames_since_update += 1;
            tr.status = if tr.frames_since_update >= cfg.max_lost_age {
                TrackStatus::Removed
            } else {
                TrackStatus::Lost
            };
        }
    }

    for &d in &high {
        if det_matched[d] || !(frame_dets[d].score > cfg.new_track_min_score) {
            continue;
        }
        let det = &frame_dets[d];
        tracklets.push(Tracklet {
            track_id: *next_id,
            video: det.video.clone(),
            camera: det.camera,
            state: kf.initiate(&det.bbox),
            history: vec![HistoryEntry {
                frame,
                slot: d,
                detection: det.clone(),
            }],
            status: TrackStatus::Active,
            frames_since_update: 0,
        });
        *next_id += 1;
    }

    Ok(tracklets)
}

//! Detection metrics: precision, recall, AP, hard-case and holistic recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, Box2D, CameraSet};
use crate::simulator::{GroundTruthRecord, Keypoints};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLevel {
    WholeBody,
    Face,
    Eye,
}

impl EvalLevel {
    pub fn default_iou(self) -> f64 {
        match self {
            EvalLevel::WholeBody => 0.5,
            EvalLevel::Face | EvalLevel::Eye => 0.3,
        }
    }
}

impl std::str::FromStr for EvalLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole_body" => Ok(EvalLevel::WholeBody),
            "face" => Ok(EvalLevel::Face),
            "eye" => Ok(EvalLevel::Eye),
            _ => Err(Error::input(format!(
                "unknown level {s:?} (whole_body, face, eye)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub level: EvalLevel,
    /// Match threshold; the level's default when absent.
    pub iou_thresh: Option<f64>,
    pub pseudo_box_size: f64,
    /// Predictions below this score are ignored for P, R and hard/holistic
    /// recall, but still ranked for AP.
    pub score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level: EvalLevel::WholeBody,
            iou_thresh: None,
            pseudo_box_size: 40.0,
            score_thresh: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn iou(&self) -> f64 {
        self.iou_thresh.unwrap_or_else(|| self.level.default_iou())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.iou();
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::input("iou_thresh must lie in (0, 1]"));
        }
        if !(self.pseudo_box_size > 0.0) {
            return Err(Error::input("pseudo_box_size must be positive"));
        }
        Ok(())
    }
}

/// Image key: (video, frame, camera).
pub type ImageKey = (String, u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPred {
    pub image: ImageKey,
    pub bbox: Box2D,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGt {
    pub image: ImageKey,
    pub bbox: Box2D,
    pub hard: bool,
    pub identity: Option<u32>,
}

/// Keypoint detections from an external pose model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointPrediction {
    pub video: String,
    pub frame: u32,
    pub camera: u32,
    pub keypoints: Keypoints,
    pub score: f64,
}

/// A `size`-square box centered at `kp`, clipped to the image.
pub fn keypoint_pseudobox(kp: [f64; 2], size: f64, width: f64, height: f64) -> Option<Box2D> {
    let h = size / 2.0;
    Box2D::new(kp[0] - h, kp[1] - h, kp[0] + h, kp[1] + h)
        .ok()?
        .clip(width, height)
}

fn level_point(level: EvalLevel, kp: &Keypoints) -> [f64; 2] {
    match level {
        EvalLevel::Eye => kp.eye_center(),
        _ => kp.face_center(),
    }
}

fn image_size(cams: &CameraSet, camera: u32) -> Result<(f64, f64)> {
    cams.get(camera)
        .map(|c| (c.width as f64, c.height as f64))
        .ok_or_else(|| Error::input(format!("camera {camera} missing from camera file")))
}

/// Ground truth at the configured level; invisible instances and, for
/// face and eye, instances without keypoints are dropped.
pub fn gt_at_level(
    gt: &[GroundTruthRecord],
    cfg: &EvalConfig,
    cams: &CameraSet,
) -> Result<Vec<EvalGt>> {
    let mut out = Vec::new();
    for g in gt.iter().filter(|g| g.visible) {
        let image = (g.video.clone(), g.frame, g.camera);
        let bbox = match cfg.level {
            EvalLevel::WholeBody => Some(g.bbox),
            level => match &g.keypoints {
                None => None,
                Some(kp) => {
                    let (w, h) = image_size(cams, g.camera)?;
                    keypoint_pseudobox(level_point(level, kp), cfg.pseudo_box_size, w, h)
                }
            },
        };
        if let Some(bbox) = bbox {
            out.push(EvalGt {
                image,
                bbox,
                hard: g.hard,
                identity: Some(g.identity),
            });
        }
    }
    Ok(out)
}

pub fn detection_preds(dets: &[Detection]) -> Vec<EvalPred> {
    dets.iter()
        .map(|d| EvalPred {
            image: (d.video.clone(), d.frame, d.camera),
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

pub fn keypoint_preds(
    preds: &[KeypointPrediction],
    cfg: &EvalConfig,
    cams: &CameraSet,
) -> Result<Vec<EvalPred>> {
    let mut out = Vec::new();
    for p in preds {
        let (w, h) = image_size(cams, p.camera)?;
        if let Some(bbox) = keypoint_pseudobox(
            level_point(cfg.level, &p.keypoints),
            cfg.pseudo_box_size,
            w,
            h,
        ) {
            out.push(EvalPred {
                image: (p.video.clone(), p.frame, p.camera),
                bbox,
                score: p.score,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per prediction: the matched ground truth index.
    pub pred_match: Vec<Option<usize>>,
    /// Per ground truth: the matched prediction index.
    pub gt_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn is_tp(&self, pred: usize) -> bool {
        self.pred_match[pred].is_some()
    }
}

fn rank(preds: &[EvalPred]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy one-to-one matching per image: predictions in descending score
/// take the unmatched ground truth of highest IoU, if at least `iou_thresh`.
pub fn match_predictions(preds: &[EvalPred], gts: &[EvalGt], iou_thresh: f64) -> MatchResult {
    let mut by_image: BTreeMap<&ImageKey, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(&g.image).or_default().push(i);
    }
    let mut pred_match = vec![None; preds.len()];
    let mut gt_match = vec![None; gts.len()];
    for p in rank(preds) {
        let Some(cands) = by_image.get(&preds[p].image) else {
            continue;
        };
        let mut best: Option<(f64, usize)> = None;
        for &g in cands {
            if gt_match[g].is_some() {
                continue;
            }
            let o = iou(&preds[p].bbox, &gts[g].bbox);
            if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, g));
            }
        }
        if let Some((_, g)) = best {
            pred_match[p] = Some(g);
            gt_match[g] = Some(p);
        }
    }
    MatchResult {
        pred_match,
        gt_match,
    }
}

/// Area under the all-point interpolated precision-recall curve.
pub fn average_precision(preds: &[EvalPred], m: &MatchResult, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(preds.len());
    let mut tp = 0usize;
    for (k, p) in rank(preds).into_iter().enumerate() {
        if m.is_tp(p) {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in points {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub predictions: usize,
    pub predictions_scored: usize,
    pub ground_truth: usize,
    pub true_positives: usize,
    pub hard_ground_truth: usize,
    pub hard_matched: usize,
    pub holistic_sets: usize,
    pub holistic_complete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub level: EvalLevel,
    pub iou_thresh: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub hard_recall: f64,
    pub holistic_recall: Option<f64>,
    pub counts: Counts,
    pub flags: Vec<String>,
}

fn ratio(num: usize, den: usize, flag: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(flag.to_string());
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Ground truth indices matched by a prediction scoring at least `score_thresh`.
fn scored_matches(preds: &[EvalPred], m: &MatchResult, score_thresh: f64) -> Vec<bool> {
    m.gt_match
        .iter()
        .map(|p| p.is_some_and(|p| preds[p].score >= score_thresh))
        .collect()
}

/// Recall over hard ground truth; `None` when there is none.
pub fn hard_recall(preds: &[EvalPred], gts: &[EvalGt], cfg: &EvalConfig) -> Option<f64> {
    let m = match_predictions(preds, gts, cfg.iou());
    let hit = scored_matches(preds, &m, cfg.score_thresh);
    let hard: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].hard).collect();
    (!hard.is_empty()).then(|| hard.iter().filter(|&&g| hit[g]).count() as f64 / hard.len() as f64)
}

fn holistic_counts(gts: &[EvalGt], hit: &[bool]) -> Result<(usize, usize)> {
    let mut sets: BTreeMap<(&str, u32, u32), bool> = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        let id = gt.identity.ok_or_else(|| {
            Error::input("holistic recall needs identity labels on every ground-truth record")
        })?;
        let all = sets
            .entry((gt.image.0.as_str(), gt.image.1, id))
            .or_insert(true);
        *all &= hit[g];
    }
    Ok((sets.values().filter(|&&v| v).count(), sets.len()))
}

/// Fraction of (frame set, identity) pairs detected in every view where the
/// identity is visible; `None` when nothing is visible.
pub fn holistic_recall(
    preds: &[EvalPred],
    gts: &[EvalGt],
    cfg: &EvalConfig,
) -> Result<Option<f64>> {
    let m = match_predictions(preds, gts, cfg.iou());
    let (done, total) = holistic_counts(gts, &scored_matches(preds, &m, cfg.score_thresh))?;
    Ok((total > 0).then(|| done as f64 / total as f64))
}

/// Full report; `holistic` toggles the identity-dependent metric.
pub fn evaluate(
    preds: &[EvalPred],
    gts: &[EvalGt],
    cfg: &EvalConfig,
    holistic: bool,
) -> Result<Report> {
    cfg.validate()?;
    let iou_thresh = cfg.iou();
    let m = match_predictions(preds, gts, iou_thresh);
    let hit = scored_matches(preds, &m, cfg.score_thresh);
    let mut flags = Vec::new();
    let mut counts = Counts {
        predictions: preds.len(),
        predictions_scored: preds.iter().filter(|p| p.score >= cfg.score_thresh).count(),
        ground_truth: gts.len(),
        true_positives: hit.iter().filter(|&&h| h).count(),
        hard_ground_truth: gts.iter().filter(|g| g.hard).count(),
        ..Counts::default()
    };
    counts.hard_matched = (0..gts.len()).filter(|&g| gts[g].hard && hit[g]).count();

    let precision = if counts.predictions_scored == 0 {
        flags.push("precision_empty_denominator".into());
        if gts.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        counts.true_positives as f64 / counts.predictions_scored as f64
    };
    let recall = ratio(
        counts.true_positives,
        counts.ground_truth,
        "recall_empty_denominator",
        &mut flags,
    );
    let ap = average_precision(preds, &m, gts.len());
    if gts.is_empty() {
        flags.push("ap_empty_ground_truth".into());
    }
    let hard_recall = ratio(
        counts.hard_matched,
        counts.hard_ground_truth,
        "hard_recall_empty_denominator",
        &mut flags,
    );
    let holistic_recall = if holistic {
        let (done, total) = holistic_counts(gts, &hit)?;
        counts.holistic_sets = total;
        counts.holistic_complete = done;
        Some(ratio(
            done,
            total,
            "holistic_recall_empty_denominator",
            &mut flags,
        ))
    } else {
        None
    };
    Ok(Report {
        level: cfg.level,
        iou_thresh,
        precision,
        recall,
        ap,
        hard_recall,
        holistic_recall,
        counts,
        flags,
    })
}

//! Greedy non-maximum suppression.

use crate::detection::Detection;
use crate::geometry::{iou, Box2D};

/// Indices kept by greedy suppression, in priority order.
///
/// Priority is score descending, then lower input index. A box is dropped
/// when its IoU with an already kept box is strictly greater than `thresh`.
pub fn nms_indices(boxes: &[Box2D], scores: &[f64], thresh: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Suppresses overlapping detections from a single (frame, camera) image.
pub fn nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let boxes: Vec<Box2D> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, thresh)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

//! Forward plus backward tracking over a whole camera stream, and the merge
//! of the two passes.

use std::collections::{BTreeMap, HashMap};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::iou;

use super::byte::{ByteTracker, HistoryEntry, TrackerConfig, Tracklet};

type Frames = BTreeMap<u32, Vec<Detection>>;

fn group_frames(dets: &[Detection]) -> Result<Frames> {
    let mut frames: Frames = BTreeMap::new();
    if let Some(first) = dets.first() {
        if dets
            .iter()
            .any(|d| d.camera != first.camera || d.video != first.video)
        {
            return Err(Error::input(
                "run_bidirectional needs a single camera stream",
            ));
        }
    }
    for d in dets {
        frames.entry(d.frame).or_default().push(d.clone());
    }
    Ok(frames)
}

fn run_pass<I>(frames: &Frames, order: I, cfg: &TrackerConfig) -> Result<Vec<Tracklet>>
where
    I: Iterator<Item = u32>,
{
    let empty = Vec::new();
    let mut tracker = ByteTracker::new(cfg.clone());
    for f in order {
        tracker.step(f, frames.get(&f).unwrap_or(&empty))?;
    }
    Ok(tracker.finish())
}

/// Tracks one camera stream start-to-end only.
pub fn run_forward(dets: &[Detection], cfg: &TrackerConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    let frames = group_frames(dets)?;
    let (Some(&lo), Some(&hi)) = (frames.keys().next(), frames.keys().next_back()) else {
        return Ok(Vec::new());
    };
    run_pass(&frames, lo..=hi, cfg)
}

/// Tracks one camera stream start-to-end and end-to-start and merges the
/// boxes both passes recovered.
///
/// Boxes found only by the backward pass are deduplicated per frame against
/// everything kept (IoU above `merge_iou`, higher score wins), then attached
/// to the forward tracklet they share the most detections with, or else kept
/// as tracklets of their own. Every high-score detection ends up in exactly
/// one output tracklet.
pub fn run_bidirectional(dets: &[Detection], cfg: &TrackerConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    let frames = group_frames(dets)?;
    let (Some(&lo), Some(&hi)) = (frames.keys().next(), frames.keys().next_back()) else {
        return Ok(Vec::new());
    };
    let forward = run_pass(&frames, lo..=hi, cfg)?;
    if !cfg.bidirectional {
        return Ok(forward);
    }
    let mut backward = run_pass(&frames, (lo..=hi).rev(), cfg)?;
    for t in &mut backward {
        t.history.reverse();
    }
    Ok(merge_passes(forward, backward, cfg))
}

struct Kept {
    slot: usize,
    score: f64,
    bbox: crate::geometry::Box2D,
    forward_owner: Option<usize>,
}

fn merge_passes(
    mut forward: Vec<Tracklet>,
    backward: Vec<Tracklet>,
    cfg: &TrackerConfig,
) -> Vec<Tracklet> {
    let mut owner: HashMap<(u32, usize), usize> = HashMap::new();
    let mut kept: BTreeMap<u32, Vec<Kept>> = BTreeMap::new();
    for (ti, t) in forward.iter().enumerate() {
        for h in &t.history {
            owner.insert((h.frame, h.slot), ti);
            kept.entry(h.frame).or_default().push(Kept {
                slot: h.slot,
                score: h.detection.score,
                bbox: h.detection.bbox,
                forward_owner: Some(ti),
            });
        }
    }

    // (backward tracklet, history position)
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (bi, t) in backward.iter().enumerate() {
        for (hi, h) in t.history.iter().enumerate() {
            if !owner.contains_key(&(h.frame, h.slot)) {
                candidates.push((bi, hi));
            }
        }
    }
    candidates.sort_by(|&(ba, ha), &(bb, hb)| {
        let a = &backward[ba].history[ha];
        let b = &backward[bb].history[hb];
        b.detection
            .score
            .total_cmp(&a.detection.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.slot.cmp(&b.slot))
    });

    let mut removed: Vec<(usize, u32, usize)> = Vec::new();
    // accepted candidate -> forward tracklet whose entry it replaced
    let mut accepted: BTreeMap<(usize, usize), Option<usize>> = BTreeMap::new();
    for (bi, hi) in candidates {
        let h = &backward[bi].history[hi];
        let in_frame = kept.entry(h.frame).or_default();
        let overlapping: Vec<usize> = (0..in_frame.len())
            .filter(|&k| iou(&in_frame[k].bbox, &h.detection.bbox) > cfg.merge_iou)
            .collect();
        if overlapping
            .iter()
            .any(|&k| in_frame[k].score >= h.detection.score)
        {
            continue;
        }
        // Only lower-scored forward boxes overlap; those are all from the
        // low-score set, so high-score detections are never displaced.
        let mut hint = None;
        for &k in overlapping.iter().rev() {
            let gone = in_frame.remove(k);
            if let Some(ti) = gone.forward_owner {
                removed.push((ti, h.frame, gone.slot));
                hint = Some(ti);
            }
        }
        in_frame.push(Kept {
            slot: h.slot,
            score: h.detection.score,
            bbox: h.detection.bbox,
            forward_owner: None,
        });
        accepted.insert((bi, hi), hint);
    }

    for (ti, frame, slot) in removed {
        forward[ti]
            .history
            .retain(|e| !(e.frame == frame && e.slot == slot));
    }

    let mut next_id = forward.iter().map(|t| t.track_id + 1).max().unwrap_or(0);
    let mut extra: Vec<Tracklet> = Vec::new();
    for (bi, bt) in backward.iter().enumerate() {
        let mine: Vec<(usize, Option<usize>)> = accepted
            .range((bi, 0)..(bi + 1, 0))
            .map(|(&(_, hi), &hint)| (hi, hint))
            .collect();
        if mine.is_empty() {
            continue;
        }
        let host = majority_host(bt, &forward);
        let mut leftover: Vec<HistoryEntry> = Vec::new();
        for (hi, hint) in mine {
            let entry = bt.history[hi].clone();
            let target = hint.or(host);
            match target {
                Some(ti) if !forward[ti].history.iter().any(|e| e.frame == entry.frame) => {
                    let pos = forward[ti]
                        .history
                        .partition_point(|e| e.frame < entry.frame);
                    forward[ti].history.insert(pos, entry);
                }
                _ => leftover.push(entry),
            }
        }
        for chunk in split_on_gaps(leftover, cfg.max_lost_age) {
            extra.push(Tracklet {
                track_id: next_id,
                video: bt.video.clone(),
                camera: bt.camera,
                state: bt.state.clone(),
                history: chunk,
                status: bt.status,
                frames_since_update: bt.frames_since_update,
            });
            next_id += 1;
        }
    }

    forward.retain(|t| !t.history.is_empty());
    forward.extend(extra);
    forward.sort_by_key(|t| t.track_id);
    forward
}

fn majority_host(bt: &Tracklet, forward: &[Tracklet]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (ti, ft) in forward.iter().enumerate() {
        let shared = bt
            .history
            .iter()
            .filter(|b| {
                ft.history
                    .iter()
                    .any(|f| f.frame == b.frame && f.slot == b.slot)
            })
            .count();
        if shared > 0 && best.is_none_or(|(_, s)| shared > s) {
            best = Some((ti, shared));
        }
    }
    best.map(|(ti, _)| ti)
}

fn split_on_gaps(mut entries: Vec<HistoryEntry>, max_gap: u32) -> Vec<Vec<HistoryEntry>> {
    entries.sort_by_key(|e| e.frame);
    let mut out: Vec<Vec<HistoryEntry>> = Vec::new();
    for e in entries {
        match out.last_mut() {
            Some(cur) if e.frame - cur.last().map(|l| l.frame).unwrap_or(e.frame) <= max_gap => {
                cur.push(e)
            }
            _ => out.push(vec![e]),
        }
    }
    out
}

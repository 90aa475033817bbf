//! Cross-view retrieval, merging, pseudo-label emission and round
//! orchestration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::detection::{Detection, Provenance, StreamHeader};
use crate::error::{Error, Result};
use crate::geometry::CameraSet;
use crate::io::{read_jsonl, write_json, write_jsonl, DetectionStream};
use crate::metrics::{detection_preds, evaluate, gt_at_level, EvalConfig, EvalLevel, Report};
use crate::mva::distance::{appearance_matrix, half_distances, unit_rows};
use crate::mva::{train, AssocConfig, Checkpoint, GeometricEncoder, SyncDataset};
use crate::nms::nms;
use crate::simulator::GroundTruthRecord;
use crate::tracker::{track_stream, tracked_detections, TrackerConfig};

pub const TRACKLETS_FILE: &str = "tracklets.jsonl";
pub const CHECKPOINT_FILE: &str = "encoder.ckpt";
pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub round: u32,
    pub nms_thresh: f64,
    /// Largest matched distance at which a cross-view match is accepted.
    pub accept_thresh: f64,
    /// Pseudo-label sampling rate in frames per second.
    pub sample_rate: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            round: 1,
            nms_thresh: 0.6,
            accept_thresh: 0.3,
            sample_rate: 0.1,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_thresh) {
            return Err(Error::input("nms_thresh must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.accept_thresh) {
            return Err(Error::input("accept_thresh must lie in [0, 1]"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::input("sample_rate must be positive"));
        }
        Ok(())
    }

    /// Frame stride for pseudo-label sampling on a stream at `fps`.
    pub fn frame_stride(&self, fps: f64) -> u32 {
        ((fps / self.sample_rate).round() as u32).max(1)
    }
}

/// Everything a round needs besides its input files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub assoc: AssocConfig,
    pub round: RoundConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.assoc.validate()?;
        self.round.validate()?;
        self.eval.validate()
    }
}

/// Detections of one multi-view frame set, per camera.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameSet {
    pub views: BTreeMap<u32, Vec<Detection>>,
}

/// Detections scoring above the low threshold, grouped by frame set. The
/// high and low subsets partition every view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionPool {
    pub frames: BTreeMap<(String, u32), FrameSet>,
    high_thresh: f64,
}

impl DetectionPool {
    pub fn build(dets: &[Detection], cfg: &TrackerConfig) -> Self {
        let mut frames: BTreeMap<(String, u32), FrameSet> = BTreeMap::new();
        for d in dets.iter().filter(|d| d.score > cfg.low_thresh) {
            frames
                .entry((d.video.clone(), d.frame))
                .or_default()
                .views
                .entry(d.camera)
                .or_default()
                .push(d.clone());
        }
        Self {
            frames,
            high_thresh: cfg.high_thresh,
        }
    }

    pub fn high<'a>(&'a self, view: &'a [Detection]) -> impl Iterator<Item = &'a Detection> + 'a {
        let t = self.high_thresh;
        view.iter().filter(move |d| d.score > t)
    }

    pub fn low<'a>(&'a self, view: &'a [Detection]) -> impl Iterator<Item = &'a Detection> + 'a {
        let t = self.high_thresh;
        view.iter().filter(move |d| d.score <= t)
    }

    pub fn len(&self) -> usize {
        self.frames
            .values()
            .flat_map(|f| f.views.values())
            .map(Vec::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn group_frames(dets: &[Detection]) -> BTreeMap<(String, u32), FrameSet> {
    let mut out: BTreeMap<(String, u32), FrameSet> = BTreeMap::new();
    for d in dets {
        out.entry((d.video.clone(), d.frame))
            .or_default()
            .views
            .entry(d.camera)
            .or_default()
            .push(d.clone());
    }
    out
}

/// Unit geometric features and unit appearance rows for a list of boxes.
struct Encoded {
    geo: Array2<f64>,
    app: Option<Array2<f64>>,
}

fn encode_all(
    dets: &[&Detection],
    enc: &GeometricEncoder,
    cams: &CameraSet,
    alpha: f64,
) -> Result<Encoded> {
    let inputs = dets
        .iter()
        .map(|d| enc.input_for(d, cams))
        .collect::<Result<Vec<_>>>()?;
    let fwd = enc.forward(&inputs);
    let (geo, _) = unit_rows(fwd.features());
    let app = if alpha > 0.0 {
        Some(appearance_matrix(dets)?)
    } else {
        None
    };
    Ok(Encoded { geo, app })
}

/// Retrieves boxes in every view using the tracked boxes of the other views
/// as queries.
///
/// For each ordered pair of views the tracked boxes of the first are matched
/// against all pooled boxes of the second; matches with distance at most
/// `accept_thresh` are accepted and take the query's track id. A gallery box
/// accepted from several queries keeps the closest one.
pub fn associate_views(
    tracked: &BTreeMap<u32, Vec<Detection>>,
    pool: &BTreeMap<u32, Vec<Detection>>,
    enc: &GeometricEncoder,
    cams: &CameraSet,
    alpha: f64,
    accept_thresh: f64,
) -> Result<BTreeMap<u32, Vec<Detection>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input("alpha must lie in [0, 1]"));
    }
    let mut out: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    if tracked.values().all(Vec::is_empty) {
        return Ok(out);
    }

    // one forward pass over every box of the frame set
    let mut rows: Vec<&Detection> = Vec::new();
    let mut q_range = BTreeMap::new();
    let mut g_range = BTreeMap::new();
    for (&cam, q) in tracked {
        q_range.insert(cam, rows.len()..rows.len() + q.len());
        rows.extend(q);
    }
    for (&cam, g) in pool {
        g_range.insert(cam, rows.len()..rows.len() + g.len());
        rows.extend(g);
    }
    let e = encode_all(&rows, enc, cams, alpha)?;

    let mut best: BTreeMap<(u32, usize), (f64, u64)> = BTreeMap::new();
    for (&qi, qr) in &q_range {
        if qr.is_empty() {
            continue;
        }
        for (&gj, gr) in g_range.iter().filter(|(&c, r)| c != qi && !r.is_empty()) {
            let mut dist = half_distances(
                e.geo.slice(s![qr.clone(), ..]),
                e.geo.slice(s![gr.clone(), ..]),
            );
            if let Some(app) = &e.app {
                let a =
                    half_distances(app.slice(s![qr.clone(), ..]), app.slice(s![gr.clone(), ..]));
                dist = a * alpha + dist * (1.0 - alpha);
            }
            let res = hungarian(dist.view())?;
            for (r, c) in res.pairs() {
                let d = dist[[r, c]];
                if d > accept_thresh {
                    continue;
                }
                let track = tracked[&qi][r]
                    .track_id
                    .ok_or_else(|| Error::input("tracked box without track_id"))?;
                let slot = best.entry((gj, c)).or_insert((f64::INFINITY, track));
                if d < slot.0 {
                    *slot = (d, track);
                }
            }
        }
    }

    for ((cam, idx), (_, track)) in best {
        let mut d = pool[&cam][idx].clone();
        d.track_id = Some(track);
        d.provenance = Some(Provenance::CrossView);
        out.entry(cam).or_default().push(d);
    }
    Ok(out)
}

/// Non-maximum suppression over the union of one view's tracked and
/// retrieved boxes; tracked boxes win at equal score.
pub fn augment_merge(
    tracked: &[Detection],
    retrieved: &[Detection],
    nms_thresh: f64,
) -> Vec<Detection> {
    let merged: Vec<Detection> = tracked
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.provenance = Some(Provenance::Tracked);
            d
        })
        .chain(retrieved.iter().cloned())
        .collect();
    let mut kept = nms(&merged, nms_thresh);
    kept.sort_by(Detection::output_order);
    kept
}

/// Augmented set for a whole stream, in output order.
pub fn augment_stream(
    all: &[Detection],
    tracked: &[Detection],
    enc: &GeometricEncoder,
    cams: &CameraSet,
    tracker: &TrackerConfig,
    alpha: f64,
    round: &RoundConfig,
) -> Result<Vec<Detection>> {
    round.validate()?;
    let pool = DetectionPool::build(all, tracker);
    let tracked_frames = group_frames(tracked);
    let empty = FrameSet::default();
    let keys: Vec<&(String, u32)> = tracked_frames.keys().collect();
    let per_frame: Vec<Vec<Detection>> = keys
        .par_iter()
        .map(|&key| {
            let t = &tracked_frames[key];
            let p = pool.frames.get(key).unwrap_or(&empty);
            let retrieved =
                associate_views(&t.views, &p.views, enc, cams, alpha, round.accept_thresh)?;
            let mut out = Vec::new();
            for (cam, tv) in &t.views {
                let rv = retrieved.get(cam).map_or(&[][..], Vec::as_slice);
                out.extend(augment_merge(tv, rv, round.nms_thresh));
            }
            // views with retrievals but no tracked box of their own
            for (cam, rv) in &retrieved {
                if !t.views.contains_key(cam) {
                    out.extend(augment_merge(&[], rv, round.nms_thresh));
                }
            }
            out.sort_by(Detection::output_order);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Records of the sampled frames, tagged with the round index.
pub fn emit_pseudo_labels(
    augmented: &[Detection],
    fps: f64,
    round: &RoundConfig,
) -> Result<Vec<Detection>> {
    round.validate()?;
    let stride = round.frame_stride(fps);
    let mut out: Vec<Detection> = augmented
        .iter()
        .filter(|d| d.frame % stride == 0)
        .map(|d| {
            let mut d = d.clone();
            d.round = Some(round.round);
            d
        })
        .collect();
    out.sort_by(Detection::output_order);
    Ok(out)
}

pub fn write_pseudo_labels(path: &Path, header: &StreamHeader, labels: &[Detection]) -> Result<()> {
    write_jsonl(path, Some(header), labels)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub detections: usize,
    pub high: usize,
    pub low: usize,
    pub tracked: usize,
    pub tracklets: usize,
    pub augmented: usize,
    pub cross_view: usize,
    pub pseudo_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: u32,
    pub final_l_syn: f64,
    pub final_l_pro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub counts: RoundCounts,
    pub training: Option<TrainingSummary>,
    pub eval: Option<Report>,
}

/// Inputs of one round beyond the configuration.
#[derive(Debug, Clone, Default)]
pub struct RoundInputs {
    pub detections: PathBuf,
    /// Camera file; defaults to the one named by the stream header.
    pub cameras: Option<PathBuf>,
    /// Reuse this encoder instead of training one.
    pub checkpoint: Option<PathBuf>,
    /// Ground truth for the report.
    pub gt: Option<PathBuf>,
}

pub fn round_dir(out: &Path, round: u32) -> PathBuf {
    out.join(format!("round_{round}"))
}

/// Tracks, trains (or loads) the encoder, augments and emits pseudo labels,
/// writing every artifact into `out/round_k`. The directory appears only
/// once complete; a failed round leaves nothing behind.
pub fn run_round(inputs: &RoundInputs, cfg: &PipelineConfig, out: &Path) -> Result<RoundReport> {
    cfg.validate()?;
    let stream = DetectionStream::read(&inputs.detections)?;
    let cams_path = inputs
        .cameras
        .clone()
        .unwrap_or_else(|| stream.cameras_path(&inputs.detections));
    let cams = crate::io::read_cameras(&cams_path)?;
    let gt: Option<Vec<GroundTruthRecord>> = inputs.gt.as_deref().map(read_jsonl).transpose()?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let staging = tempfile::Builder::new()
        .prefix(&format!(".round_{}.", cfg.round.round))
        .tempdir_in(out)
        .map_err(|e| Error::io(out, e))?;
    let dir = staging.path();

    let tracklets = track_stream(&stream.records, &cfg.tracker)?;
    let tracked = tracked_detections(&tracklets);
    let header = StreamHeader::new(
        stream.header.embedding_dim,
        crate::io::camera_reference(
            &cams_path,
            &round_dir(out, cfg.round.round).join(TRACKLETS_FILE),
        ),
        stream.header.fps,
    );
    write_jsonl(&dir.join(TRACKLETS_FILE), Some(&header), &tracked)?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let training = match &inputs.checkpoint {
        Some(p) => {
            Checkpoint::load(p)?.save(&ckpt_path)?;
            None
        }
        None => {
            let data = SyncDataset::build(
                &tracked,
                &stream.records,
                &cams,
                cfg.tracker.low_thresh,
                cfg.assoc.alpha,
            )?;
            let (state, curve) = train(&data, &cfg.assoc)?;
            Checkpoint::from_state(&state).save(&ckpt_path)?;
            curve.last().map(|l| TrainingSummary {
                epochs: state.epochs_done,
                final_l_syn: l.l_syn,
                final_l_pro: l.l_pro,
            })
        }
    };
    let enc = Checkpoint::load(&ckpt_path)?.encoder;

    let augmented = augment_stream(
        &stream.records,
        &tracked,
        &enc,
        &cams,
        &cfg.tracker,
        cfg.assoc.alpha,
        &cfg.round,
    )?;
    write_jsonl(&dir.join(AUGMENTED_FILE), Some(&header), &augmented)?;
    let labels = emit_pseudo_labels(&augmented, stream.header.fps, &cfg.round)?;
    write_pseudo_labels(&dir.join(PSEUDO_LABELS_FILE), &header, &labels)?;

    let pool = DetectionPool::build(&stream.records, &cfg.tracker);
    let high = stream
        .records
        .iter()
        .filter(|d| cfg.tracker.is_high(d.score))
        .count();
    let counts = RoundCounts {
        detections: stream.records.len(),
        high,
        low: pool.len() - high,
        tracked: tracked.len(),
        tracklets: tracklets.len(),
        augmented: augmented.len(),
        cross_view: augmented
            .iter()
            .filter(|d| d.provenance == Some(Provenance::CrossView))
            .count(),
        pseudo_labels: labels.len(),
    };
    let eval = match &gt {
        Some(gt) => {
            let ecfg = EvalConfig {
                level: EvalLevel::WholeBody,
                ..cfg.eval.clone()
            };
            let gts = gt_at_level(gt, &ecfg, &cams)?;
            Some(evaluate(&detection_preds(&augmented), &gts, &ecfg, true)?)
        }
        None => None,
    };
    let report = RoundReport {
        round: cfg.round.round,
        counts,
        training,
        eval,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;

    let target = round_dir(out, cfg.round.round);
    if target.exists() {
        std::fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, &target).map_err(|e| {
        let _ = std::fs::remove_dir_all(&staged);
        Error::io(&target, e)
    })?;
    Ok(report)
}

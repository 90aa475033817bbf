//! Turns ground truth into a noisy detector output stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{Box2D, CameraSet};
use crate::nms::nms;

use super::render::GroundTruthRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionModel {
    /// Knots `(occlusion, mean score)`, linearly interpolated.
    pub score_curve: Vec<[f64; 2]>,
    pub score_noise: f64,
    /// Knots `(occlusion, miss probability)`.
    pub miss_curve: Vec<[f64; 2]>,
    /// Expected false positives per camera and frame.
    pub fp_rate: f64,
    pub fp_score: [f64; 2],
    pub box_jitter: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    /// Per-image NMS applied to the output, as a real detector would.
    pub nms_thresh: Option<f64>,
}

impl Default for CorruptionModel {
    fn default() -> Self {
        Self {
            score_curve: vec![
                [0.0, 0.92],
                [0.3, 0.85],
                [0.5, 0.6],
                [0.8, 0.3],
                [1.0, 0.15],
            ],
            score_noise: 0.05,
            miss_curve: vec![[0.0, 0.02], [0.7, 0.05], [0.9, 0.3], [1.0, 0.6]],
            fp_rate: 0.5,
            fp_score: [0.05, 0.65],
            box_jitter: 2.0,
            embedding_dim: 32,
            embedding_noise: 0.05,
            nms_thresh: Some(0.6),
        }
    }
}

/// Piecewise-linear lookup, constant beyond the end knots.
pub fn interpolate(knots: &[[f64; 2]], x: f64) -> f64 {
    let i = knots.partition_point(|k| k[0] <= x);
    if i == 0 {
        return knots[0][1];
    }
    if i == knots.len() {
        return knots[i - 1][1];
    }
    let ([x0, y0], [x1, y1]) = (knots[i - 1], knots[i]);
    y0 + (x - x0) / (x1 - x0) * (y1 - y0)
}

fn check_curve(name: &str, knots: &[[f64; 2]], range: (f64, f64)) -> Result<()> {
    if knots.is_empty() {
        return Err(Error::input(format!("{name} needs at least one knot")));
    }
    if knots.windows(2).any(|w| !(w[0][0] < w[1][0])) {
        return Err(Error::input(format!(
            "{name} knots must increase strictly in x"
        )));
    }
    if knots
        .iter()
        .any(|k| !k[0].is_finite() || !(range.0..=range.1).contains(&k[1]))
    {
        return Err(Error::input(format!(
            "{name} values must lie in [{}, {}]",
            range.0, range.1
        )));
    }
    Ok(())
}

impl CorruptionModel {
    pub fn validate(&self) -> Result<()> {
        check_curve("score_curve", &self.score_curve, (0.0, 1.0))?;
        check_curve("miss_curve", &self.miss_curve, (0.0, 1.0))?;
        if !(self.score_noise >= 0.0 && self.box_jitter >= 0.0 && self.embedding_noise >= 0.0) {
            return Err(Error::input("noise levels must be non-negative"));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return Err(Error::input("fp_rate must be finite and non-negative"));
        }
        if !(0.0 <= self.fp_score[0]
            && self.fp_score[0] <= self.fp_score[1]
            && self.fp_score[1] <= 1.0)
        {
            return Err(Error::input("fp_score must be a sub-range of [0, 1]"));
        }
        if self.nms_thresh.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::input("nms_thresh must lie in [0, 1]"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::input("embedding_dim must be positive"));
        }
        Ok(())
    }

    pub fn mean_score(&self, occlusion: f64) -> f64 {
        interpolate(&self.score_curve, occlusion).clamp(0.0, 1.0)
    }

    pub fn miss_probability(&self, occlusion: f64) -> f64 {
        interpolate(&self.miss_curve, occlusion).clamp(0.0, 1.0)
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Random stream for one (frame, camera) image; independent of how many
/// draws other images made.
fn image_rng(seed: u64, frame: u32, camera: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 24 | camera as u64) + (1 << 56));
    rng
}

/// Corrupts the visible ground truth into detections sorted by
/// (frame, camera) and then output order. Frames listed in `frames` get
/// false positives even when no agent is visible there.
pub fn corrupt_detections(
    gt: &[GroundTruthRecord],
    model: &CorruptionModel,
    cams: &CameraSet,
    video: &str,
    frames: u32,
    seed: u64,
) -> Result<Vec<Detection>> {
    model.validate()?;
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
    base_rng.set_stream(2);
    let num_ids = gt
        .iter()
        .map(|g| g.identity as usize + 1)
        .max()
        .unwrap_or(0);
    let bases: Vec<Vec<f64>> = (0..num_ids)
        .map(|_| unit_gaussian(&mut base_rng, model.embedding_dim))
        .collect();

    let jitter = Normal::new(0.0, model.box_jitter).map_err(|e| Error::input(e.to_string()))?;
    let score_noise =
        Normal::new(0.0, model.score_noise).map_err(|e| Error::input(e.to_string()))?;
    let emb_noise =
        Normal::new(0.0, model.embedding_noise).map_err(|e| Error::input(e.to_string()))?;
    let fp_trials = model.fp_rate.ceil() as u64;
    let fp_count = if fp_trials > 0 {
        Some(
            Binomial::new(fp_trials, model.fp_rate / fp_trials as f64)
                .map_err(|e| Error::input(e.to_string()))?,
        )
    } else {
        None
    };

    let mut by_image: std::collections::BTreeMap<(u32, u32), Vec<&GroundTruthRecord>> =
        Default::default();
    for g in gt.iter().filter(|g| g.visible && g.video == video) {
        by_image.entry((g.frame, g.camera)).or_default().push(g);
    }

    let mut out = Vec::new();
    for frame in 0..frames {
        for cam in &cams.cameras {
            let mut rng = image_rng(seed, frame, cam.id);
            let (w, h) = (cam.width as f64, cam.height as f64);
            let mut dets = Vec::new();
            let mut records = by_image.get(&(frame, cam.id)).cloned().unwrap_or_default();
            records.sort_by_key(|g| g.identity);
            for g in records {
                let missed = rng.random_bool(model.miss_probability(g.occlusion));
                let score =
                    (model.mean_score(g.occlusion) + score_noise.sample(&mut rng)).clamp(0.0, 1.0);
                let c = g.bbox.corners().map(|v| v + jitter.sample(&mut rng));
                let emb: Vec<f64> = bases[g.identity as usize]
                    .iter()
                    .map(|b| b + emb_noise.sample(&mut rng))
                    .collect();
                if missed {
                    continue;
                }
                let Some(bbox) = Box2D::new(
                    c[0].min(c[2]),
                    c[1].min(c[3]),
                    c[0].max(c[2]),
                    c[1].max(c[3]),
                )
                .ok()
                .and_then(|b| b.clip(w, h)) else {
                    continue;
                };
                let mut d = Detection::new(video, frame, cam.id, bbox, score)
                    .with_embedding(to_unit_f32(&emb));
                d.identity = Some(g.identity);
                dets.push(d);
            }
            let n_fp = fp_count.map_or(0, |b| b.sample(&mut rng));
            for _ in 0..n_fp {
                let bw = rng.random_range(0.05..0.2) * w;
                let bh = bw * rng.random_range(1.5..3.0);
                let x = rng.random_range(0.0..(w - bw).max(1.0));
                let y = rng.random_range(0.0..(h - bh).max(1.0));
                let score = rng.random_range(model.fp_score[0]..=model.fp_score[1]);
                let emb = unit_gaussian(&mut rng, model.embedding_dim);
                if let Some(bbox) = Box2D::new(x, y, x + bw, y + bh)
                    .ok()
                    .and_then(|b| b.clip(w, h))
                {
                    dets.push(
                        Detection::new(video, frame, cam.id, bbox, score)
                            .with_embedding(to_unit_f32(&emb)),
                    );
                }
            }
            if let Some(t) = model.nms_thresh {
                dets = nms(&dets, t);
            }
            dets.sort_by(Detection::output_order);
            out.extend(dets);
        }
    }
    Ok(out)
}

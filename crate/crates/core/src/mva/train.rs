//! Self-supervised training on the cross-view synchronization pretext.
//!
//! For an anchor image (frame `t`, camera `i`) the tracked boxes are the
//! queries. The positive image is camera `j` at the same frame, the negative
//! image camera `j` at `t ± Δt`; both contribute all their detections as the
//! gallery. The encoder learns to make synchronized pairs closer than
//! unsynchronized ones, plus an L1 reconstruction of each box's corners.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::CameraSet;

use super::distance::{half_distances, image_distance_with_matches, unit_rows};
use super::encoder::{EncoderInput, EncoderShape, GeometricEncoder, Parameters};
use super::loss::{l1_corners, triplet_loss, LossBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    /// Weight of the appearance distance against the geometric one.
    pub alpha: f64,
    pub margin: f64,
    /// Range of the frame offset magnitude for negative images.
    pub t_min: u32,
    pub t_max: u32,
    pub epochs: u32,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// First epoch trained with `lr_final`.
    pub lr_decay_epoch: u32,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    /// Only every `anchor_stride`-th frame is used as an anchor.
    pub anchor_stride: u32,
    pub seed: u64,
    pub encoder: EncoderShape,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            margin: 1.0,
            t_min: 5,
            t_max: 20,
            epochs: 160,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            lr_decay_epoch: 120,
            batch_size: 1,
            anchor_stride: 1,
            seed: 0,
            encoder: EncoderShape::default(),
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::input("alpha must lie in [0, 1]"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::input("margin must be positive"));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::input("need 1 <= t_min <= t_max"));
        }
        if self.batch_size == 0 || self.anchor_stride == 0 {
            return Err(Error::input(
                "batch_size and anchor_stride must be positive",
            ));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::input("learning rates must be positive"));
        }
        self.encoder.validate()
    }

    pub fn learning_rate(&self, epoch: u32) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

/// One detection prepared for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub input: EncoderInput,
    /// Unit-normalized appearance embedding.
    pub appearance: Option<Vec<f64>>,
}

impl Instance {
    pub fn from_detection(det: &Detection, cams: &CameraSet) -> Result<Self> {
        let input = EncoderInput::from_detection(det, cams)?;
        let appearance = det.embedding.as_ref().map(|e| {
            let norm = e
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            e.iter().map(|&v| v as f64 / norm).collect()
        });
        Ok(Self { input, appearance })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncImage {
    pub queries: Vec<Instance>,
    pub gallery: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq)]
struct VideoSet {
    first: u32,
    last: u32,
    images: BTreeMap<(u32, u32), SyncImage>,
}

/// Tracked and detected boxes per (video, frame, camera), ready for triplet
/// sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncDataset {
    cameras: Vec<u32>,
    num_cameras: usize,
    videos: BTreeMap<String, VideoSet>,
}

/// A sampled (anchor, positive, negative) image triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex<'a> {
    pub video: &'a str,
    pub frame: u32,
    pub anchor_camera: u32,
    pub other_camera: u32,
    pub negative_frame: u32,
}

impl SyncDataset {
    /// Queries are the tracked boxes, the gallery every detection scoring
    /// above `gallery_min_score`.
    pub fn build(
        tracked: &[Detection],
        all: &[Detection],
        cams: &CameraSet,
        gallery_min_score: f64,
        alpha: f64,
    ) -> Result<Self> {
        if cams.len() < 2 {
            return Err(Error::input("association needs >= 2 views"));
        }
        let mut videos: BTreeMap<String, VideoSet> = BTreeMap::new();
        let mut push = |d: &Detection, query: bool| -> Result<()> {
            let inst = Instance::from_detection(d, cams)?;
            if alpha > 0.0 && inst.appearance.is_none() {
                return Err(Error::input("appearance embedding missing while alpha > 0"));
            }
            let v = videos.entry(d.video.clone()).or_insert(VideoSet {
                first: d.frame,
                last: d.frame,
                images: BTreeMap::new(),
            });
            v.first = v.first.min(d.frame);
            v.last = v.last.max(d.frame);
            let img = v.images.entry((d.frame, d.camera)).or_default();
            if query {
                img.queries.push(inst);
            } else {
                img.gallery.push(inst);
            }
            Ok(())
        };
        for d in tracked {
            push(d, true)?;
        }
        for d in all.iter().filter(|d| d.score > gallery_min_score) {
            push(d, false)?;
        }
        Ok(Self {
            cameras: cams.ids().collect(),
            num_cameras: cams.table_size(),
            videos,
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn image(&self, video: &str, frame: u32, camera: u32) -> Option<&SyncImage> {
        self.videos.get(video)?.images.get(&(frame, camera))
    }

    /// Splits every video at the same relative point in time; the second set
    /// holds the last `holdout_fraction` of the frames.
    pub fn split(&self, holdout_fraction: f64) -> (SyncDataset, SyncDataset) {
        let mut head = BTreeMap::new();
        let mut tail = BTreeMap::new();
        for (name, v) in &self.videos {
            let len = (v.last - v.first + 1) as f64;
            let cut = v.first + (len * (1.0 - holdout_fraction)).floor() as u32;
            let pick = |keep: &dyn Fn(u32) -> bool, first: u32, last: u32| VideoSet {
                first,
                last,
                images: v
                    .images
                    .iter()
                    .filter(|((f, _), _)| keep(*f))
                    .map(|(k, img)| (*k, img.clone()))
                    .collect(),
            };
            if cut > v.first {
                head.insert(name.clone(), pick(&|f| f < cut, v.first, cut - 1));
            }
            if cut <= v.last {
                tail.insert(name.clone(), pick(&|f| f >= cut, cut, v.last));
            }
        }
        let with = |videos| SyncDataset {
            cameras: self.cameras.clone(),
            num_cameras: self.num_cameras,
            videos,
        };
        (with(head), with(tail))
    }

    /// One triplet per (anchor image with tracked boxes, other camera),
    /// shuffled. The negative offset has a uniform magnitude in
    /// `[t_min, t_max]` and a uniform sign, flipped when it would leave the
    /// video.
    pub fn sample_triplets<R: Rng>(&self, cfg: &AssocConfig, rng: &mut R) -> Vec<TripletIndex<'_>> {
        let mut out = Vec::new();
        for (name, v) in &self.videos {
            for ((frame, cam), img) in &v.images {
                if (frame - v.first) % cfg.anchor_stride != 0 || img.queries.is_empty() {
                    continue;
                }
                for &other in self.cameras.iter().filter(|&&c| c != *cam) {
                    let dt = rng.random_range(cfg.t_min..=cfg.t_max) as i64;
                    let sign = if rng.random_bool(0.5) { 1 } else { -1 };
                    let (lo, hi) = (v.first as i64, v.last as i64);
                    let t = *frame as i64;
                    let negative = [t + sign * dt, t - sign * dt]
                        .into_iter()
                        .find(|n| (lo..=hi).contains(n));
                    if let Some(n) = negative {
                        out.push(TripletIndex {
                            video: name,
                            frame: *frame,
                            anchor_camera: *cam,
                            other_camera: other,
                            negative_frame: n as u32,
                        });
                    }
                }
            }
        }
        out.shuffle(rng);
        out
    }

    pub fn triplet_data<'a>(&'a self, t: &TripletIndex<'_>) -> TripletData<'a> {
        const EMPTY: &[Instance] = &[];
        let get = |f: u32, c: u32| self.image(t.video, f, c);
        TripletData {
            queries: get(t.frame, t.anchor_camera).map_or(EMPTY, |i| &i.queries),
            positive: get(t.frame, t.other_camera).map_or(EMPTY, |i| &i.gallery),
            negative: get(t.negative_frame, t.other_camera).map_or(EMPTY, |i| &i.gallery),
        }
    }
}

/// Instances of one triplet: anchor queries and the two galleries.
#[derive(Debug, Clone, Copy)]
pub struct TripletData<'a> {
    pub queries: &'a [Instance],
    pub positive: &'a [Instance],
    pub negative: &'a [Instance],
}

fn appearance_rows(insts: &[Instance]) -> Result<Array2<f64>> {
    let dim = insts
        .first()
        .and_then(|i| i.appearance.as_ref())
        .map_or(0, |a| a.len());
    let mut m = Array2::zeros((insts.len(), dim));
    for (mut row, inst) in m.outer_iter_mut().zip(insts) {
        let a = inst
            .appearance
            .as_ref()
            .ok_or_else(|| Error::input("appearance embedding missing while alpha > 0"))?;
        if a.len() != dim {
            return Err(Error::input("appearance embeddings differ in dimension"));
        }
        row.assign(&ArrayView2::from_shape((1, dim), a).unwrap().row(0));
    }
    Ok(m)
}

struct PairDistance {
    h: f64,
    matches: Vec<(usize, usize)>,
    geo: Array2<f64>,
}

fn pair_distance(
    q_unit: ArrayView2<'_, f64>,
    g_unit: ArrayView2<'_, f64>,
    queries: &[Instance],
    gallery: &[Instance],
    alpha: f64,
) -> Result<PairDistance> {
    let geo = half_distances(q_unit, g_unit);
    let e = if alpha > 0.0 && !queries.is_empty() && !gallery.is_empty() {
        let app = half_distances(
            appearance_rows(queries)?.view(),
            appearance_rows(gallery)?.view(),
        );
        &app * alpha + &geo * (1.0 - alpha)
    } else {
        geo.clone()
    };
    let (h, res) = image_distance_with_matches(e.view())?;
    Ok(PairDistance {
        h,
        matches: res.pairs().collect(),
        geo,
    })
}

/// Image distances `(h_pos, h_neg)` of one triplet under a frozen encoder.
pub fn triplet_distances(
    enc: &GeometricEncoder,
    t: &TripletData<'_>,
    alpha: f64,
) -> Result<(f64, f64)> {
    let rows: Vec<EncoderInput> = t
        .queries
        .iter()
        .chain(t.positive)
        .chain(t.negative)
        .map(|i| i.input)
        .collect();
    let fwd = enc.forward(&rows);
    let (unit, _) = unit_rows(fwd.features());
    let (nq, np) = (t.queries.len(), t.positive.len());
    let q = unit.slice(ndarray::s![..nq, ..]);
    let p = unit.slice(ndarray::s![nq..nq + np, ..]);
    let n = unit.slice(ndarray::s![nq + np.., ..]);
    let pos = pair_distance(q, p, t.queries, t.positive, alpha)?;
    let neg = pair_distance(q, n, t.queries, t.negative, alpha)?;
    Ok((pos.h, neg.h))
}

/// Batch-mean loss `L_syn + L_pro` and its gradient with respect to every
/// encoder parameter. The assignment inside each image distance is held
/// fixed while differentiating.
pub fn loss_and_grad(
    enc: &GeometricEncoder,
    batch: &[TripletData<'_>],
    cfg: &AssocConfig,
) -> Result<(LossBreakdown, Parameters)> {
    let mut grads = enc.params.zeros_like();
    let loss = loss_and_grad_into(enc, batch, cfg, &mut grads)?;
    Ok((loss, grads))
}

/// [`loss_and_grad`] overwriting a caller-owned gradient buffer.
pub fn loss_and_grad_into(
    enc: &GeometricEncoder,
    batch: &[TripletData<'_>],
    cfg: &AssocConfig,
    grads: &mut Parameters,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::input("empty training batch"));
    }
    let mut rows: Vec<EncoderInput> = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len());
    for t in batch {
        offsets.push(rows.len());
        rows.extend(
            t.queries
                .iter()
                .chain(t.positive)
                .chain(t.negative)
                .map(|i| i.input),
        );
    }
    let fwd = enc.forward(&rows);
    let (unit, norms) = unit_rows(fwd.features());
    let mut d_unit = Array2::<f64>::zeros(unit.raw_dim());
    let mut d_reproj = Array2::<f64>::zeros(fwd.reprojection.raw_dim());
    let scale = 1.0 / batch.len() as f64;
    let (mut syn, mut pro) = (0.0, 0.0);

    for (t, &off) in batch.iter().zip(&offsets) {
        let (nq, np, nn) = (t.queries.len(), t.positive.len(), t.negative.len());
        let q0 = off;
        let p0 = off + nq;
        let n0 = p0 + np;
        let q = unit.slice(ndarray::s![q0..p0, ..]);
        let pos = pair_distance(
            q,
            unit.slice(ndarray::s![p0..n0, ..]),
            t.queries,
            t.positive,
            cfg.alpha,
        )?;
        let neg = pair_distance(
            q,
            unit.slice(ndarray::s![n0..n0 + nn, ..]),
            t.queries,
            t.negative,
            cfg.alpha,
        )?;

        let l = triplet_loss(pos.h, neg.h, cfg.margin);
        syn += l;
        if l > 0.0 {
            for (pd, g0, sign) in [(&pos, p0, 1.0), (&neg, n0, -1.0)] {
                if pd.matches.is_empty() {
                    continue;
                }
                let w = sign * scale * (1.0 - cfg.alpha) / pd.matches.len() as f64;
                for &(r, c) in &pd.matches {
                    let d = pd.geo[[r, c]];
                    if d <= 0.0 {
                        continue;
                    }
                    // d = |u_q - u_g| / 2  =>  dd/du_q = (u_q - u_g) / (4 d)
                    let k = w / (4.0 * d);
                    for col in 0..unit.ncols() {
                        let diff = unit[[q0 + r, col]] - unit[[g0 + c, col]];
                        d_unit[[q0 + r, col]] += k * diff;
                        d_unit[[g0 + c, col]] -= k * diff;
                    }
                }
            }
        }

        let n_rows = nq + np + nn;
        let mut l_pro = 0.0;
        for r in off..off + n_rows {
            let target = &rows[r].corners;
            let pred = fwd.reprojection.row(r);
            l_pro += l1_corners(pred.as_slice().expect("standard layout"), target);
            for k in 0..4 {
                let res = pred[k] - target[k];
                let sgn = if res > 0.0 {
                    1.0
                } else if res < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_reproj[[r, k]] = sgn * scale / n_rows as f64;
            }
        }
        pro += l_pro / n_rows as f64;
    }

    // unit = f / |f|  =>  df = (du - unit (unit . du)) / |f|
    let mut d_features = d_unit;
    for ((mut df, u), &n) in d_features
        .outer_iter_mut()
        .zip(unit.outer_iter())
        .zip(&norms)
    {
        let proj = df.dot(&u);
        for (d, &uv) in df.iter_mut().zip(u.iter()) {
            *d = (*d - uv * proj) / n;
        }
    }

    enc.backward_into(&fwd, d_features.view(), d_reproj.view(), grads);
    Ok(LossBreakdown::new(syn * scale, pro * scale))
}

/// Adam with bias correction. Parameters and moments are kept at `f32`
/// precision so a checkpoint captures them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl Adam {
    pub fn new(like: &Parameters) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = (b1 * *m + (1.0 - b1) * g) as f32 as f64;
                *v = (b2 * *v + (1.0 - b2) * g * g) as f32 as f64;
                let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = (*p - step) as f32 as f64;
            }
        }
    }
}

/// Encoder plus optimizer state; everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: GeometricEncoder,
    pub optimizer: Adam,
    pub epochs_done: u32,
}

impl TrainState {
    pub fn new(cfg: &AssocConfig, num_cameras: usize) -> Result<Self> {
        let encoder = GeometricEncoder::new(cfg.encoder.clone(), num_cameras, cfg.seed)?;
        let optimizer = Adam::new(&encoder.params);
        Ok(Self {
            encoder,
            optimizer,
            epochs_done: 0,
        })
    }

    /// Runs the next epoch. Sampling depends only on `(seed, epoch)`, so a
    /// resumed run repeats the uninterrupted one exactly.
    pub fn train_epoch(&mut self, data: &SyncDataset, cfg: &AssocConfig) -> Result<LossBreakdown> {
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let triplets = data.sample_triplets(cfg, &mut rng);
        let lr = cfg.learning_rate(epoch);
        let (mut syn, mut pro, mut count) = (0.0, 0.0, 0usize);
        let mut grads = self.encoder.params.zeros_like();
        for chunk in triplets.chunks(cfg.batch_size) {
            let batch: Vec<TripletData<'_>> = chunk.iter().map(|t| data.triplet_data(t)).collect();
            let loss = loss_and_grad_into(&self.encoder, &batch, cfg, &mut grads)?;
            self.optimizer.update(&mut self.encoder.params, &grads, lr);
            syn += loss.l_syn * chunk.len() as f64;
            pro += loss.l_pro * chunk.len() as f64;
            count += chunk.len();
        }
        if !self.encoder.params.all_finite() {
            return Err(Error::input("training diverged to non-finite parameters"));
        }
        self.epochs_done += 1;
        let n = count.max(1) as f64;
        Ok(LossBreakdown::new(syn / n, pro / n))
    }
}

/// Trains a fresh encoder for `cfg.epochs` epochs; returns the final state
/// and the per-epoch mean losses.
pub fn train(data: &SyncDataset, cfg: &AssocConfig) -> Result<(TrainState, Vec<LossBreakdown>)> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg, data.num_cameras())?;
    let curve = resume(&mut state, data, cfg)?;
    Ok((state, curve))
}

/// Continues training `state` up to `cfg.epochs`.
pub fn resume(
    state: &mut TrainState,
    data: &SyncDataset,
    cfg: &AssocConfig,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if state.encoder.num_cameras < data.num_cameras() {
        return Err(Error::input("dataset has more cameras than the encoder"));
    }
    let mut curve = Vec::new();
    while state.epochs_done < cfg.epochs {
        curve.push(state.train_epoch(data, cfg)?);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncAccuracy {
    pub triplets: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Fraction of sampled triplets with `h_pos < h_neg`.
pub fn sync_accuracy(
    enc: &GeometricEncoder,
    data: &SyncDataset,
    cfg: &AssocConfig,
    seed: u64,
) -> Result<SyncAccuracy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = data.sample_triplets(cfg, &mut rng);
    let mut correct = 0;
    for t in &triplets {
        let (hp, hn) = triplet_distances(enc, &data.triplet_data(t), cfg.alpha)?;
        if hp < hn {
            correct += 1;
        }
    }
    Ok(SyncAccuracy {
        triplets: triplets.len(),
        correct,
        accuracy: if triplets.is_empty() {
            0.0
        } else {
            correct as f64 / triplets.len() as f64
        },
    })
}

use std::io::Write;
use std::path::{Path, PathBuf};

use mvanon_core::detection::SCHEMA_VERSION;
use mvanon_core::io::{
    camera_reference, read_cameras, read_json, read_jsonl, to_json_line, write_json, write_jsonl,
    DetectionStream,
};
use mvanon_core::metrics::{
    detection_preds, evaluate, gt_at_level, keypoint_preds, EvalConfig, EvalLevel,
    KeypointPrediction,
};
use mvanon_core::mva::checkpoint::FORMAT_VERSION;
use mvanon_core::mva::{resume, train, Checkpoint, SyncDataset, TrainState};
use mvanon_core::pipeline::{
    augment_stream, emit_pseudo_labels, run_round, write_pseudo_labels, RoundInputs,
    AUGMENTED_FILE, PSEUDO_LABELS_FILE,
};
use mvanon_core::simulator::{simulate, GroundTruthRecord, SimConfig};
use mvanon_core::tracker::{track_stream, tracked_detections};
use mvanon_core::{CameraSet, Error, Result, StreamHeader};

use crate::config::{require_file, RunConfig};

fn read_stream(path: &Path) -> Result<DetectionStream> {
    require_file(path)?;
    DetectionStream::read(path)
}

fn cameras_for(
    stream: &DetectionStream,
    stream_path: &Path,
    given: Option<&Path>,
) -> Result<(CameraSet, PathBuf)> {
    let path = given.map_or_else(|| stream.cameras_path(stream_path), Path::to_path_buf);
    require_file(&path)?;
    Ok((read_cameras(&path)?, path))
}

fn derived_header(stream: &DetectionStream, cams: &Path, out: &Path) -> StreamHeader {
    StreamHeader::new(
        stream.header.embedding_dim,
        camera_reference(cams, out),
        stream.header.fps,
    )
}

pub fn simulate_cmd(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg: SimConfig = match config {
        Some(p) => {
            require_file(p)?;
            read_json(p)?
        }
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.world.seed = s;
    }
    let sim = simulate(&cfg)?;
    sim.write(out)?;
    eprintln!(
        "simulated {} frames, {} detections, {} ground-truth boxes",
        cfg.world.frames,
        sim.detections.len(),
        sim.ground_truth.len()
    );
    Ok(())
}

pub fn track_cmd(
    input: &Path,
    cameras: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?.pipeline();
    let stream = read_stream(input)?;
    let (cams, cams_path) = cameras_for(&stream, input, cameras)?;
    for d in &stream.records {
        if cams.get(d.camera).is_none() {
            return Err(Error::input(format!(
                "camera {} missing from camera file",
                d.camera
            )));
        }
    }
    let tracklets = track_stream(&stream.records, &cfg.tracker)?;
    let tracked = tracked_detections(&tracklets);
    write_jsonl(
        out,
        Some(&derived_header(&stream, &cams_path, out)),
        &tracked,
    )?;
    eprintln!(
        "{} tracklets, {} tracked boxes",
        tracklets.len(),
        tracked.len()
    );
    Ok(())
}

pub fn train_cmd(
    detections: &Path,
    tracklets: &Path,
    cameras: Option<&Path>,
    config: Option<&Path>,
    resume_from: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?.pipeline();
    let stream = read_stream(detections)?;
    let tracked = read_stream(tracklets)?;
    let (cams, _) = cameras_for(&stream, detections, cameras)?;
    if cams.len() < 2 {
        return Err(Error::input("train-assoc needs >= 2 views"));
    }
    let data = SyncDataset::build(
        &tracked.records,
        &stream.records,
        &cams,
        cfg.tracker.low_thresh,
        cfg.assoc.alpha,
    )?;
    let (state, curve) = match resume_from {
        Some(p) => {
            require_file(p)?;
            let mut state: TrainState = Checkpoint::load(p)?.into_state();
            let curve = resume(&mut state, &data, &cfg.assoc)?;
            (state, curve)
        }
        None => train(&data, &cfg.assoc)?,
    };
    Checkpoint::from_state(&state).save(out)?;
    let first = state.epochs_done as usize - curve.len();
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (i, l) in curve.iter().enumerate() {
        let line = serde_json::json!({"epoch": first + i, "l_syn": l.l_syn, "l_pro": l.l_pro, "l_total": l.l_total});
        writeln!(w, "{line}").map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}

pub fn augment_cmd(
    detections: &Path,
    tracklets: &Path,
    ckpt: &Path,
    cameras: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?.pipeline();
    let stream = read_stream(detections)?;
    let tracked = read_stream(tracklets)?;
    let (cams, cams_path) = cameras_for(&stream, detections, cameras)?;
    require_file(ckpt)?;
    let enc = Checkpoint::load(ckpt)?.encoder;
    let augmented = augment_stream(
        &stream.records,
        &tracked.records,
        &enc,
        &cams,
        &cfg.tracker,
        cfg.assoc.alpha,
        &cfg.round,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let aug_path = out.join(AUGMENTED_FILE);
    let header = derived_header(&stream, &cams_path, &aug_path);
    write_jsonl(&aug_path, Some(&header), &augmented)?;
    let labels = emit_pseudo_labels(&augmented, stream.header.fps, &cfg.round)?;
    write_pseudo_labels(&out.join(PSEUDO_LABELS_FILE), &header, &labels)?;
    eprintln!(
        "{} augmented boxes, {} pseudo labels",
        augmented.len(),
        labels.len()
    );
    Ok(())
}

pub struct EvalArgs<'a> {
    pub pred: &'a Path,
    pub gt: &'a Path,
    pub level: Option<EvalLevel>,
    pub iou: Option<f64>,
    pub cameras: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub holistic: bool,
    pub out: &'a Path,
}

pub fn eval_cmd(a: &EvalArgs<'_>) -> Result<()> {
    let mut cfg: EvalConfig = RunConfig::load(a.config)?.eval;
    if let Some(level) = a.level {
        if level != cfg.level {
            cfg.iou_thresh = None;
        }
        cfg.level = level;
    }
    if a.iou.is_some() {
        cfg.iou_thresh = a.iou;
    }
    require_file(a.gt)?;
    require_file(a.pred)?;
    let gt: Vec<GroundTruthRecord> = read_jsonl(a.gt)?;
    let cams_path = a
        .cameras
        .map(Path::to_path_buf)
        .unwrap_or_else(|| a.gt.parent().unwrap_or(Path::new(".")).join("cameras.json"));
    require_file(&cams_path)?;
    let cams = read_cameras(&cams_path)?;
    let gts = gt_at_level(&gt, &cfg, &cams)?;
    let preds = match cfg.level {
        EvalLevel::WholeBody => detection_preds(&read_stream(a.pred)?.records),
        _ => {
            let kps: Vec<KeypointPrediction> = read_jsonl(a.pred)?;
            keypoint_preds(&kps, &cfg, &cams)?
        }
    };
    let report = evaluate(&preds, &gts, &cfg, a.holistic)?;
    write_json(a.out, &report)?;
    println!("{}", to_json_line(&report));
    Ok(())
}

pub fn run_round_cmd(
    config: &Path,
    detections: Option<&Path>,
    gt: Option<&Path>,
    ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let run = RunConfig::load(Some(config))?;
    let detections = detections
        .map(Path::to_path_buf)
        .or(run.paths.detections.clone())
        .ok_or_else(|| {
            Error::input("no detection file given (--detections or paths.detections)")
        })?;
    let out = out
        .map(Path::to_path_buf)
        .or(run.paths.output.clone())
        .ok_or_else(|| Error::input("no output directory given (--out or paths.output)"))?;
    require_file(&detections)?;
    let gt = gt.map(Path::to_path_buf).or(run.paths.gt.clone());
    for p in [&gt, &ckpt.map(Path::to_path_buf)].into_iter().flatten() {
        require_file(p)?;
    }
    let inputs = RoundInputs {
        detections,
        cameras: run.paths.cameras.clone(),
        checkpoint: ckpt.map(Path::to_path_buf),
        gt,
    };
    let report = run_round(&inputs, &run.pipeline(), &out)?;
    println!("{}", to_json_line(&report));
    Ok(())
}

pub fn version_cmd() {
    println!("mvanon {}", env!("CARGO_PKG_VERSION"));
    println!("schema_version {SCHEMA_VERSION}");
    println!("checkpoint format_version {FORMAT_VERSION}");
}

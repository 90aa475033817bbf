//! Acceptance suite. Every criterion prints one PASS/FAIL line before
//! asserting. The expensive criteria run one at a time so the timed
//! training run has the machine to itself.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use mvanon_core::io::{write_jsonl, DetectionStream};
use mvanon_core::metrics::{
    detection_preds, evaluate, gt_at_level, hard_recall, holistic_recall, EvalConfig, EvalGt,
    EvalPred,
};
use mvanon_core::mva::encoder::EncoderShape;
use mvanon_core::mva::{
    loss_and_grad, sync_accuracy, AssocConfig, Checkpoint, GeometricEncoder, Instance,
    SyncAccuracy, SyncDataset, TrainState, TripletData,
};
use mvanon_core::pipeline::{augment_stream, RoundConfig};
use mvanon_core::simulator::{simulate, SimConfig, Simulation};
use mvanon_core::tracker::{track_stream, tracked_detections, TrackerConfig};
use mvanon_core::{hungarian, Box2D, CameraMeta, CameraSet, Detection, Provenance, StreamHeader};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the stdout handle directly so the line shows up even when the
/// harness captures the output of passing tests.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "\ncriterion {n} {name}: {verdict} ({detail})").unwrap();
    out.flush().unwrap();
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

// 1

fn brute_force(cost: &Array2<f64>) -> f64 {
    let (r, c) = cost.dim();
    let (small, large, transposed) = if r <= c { (r, c, false) } else { (c, r, true) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost[[j, i]]
        } else {
            cost[[i, j]]
        }
    };
    // choose an injective map small -> large by depth-first search
    fn go(
        i: usize,
        small: usize,
        large: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
        at: &dyn Fn(usize, usize) -> f64,
    ) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(i + 1, small, large, used, acc + at(i, j), best, at);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(
        0,
        small,
        large,
        &mut vec![false; large],
        0.0,
        &mut best,
        &at,
    );
    best
}

#[test]
fn criterion_1_assignment_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for k in 0..1000 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // integer costs keep every sum exact; half the cases draw from a
        // tiny range to force ties
        let hi = if k % 2 == 0 { 4 } else { 1000 };
        let cost = Array2::from_shape_fn((r, c), |_| rng.random_range(0..hi) as f64);
        let got = hungarian(cost.view()).unwrap();
        if got.total_cost != brute_force(&cost) || got.row_indices.len() != r.min(c) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(10);
    report(
        1,
        "assignment oracle",
        pass,
        &format!("1000 matrices, {mismatches} mismatches, {elapsed:.2?}"),
    );
    assert!(pass);
}

// 2

#[test]
fn criterion_2_gradient_fidelity() {
    let cams = CameraSet::new(vec![
        CameraMeta {
            id: 0,
            width: 640,
            height: 480,
            fps: 15.0,
        },
        CameraMeta {
            id: 1,
            width: 640,
            height: 480,
            fps: 15.0,
        },
    ])
    .unwrap();
    let dets = [
        Detection::new(
            "toy",
            10,
            0,
            Box2D::new(100.0, 80.0, 180.0, 300.0).unwrap(),
            0.9,
        )
        .with_embedding(vec![0.9, 0.1, -0.2, 0.3]),
        Detection::new(
            "toy",
            10,
            1,
            Box2D::new(320.0, 120.0, 390.0, 330.0).unwrap(),
            0.7,
        )
        .with_embedding(vec![0.8, 0.2, -0.1, 0.35]),
        Detection::new(
            "toy",
            22,
            1,
            Box2D::new(410.0, 90.0, 470.0, 280.0).unwrap(),
            0.4,
        )
        .with_embedding(vec![0.85, 0.05, -0.25, 0.3]),
    ];
    let insts: Vec<Instance> = dets
        .iter()
        .map(|d| Instance::from_detection(d, &cams).unwrap())
        .collect();
    let cfg = AssocConfig {
        encoder: EncoderShape {
            num_freqs: 8,
            camera_dim: 16,
            hidden: vec![24, 24],
            feature_dim: 12,
        },
        ..AssocConfig::default()
    };
    let mut enc = GeometricEncoder::new(cfg.encoder.clone(), 2, 1).unwrap();
    let batch = [TripletData {
        queries: &insts[0..1],
        positive: &insts[1..2],
        negative: &insts[2..3],
    }];
    let (_, grads) = loss_and_grad(&enc, &batch, &cfg).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let h = 1e-3;
    let (mut worst, mut failing, mut total) = (0.0f64, 0usize, 0usize);
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = enc.params.slices()[t][i];
            enc.params.slices_mut()[t][i] = orig + h;
            let up = loss_and_grad(&enc, &batch, &cfg).unwrap().0.l_total;
            enc.params.slices_mut()[t][i] = orig - h;
            let down = loss_and_grad(&enc, &batch, &cfg).unwrap().0.l_total;
            enc.params.slices_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = a.abs().max(fd.abs());
            let rel = if denom > 0.0 {
                (a - fd).abs() / denom
            } else {
                0.0
            };
            worst = worst.max(rel);
            failing += usize::from(rel > 1e-4);
            total += 1;
        }
    }
    let pass = failing == 0;
    report(
        2,
        "gradient fidelity",
        pass,
        &format!("step 1e-3: {failing} of {total} parameters above 1e-4 relative error, worst {worst:.2e}"),
    );
    assert!(pass);
}

// 3

#[test]
fn criterion_3_superset_invariant() {
    let _g = serial();
    let cfg = TrackerConfig::default();
    let (mut violations, mut checked) = (0usize, 0usize);
    for seed in 0..50 {
        let mut sim_cfg = SimConfig::default();
        sim_cfg.world.seed = seed;
        let sim = simulate(&sim_cfg).unwrap();
        let tracklets = track_stream(&sim.detections, &cfg).unwrap();
        let mut seen: HashMap<(u32, u32, [u64; 5]), usize> = HashMap::new();
        for e in tracklets.iter().flat_map(|t| &t.history) {
            *seen.entry(key(&e.detection)).or_default() += 1;
        }
        for d in sim.detections.iter().filter(|d| d.score > 0.6) {
            checked += 1;
            if seen.get(&key(d)).copied().unwrap_or(0) != 1 {
                violations += 1;
            }
        }
    }
    let pass = violations == 0 && checked > 0;
    report(
        3,
        "superset invariant",
        pass,
        &format!("50 streams, {checked} high-score detections, {violations} violations"),
    );
    assert!(pass);
}

fn key(d: &Detection) -> (u32, u32, [u64; 5]) {
    let [x1, y1, x2, y2] = d.bbox.corners();
    (
        d.frame,
        d.camera,
        [x1, y1, x2, y2, d.score].map(f64::to_bits),
    )
}

// 4 and 5 share one trained encoder

struct Trained {
    sim: Simulation,
    tracked: Vec<Detection>,
    encoder: GeometricEncoder,
    accuracy: SyncAccuracy,
    elapsed: Duration,
}

/// Default hyperparameters with the schedule scaled from 160 to 40 epochs;
/// batch size and anchor stride are free choices.
fn scaled_config() -> AssocConfig {
    AssocConfig {
        epochs: 40,
        lr_decay_epoch: 30,
        batch_size: 1,
        anchor_stride: 10,
        ..AssocConfig::default()
    }
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        single_threaded(|| {
            let start = Instant::now();
            let sim = simulate(&SimConfig::default()).unwrap();
            let tcfg = TrackerConfig::default();
            let tracked = tracked_detections(&track_stream(&sim.detections, &tcfg).unwrap());
            let cfg = scaled_config();
            let data = SyncDataset::build(
                &tracked,
                &sim.detections,
                &sim.cameras,
                tcfg.low_thresh,
                cfg.alpha,
            )
            .unwrap();
            let (train_set, holdout) = data.split(0.25);
            let mut state = TrainState::new(&cfg, train_set.num_cameras()).unwrap();
            for _ in 0..cfg.epochs {
                state.train_epoch(&train_set, &cfg).unwrap();
            }
            let eval_cfg = AssocConfig {
                anchor_stride: 1,
                ..cfg
            };
            let accuracy = sync_accuracy(&state.encoder, &holdout, &eval_cfg, 99).unwrap();
            Trained {
                sim,
                tracked,
                encoder: state.encoder,
                accuracy,
                elapsed: start.elapsed(),
            }
        })
    })
}

#[test]
fn criterion_4_synchronization_pretext() {
    let _g = serial();
    let t = trained();
    let pass = t.accuracy.accuracy >= 0.90 && t.elapsed < Duration::from_secs(300);
    report(
        4,
        "synchronization pretext",
        pass,
        &format!(
            "held-out accuracy {:.4} over {} triplets, {:.1?} single-threaded",
            t.accuracy.accuracy, t.accuracy.triplets, t.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_retrieval_improvement() {
    let _g = serial();
    let t = trained();
    let tcfg = TrackerConfig::default();
    let ecfg = EvalConfig::default();
    let gts = gt_at_level(&t.sim.ground_truth, &ecfg, &t.sim.cameras).unwrap();
    let augmented = augment_stream(
        &t.sim.detections,
        &t.tracked,
        &t.encoder,
        &t.sim.cameras,
        &tcfg,
        scaled_config().alpha,
        &RoundConfig::default(),
    )
    .unwrap();
    let high: Vec<Detection> = t
        .sim
        .detections
        .iter()
        .filter(|d| tcfg.is_high(d.score))
        .cloned()
        .collect();
    let score = |d: &[Detection]| evaluate(&detection_preds(d), &gts, &ecfg, false).unwrap();
    let (h, tr, a) = (score(&high), score(&t.tracked), score(&augmented));
    let cross = augmented
        .iter()
        .filter(|d| d.provenance == Some(Provenance::CrossView))
        .count();
    let pass =
        a.recall - h.recall >= 0.10 && a.recall >= tr.recall && a.hard_recall > tr.hard_recall;
    report(
        5,
        "retrieval improvement",
        pass,
        &format!(
            "recall high {:.4} tracked {:.4} augmented {:.4}; hard recall tracked {:.4} augmented {:.4}; {cross} cross-view boxes",
            h.recall, tr.recall, a.recall, tr.hard_recall, a.hard_recall
        ),
    );
    assert!(pass);
}

// 6

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2D {
    Box2D::new(x1, y1, x2, y2).unwrap()
}

fn gt(camera: u32, bbox: Box2D, hard: bool, identity: u32) -> EvalGt {
    EvalGt {
        image: ("v".into(), 0, camera),
        bbox,
        hard,
        identity: Some(identity),
    }
}

fn pred(camera: u32, bbox: Box2D, score: f64) -> EvalPred {
    EvalPred {
        image: ("v".into(), 0, camera),
        bbox,
        score,
    }
}

#[test]
fn criterion_6_metric_harness() {
    let cfg = EvalConfig::default();

    // one true positive at IoU 0.8 scored 0.9, one false positive at 0.8
    let one = [gt(0, b(0.0, 0.0, 10.0, 10.0), false, 0)];
    let r = evaluate(
        &[
            pred(0, b(0.0, 0.0, 10.0, 8.0), 0.9),
            pred(0, b(50.0, 50.0, 60.0, 60.0), 0.8),
        ],
        &one,
        &cfg,
        false,
    )
    .unwrap();
    let prap = (r.precision, r.recall, r.ap) == (0.5, 1.0, 1.0);

    // A seen in views 1 and 2 and fully detected, B seen in view 1 and missed
    let sets = [
        gt(1, b(0.0, 0.0, 10.0, 10.0), false, 0),
        gt(2, b(0.0, 0.0, 10.0, 10.0), false, 0),
        gt(1, b(100.0, 0.0, 110.0, 10.0), false, 1),
    ];
    let hor = holistic_recall(
        &[pred(1, sets[0].bbox, 0.9), pred(2, sets[1].bbox, 0.9)],
        &sets,
        &cfg,
    )
    .unwrap();

    let hard: Vec<EvalGt> = (0..3)
        .map(|i| {
            gt(
                0,
                b(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0),
                true,
                i,
            )
        })
        .collect();
    let hr = hard_recall(
        &[pred(0, hard[0].bbox, 0.9), pred(0, hard[2].bbox, 0.3)],
        &hard,
        &cfg,
    );

    let pass = prap && hor == Some(0.5) && hr == Some(2.0 / 3.0);
    report(
        6,
        "metric harness",
        pass,
        &format!(
            "P/R/AP {:?}, holistic {hor:?}, hard {hr:?}",
            (r.precision, r.recall, r.ap)
        ),
    );
    assert!(pass);
}

// 7

fn mvanon(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(mvanon_tests::mvanon_binary())
        .current_dir(dir)
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn cli_pipeline(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::write(dir.join("sim.json"), r#"{"world": {"frames": 150}}"#).unwrap();
    std::fs::write(
        dir.join("run.json"),
        r#"{"assoc": {"epochs": 3, "anchor_stride": 3,
            "encoder": {"num_freqs": 16, "camera_dim": 16, "hidden": [64, 64], "feature_dim": 32}},
           "seed": 7}"#,
    )
    .unwrap();
    let mut stdout = Vec::new();
    for args in [
        &[
            "simulate", "--config", "sim.json", "--seed", "3", "--out", "sim",
        ][..],
        &[
            "track",
            "--in",
            "sim/detections.jsonl",
            "--config",
            "run.json",
            "--out",
            "tracklets.jsonl",
        ],
        &[
            "train-assoc",
            "--detections",
            "sim/detections.jsonl",
            "--tracklets",
            "tracklets.jsonl",
            "--config",
            "run.json",
            "--out",
            "encoder.ckpt",
        ],
        &[
            "augment",
            "--detections",
            "sim/detections.jsonl",
            "--tracklets",
            "tracklets.jsonl",
            "--ckpt",
            "encoder.ckpt",
            "--config",
            "run.json",
            "--out",
            "aug",
        ],
        &[
            "eval",
            "--pred",
            "aug/augmented.jsonl",
            "--gt",
            "sim/gt.jsonl",
            "--out",
            "report.json",
        ],
    ] {
        stdout.extend(mvanon(dir, args));
    }
    let mut all = files(dir);
    all.insert("stdout".into(), stdout);
    all
}

#[test]
fn criterion_7_end_to_end_determinism() {
    let _g = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    let differing: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let bytes: usize = fa.values().map(Vec::len).sum();
    let pass = fa.len() == fb.len() && differing.is_empty() && fa.len() >= 9;
    report(
        7,
        "end-to-end determinism",
        pass,
        &format!(
            "{} artifacts, {bytes} bytes, differing {differing:?}",
            fa.len()
        ),
    );
    assert!(pass);
}

// 8

fn random_detection(rng: &mut ChaCha8Rng, dim: usize) -> Detection {
    let x1 = rng.random_range(-50.0..2000.0);
    let y1 = rng.random::<f64>() * 1e3;
    let bbox = b(
        x1,
        y1,
        x1 + rng.random_range(1e-6..500.0),
        y1 + rng.random::<f64>() * 900.0 + 1e-9,
    );
    let score = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    let mut d = Detection::new(
        ["a", "b\"q", "ü"][rng.random_range(0..3)],
        rng.random(),
        rng.random_range(0..8),
        bbox,
        score,
    );
    if rng.random_bool(0.7) {
        d.embedding = Some(
            (0..dim)
                .map(|_| (rng.random::<f32>() - 0.5) * 10f32.powi(rng.random_range(-30..30)))
                .collect(),
        );
    }
    if rng.random_bool(0.5) {
        d.track_id = Some(rng.random());
    }
    if rng.random_bool(0.5) {
        d.identity = Some(rng.random());
    }
    d.provenance =
        [None, Some(Provenance::Tracked), Some(Provenance::CrossView)][rng.random_range(0..3)];
    if rng.random_bool(0.3) {
        d.round = Some(rng.random());
    }
    d
}

#[test]
fn criterion_8_format_round_trip() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();

    let sim = simulate(&SimConfig {
        world: mvanon_core::simulator::WorldConfig {
            frames: 90,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap();
    let tracked =
        tracked_detections(&track_stream(&sim.detections, &TrackerConfig::default()).unwrap());
    let cfg = AssocConfig {
        epochs: 1,
        anchor_stride: 15,
        ..AssocConfig::default()
    };
    let data = SyncDataset::build(&tracked, &sim.detections, &sim.cameras, 0.1, cfg.alpha).unwrap();
    let mut state = TrainState::new(&cfg, data.num_cameras()).unwrap();
    state.train_epoch(&data, &cfg).unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    Checkpoint::from_state(&state).save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let (c1, c2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let ckpt_ok = c1 == c2;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 16;
    let records: Vec<Detection> = (0..100_000)
        .map(|_| random_detection(&mut rng, dim))
        .collect();
    let header = StreamHeader::new(dim, "cameras.json", 15.0);
    let s1 = dir.path().join("a.jsonl");
    write_jsonl(&s1, Some(&header), &records).unwrap();
    let back = DetectionStream::read(&s1).unwrap();
    let mismatched = records
        .iter()
        .zip(&back.records)
        .filter(|(a, b)| a != b)
        .count();
    let s2 = dir.path().join("b.jsonl");
    back.write(&s2).unwrap();
    let jsonl_ok = back.records.len() == records.len()
        && mismatched == 0
        && back.header == header
        && std::fs::read(&s1).unwrap() == std::fs::read(&s2).unwrap();

    let pass = ckpt_ok && jsonl_ok;
    report(
        8,
        "format round trip",
        pass,
        &format!(
            "checkpoint {} bytes identical: {ckpt_ok}; {} records, {mismatched} value mismatches",
            c1.len(),
            records.len()
        ),
    );
    assert!(pass);
}

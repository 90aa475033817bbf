use std::path::Path;
use std::process::{Command, Output};

fn mvanon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvanon"))
        .current_dir(dir)
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mvanon(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    mvanon(dir, args).status.code().unwrap()
}

const SMALL_RUN: &str = r#"{"assoc": {"epochs": 2, "anchor_stride": 5, "lr_decay_epoch": 1,
    "encoder": {"num_freqs": 8, "camera_dim": 8, "hidden": [32], "feature_dim": 16}}}"#;

fn small_scene(dir: &Path) {
    std::fs::write(dir.join("sim.json"), r#"{"world": {"frames": 60}}"#).unwrap();
    std::fs::write(dir.join("run.json"), SMALL_RUN).unwrap();
    ok(dir, &["simulate", "--config", "sim.json", "--out", "sim"]);
    ok(
        dir,
        &[
            "track",
            "--in",
            "sim/detections.jsonl",
            "--config",
            "run.json",
            "--out",
            "tracklets.jsonl",
        ],
    );
}

#[test]
fn version_lists_formats() {
    let out = ok(Path::new("."), &["version"]);
    assert!(out.contains("schema_version 1"));
    assert!(out.contains("checkpoint format_version"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(d, &["track", "--in", "missing.jsonl", "--out", "t.jsonl"]),
        2
    );

    std::fs::write(d.join("bad.json"), r#"{"tracker": {"hihg_thresh": 0.5}}"#).unwrap();
    std::fs::write(
        d.join("s.jsonl"),
        "{\"schema_version\":1,\"embedding_dim\":0,\"cameras\":\"c.json\",\"fps\":15}\n",
    )
    .unwrap();
    assert_eq!(
        code(
            d,
            &["track", "--in", "s.jsonl", "--config", "bad.json", "--out", "t.jsonl"]
        ),
        2
    );

    std::fs::write(
        d.join("v9.jsonl"),
        "{\"schema_version\":9,\"embedding_dim\":0,\"cameras\":\"c.json\",\"fps\":15}\n",
    )
    .unwrap();
    std::fs::write(
        d.join("c.json"),
        r#"{"cameras": [{"id": 0, "width": 640, "height": 480, "fps": 15}]}"#,
    )
    .unwrap();
    assert_eq!(
        code(d, &["track", "--in", "v9.jsonl", "--out", "t.jsonl"]),
        2
    );

    assert_ne!(
        code(d, &["simulate", "--config", "bad.json", "--out", "x"]),
        0
    );
    assert_ne!(code(d, &["frobnicate"]), 0);
}

#[test]
fn single_view_training_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.json"),
        r#"{"cameras": [{"id": 0, "width": 640, "height": 480, "fps": 15}]}"#,
    )
    .unwrap();
    std::fs::write(
        d.join("s.jsonl"),
        "{\"schema_version\":1,\"embedding_dim\":0,\"cameras\":\"c.json\",\"fps\":15}\n",
    )
    .unwrap();
    let out = mvanon(
        d,
        &[
            "train-assoc",
            "--detections",
            "s.jsonl",
            "--tracklets",
            "s.jsonl",
            "--out",
            "e.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs >= 2 views"));
}

#[test]
fn empty_world_gives_header_only_stream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sim.json"),
        r#"{"world": {"num_agents": 0, "frames": 10}, "corruption": {"fp_rate": 0}}"#,
    )
    .unwrap();
    ok(d, &["simulate", "--config", "sim.json", "--out", "sim"]);
    let text = std::fs::read_to_string(d.join("sim/detections.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    ok(
        d,
        &["track", "--in", "sim/detections.jsonl", "--out", "t.jsonl"],
    );
    assert_eq!(
        std::fs::read_to_string(d.join("t.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d);
    let train = [
        "train-assoc",
        "--detections",
        "sim/detections.jsonl",
        "--tracklets",
        "tracklets.jsonl",
    ];
    let full = ok(
        d,
        &[&train[..], &["--config", "run.json", "--out", "full.ckpt"]].concat(),
    );
    std::fs::write(
        d.join("one.json"),
        SMALL_RUN.replace("\"epochs\": 2", "\"epochs\": 1"),
    )
    .unwrap();
    let first = ok(
        d,
        &[&train[..], &["--config", "one.json", "--out", "one.ckpt"]].concat(),
    );
    let rest = ok(
        d,
        &[
            &train[..],
            &[
                "--config", "run.json", "--resume", "one.ckpt", "--out", "two.ckpt",
            ],
        ]
        .concat(),
    );
    assert_eq!(full, first + &rest);
    assert_eq!(
        std::fs::read(d.join("full.ckpt")).unwrap(),
        std::fs::read(d.join("two.ckpt")).unwrap()
    );
    assert_eq!(full.lines().count(), 2);
}

#[test]
fn augment_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_scene(d);
    ok(
        d,
        &[
            "train-assoc",
            "--detections",
            "sim/detections.jsonl",
            "--tracklets",
            "tracklets.jsonl",
            "--config",
            "run.json",
            "--out",
            "e.ckpt",
        ],
    );
    ok(
        d,
        &[
            "augment",
            "--detections",
            "sim/detections.jsonl",
            "--tracklets",
            "tracklets.jsonl",
            "--ckpt",
            "e.ckpt",
            "--config",
            "run.json",
            "--out",
            "aug",
        ],
    );
    let aug = std::fs::read_to_string(d.join("aug/augmented.jsonl")).unwrap();
    assert!(aug
        .lines()
        .next()
        .unwrap()
        .contains("\"cameras\":\"../sim/cameras.json\""));
    assert!(aug.lines().skip(1).all(|l| l.contains("\"provenance\":")));
    ok(
        d,
        &[
            "eval",
            "--pred",
            "aug/augmented.jsonl",
            "--gt",
            "sim/gt.jsonl",
            "--out",
            "r.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["iou_thresh"], 0.5);
    assert!(report["R"].as_f64().unwrap() > 0.5);
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), r#"{"world": {"frames": 30}}"#).unwrap();
    ok(d, &["simulate", "--config", "sim.json", "--out", "sim"]);
    let mut lines = vec![
        "{\"schema_version\":1,\"embedding_dim\":0,\"cameras\":\"sim/cameras.json\",\"fps\":15}"
            .to_string(),
    ];
    for l in std::fs::read_to_string(d.join("sim/gt.jsonl"))
        .unwrap()
        .lines()
    {
        let g: serde_json::Value = serde_json::from_str(l).unwrap();
        if g["visible"] == true {
            let det = serde_json::json!({"video": g["video"], "frame": g["frame"], "camera": g["camera"], "bbox": g["bbox"], "score": 0.9});
            lines.push(det.to_string());
        }
    }
    std::fs::write(d.join("p.jsonl"), lines.join("\n") + "\n").unwrap();
    let out = ok(
        d,
        &[
            "eval",
            "--pred",
            "p.jsonl",
            "--gt",
            "sim/gt.jsonl",
            "--out",
            "r.json",
        ],
    );
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    for k in ["P", "R", "AP", "hard_recall", "holistic_recall"] {
        assert_eq!(r[k], 1.0, "{k}");
    }

    let kps: Vec<String> = std::fs::read_to_string(d.join("sim/gt.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|g| g["visible"] == true && !g["keypoints"].is_null())
        .map(|g| {
            serde_json::json!({"video": g["video"], "frame": g["frame"], "camera": g["camera"],
                "keypoints": g["keypoints"], "score": 0.8})
            .to_string()
        })
        .collect();
    assert!(!kps.is_empty());
    std::fs::write(d.join("k.jsonl"), kps.join("\n") + "\n").unwrap();
    for level in ["face", "eye"] {
        let out = ok(
            d,
            &[
                "eval",
                "--level",
                level,
                "--pred",
                "k.jsonl",
                "--gt",
                "sim/gt.jsonl",
                "--out",
                "f.json",
            ],
        );
        let r: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(r["iou_thresh"], 0.3);
        assert_eq!(
            (r["P"].as_f64(), r["R"].as_f64()),
            (Some(1.0), Some(1.0)),
            "{level}"
        );
    }
    assert_eq!(
        code(
            d,
            &[
                "eval",
                "--level",
                "face",
                "--pred",
                "p.jsonl",
                "--gt",
                "sim/gt.jsonl",
                "--out",
                "f.json"
            ]
        ),
        2
    );
}

#[test]
fn run_round_writes_one_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("sim.json"), r#"{"world": {"frames": 60}}"#).unwrap();
    ok(d, &["simulate", "--config", "sim.json", "--out", "sim"]);
    let cfg = SMALL_RUN.replacen('{', r#"{"paths": {"detections": "sim/detections.jsonl", "gt": "sim/gt.jsonl", "output": "out"}, "round": {"round": 2}, "#, 1);
    std::fs::write(d.join("run.json"), cfg).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["run-round", "--config", "run.json"])).unwrap();
    assert_eq!(report["round"], 2);
    let names: Vec<String> = std::fs::read_dir(d.join("out/round_2"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for f in [
        "tracklets.jsonl",
        "encoder.ckpt",
        "augmented.jsonl",
        "pseudo_labels.jsonl",
        "report.json",
    ] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    assert_eq!(std::fs::read_dir(d.join("out")).unwrap().count(), 1);
}

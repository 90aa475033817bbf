//! Analytic gradients of the training loss against central differences.

use mvanon_core::mva::encoder::EncoderShape;
use mvanon_core::mva::{loss_and_grad, AssocConfig, GeometricEncoder, Instance, TripletData};
use mvanon_core::{Box2D, CameraMeta, CameraSet, Detection};

fn toy(seed: u64) -> (GeometricEncoder, Vec<Instance>, AssocConfig) {
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
    let insts = dets
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
    let enc = GeometricEncoder::new(cfg.encoder.clone(), 2, seed).unwrap();
    (enc, insts, cfg)
}

/// Worst elementwise relative error and the relative error of the whole
/// gradient vector, for central differences with step `h`.
fn gradient_errors(seed: u64, h: f64) -> (f64, f64) {
    let (mut enc, insts, cfg) = toy(seed);
    let batch = [TripletData {
        queries: &insts[0..1],
        positive: &insts[1..2],
        negative: &insts[2..3],
    }];
    let (loss, grads) = loss_and_grad(&enc, &batch, &cfg).unwrap();
    assert!(loss.l_syn > 0.0, "margin must be active");

    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let (mut worst, mut diff2, mut norm2) = (0.0f64, 0.0, 0.0);
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = enc.params.slices()[t][i];
            enc.params.slices_mut()[t][i] = orig + h;
            let up = loss_and_grad(&enc, &batch, &cfg).unwrap().0.l_total;
            enc.params.slices_mut()[t][i] = orig - h;
            let down = loss_and_grad(&enc, &batch, &cfg).unwrap().0.l_total;
            enc.params.slices_mut()[t][i] = orig;
            let n = (up - down) / (2.0 * h);
            let denom = a.abs().max(n.abs());
            if denom > 1e-10 {
                worst = worst.max((a - n).abs() / denom);
            }
            diff2 += (a - n) * (a - n);
            norm2 += a * a;
        }
    }
    (worst, (diff2 / norm2).sqrt())
}

#[test]
fn gradient_matches_fine_central_differences() {
    for seed in [1, 5, 9] {
        let (worst, _) = gradient_errors(seed, 1e-5);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn finite_difference_error_shrinks_quadratically() {
    let (_, coarse) = gradient_errors(5, 1e-3);
    let (_, fine) = gradient_errors(5, 1e-4);
    assert!(coarse < 1e-4, "vector relative error {coarse:e}");
    let ratio = coarse / fine;
    assert!(ratio > 30.0, "error ratio {ratio}");
}

//! Synchronization triplet loss and corner reprojection loss.

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::CameraSet;

use super::encoder::GeometricEncoder;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_syn: f64,
    pub l_pro: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_syn: f64, l_pro: f64) -> Self {
        Self {
            l_syn,
            l_pro,
            l_total: l_syn + l_pro,
        }
    }
}

/// `max(0, h_pos - h_neg + margin)`
pub fn triplet_loss(h_pos: f64, h_neg: f64, margin: f64) -> f64 {
    (h_pos - h_neg + margin).max(0.0)
}

/// Sum of absolute corner errors for one row.
pub(crate) fn l1_corners(pred: &[f64], target: &[f64; 4]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum()
}

/// Mean over the batch of `|v_l* - v_l|_1 + |v_r* - v_r|_1`, each detection's
/// own normalized corners serving as the target.
pub fn reprojection_loss(
    batch: &[Detection],
    enc: &GeometricEncoder,
    cams: &CameraSet,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("reprojection loss needs a non-empty batch"));
    }
    let inputs = batch
        .iter()
        .map(|d| enc.input_for(d, cams))
        .collect::<Result<Vec<_>>>()?;
    let fwd = enc.forward(&inputs);
    let total: f64 = fwd
        .reprojection
        .outer_iter()
        .zip(&inputs)
        .map(|(r, i)| l1_corners(r.as_slice().expect("standard layout"), &i.corners))
        .sum();
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert!((triplet_loss(0.2, 0.9, 1.0) - 0.3).abs() < 1e-15);
        assert_eq!(triplet_loss(0.1, 1.5, 1.0), 0.0);
        assert_eq!(triplet_loss(0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn breakdown_sums() {
        let b = LossBreakdown::new(0.25, 0.5);
        assert_eq!(b.l_total, 0.75);
    }
}

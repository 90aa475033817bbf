//! Instance-level distance matrices and the assignment-averaged image
//! distance.

use ndarray::{Array1, Array2, ArrayView2};

use crate::assignment::{hungarian, AssignmentResult};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::CameraSet;

use super::encoder::GeometricEncoder;

const NORM_FLOOR: f64 = 1e-12;

/// Rows scaled to unit L2 norm, with the original norms.
pub fn unit_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (mut row, n) in out.outer_iter_mut().zip(norms.iter_mut()) {
        *n = row.dot(&row).sqrt().max(NORM_FLOOR);
        let k = 1.0 / *n;
        row.mapv_inplace(|v| v * k);
    }
    (out, norms)
}

/// Euclidean distance between unit vectors, halved so it lies in `[0, 1]`.
pub fn half_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.outer_iter().enumerate() {
        for (j, rb) in b.outer_iter().enumerate() {
            let sq: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out[[i, j]] = (sq.sqrt() / 2.0).min(1.0);
        }
    }
    out
}

pub(crate) fn appearance_matrix(dets: &[&Detection]) -> Result<Array2<f64>> {
    let dim = dets
        .first()
        .and_then(|d| d.embedding.as_ref())
        .map(|e| e.len())
        .unwrap_or(0);
    let mut m = Array2::zeros((dets.len(), dim));
    for (mut row, d) in m.outer_iter_mut().zip(dets) {
        let e = d
            .embedding
            .as_ref()
            .ok_or_else(|| Error::input("appearance embedding missing while alpha > 0"))?;
        if e.len() != dim {
            return Err(Error::input("appearance embeddings differ in dimension"));
        }
        for (r, &v) in row.iter_mut().zip(e) {
            *r = v as f64;
        }
    }
    Ok(unit_rows(&m).0)
}

fn single_camera(dets: &[Detection]) -> Result<Option<u32>> {
    match dets.first() {
        None => Ok(None),
        Some(first) if dets.iter().all(|d| d.camera == first.camera) => Ok(Some(first.camera)),
        Some(_) => Err(Error::input("detections span several cameras")),
    }
}

/// `alpha * E_a + (1 - alpha) * E_g` between queries from one view and a
/// gallery from another. Both component matrices compare unit-normalized
/// vectors, so every entry lies in `[0, 1]`.
pub fn instance_distance_matrix(
    queries: &[Detection],
    gallery: &[Detection],
    enc: &GeometricEncoder,
    cams: &CameraSet,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input("alpha must lie in [0, 1]"));
    }
    if let (Some(a), Some(b)) = (single_camera(queries)?, single_camera(gallery)?) {
        if a == b {
            return Err(Error::input(
                "queries and gallery must come from different views",
            ));
        }
    }
    if queries.is_empty() || gallery.is_empty() {
        return Ok(Array2::zeros((queries.len(), gallery.len())));
    }

    let inputs = queries
        .iter()
        .chain(gallery)
        .map(|d| enc.input_for(d, cams))
        .collect::<Result<Vec<_>>>()?;
    let fwd = enc.forward(&inputs);
    let (unit, _) = unit_rows(fwd.features());
    let nq = queries.len();
    let geo = half_distances(
        unit.slice(ndarray::s![..nq, ..]),
        unit.slice(ndarray::s![nq.., ..]),
    );
    if alpha == 0.0 {
        return Ok(geo);
    }
    let q: Vec<&Detection> = queries.iter().collect();
    let g: Vec<&Detection> = gallery.iter().collect();
    let app = half_distances(appearance_matrix(&q)?.view(), appearance_matrix(&g)?.view());
    Ok(app * alpha + geo * (1.0 - alpha))
}

/// Image distance with its assignment. An empty side gives the maximal
/// distance 1.
pub fn image_distance_with_matches(e: ArrayView2<'_, f64>) -> Result<(f64, AssignmentResult)> {
    let res = hungarian(e)?;
    if res.is_empty() {
        return Ok((1.0, res));
    }
    let h = res.pairs().map(|(r, c)| e[[r, c]]).sum::<f64>() / res.len() as f64;
    Ok((h, res))
}

/// Mean of the assignment-matched entries of `e`.
pub fn image_distance(e: ArrayView2<'_, f64>) -> Result<f64> {
    image_distance_with_matches(e).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pair() {
        assert_eq!(image_distance(array![[0.37]].view()).unwrap(), 0.37);
    }

    #[test]
    fn picks_zero_diagonal() {
        assert_eq!(
            image_distance(array![[0.0, 1.0], [1.0, 0.0]].view()).unwrap(),
            0.0
        );
        assert_eq!(
            image_distance(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_is_maximal() {
        assert_eq!(
            image_distance(Array2::<f64>::zeros((0, 4)).view()).unwrap(),
            1.0
        );
        assert_eq!(
            image_distance(Array2::<f64>::zeros((3, 0)).view()).unwrap(),
            1.0
        );
    }

    #[test]
    fn column_permutation_invariant() {
        let e = array![[0.2, 0.9, 0.4], [0.7, 0.1, 0.8]];
        let p = array![[0.4, 0.2, 0.9], [0.8, 0.7, 0.1]];
        assert_eq!(
            image_distance(e.view()).unwrap(),
            image_distance(p.view()).unwrap()
        );
    }

    #[test]
    fn half_distance_bounds() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[-1.0, 0.0], [1.0, 0.0]];
        let d = half_distances(a.view(), b.view());
        assert!((d[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(d[[0, 1]], 0.0);
        assert!((d[[1, 0]] - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }
}

//! Learnable Fourier-feature encoding of normalized 2-D points.

use std::f64::consts::PI;

use ndarray::ArrayView2;

/// `[sin f_1, cos f_1, ..., sin f_N, cos f_N]` with `f_j = 2π b_jᵀ v`, for a
/// basis `b` of shape `N x 2`.
pub fn fourier_encode(v: [f64; 2], basis: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut out = vec![0.0; 2 * basis.nrows()];
    fourier_encode_into(v, basis, &mut out);
    out
}

pub(crate) fn fourier_encode_into(v: [f64; 2], basis: ArrayView2<'_, f64>, out: &mut [f64]) {
    for (j, b) in basis.outer_iter().enumerate() {
        let f = 2.0 * PI * (b[0] * v[0] + b[1] * v[1]);
        let (s, c) = f.sin_cos();
        out[2 * j] = s;
        out[2 * j + 1] = c;
    }
}

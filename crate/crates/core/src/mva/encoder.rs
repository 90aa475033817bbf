//! Geometric encoder: Fourier features of the normalized box corners plus a
//! learnable per-camera vector, a stack of linear / layer-norm / SiLU blocks,
//! and a linear head reconstructing the corners.

use std::f64::consts::PI;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::CameraSet;

use super::fourier::fourier_encode_into;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderShape {
    /// Number of Fourier frequencies per corner.
    pub num_freqs: usize,
    pub camera_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderShape {
    fn default() -> Self {
        Self {
            num_freqs: 128,
            camera_dim: 256,
            hidden: vec![512, 512],
            feature_dim: 256,
        }
    }
}

impl EncoderShape {
    /// Two Fourier encodings of `2N` values each, then the camera vector.
    pub fn input_dim(&self) -> usize {
        4 * self.num_freqs + self.camera_dim
    }

    /// Input width followed by the output width of every block.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_freqs == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::input("encoder widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcBlock {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Every learnable tensor of the encoder. Also used for gradients and
/// optimizer moments, which share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `N x 2` Fourier frequencies.
    pub basis: Array2<f64>,
    /// `C x V` camera embeddings.
    pub cameras: Array2<f64>,
    pub blocks: Vec<FcBlock>,
    /// `4 x G`
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl Parameters {
    pub fn zeros_like(&self) -> Self {
        Self {
            basis: Array2::zeros(self.basis.raw_dim()),
            cameras: Array2::zeros(self.cameras.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| FcBlock {
                    weight: Array2::zeros(b.weight.raw_dim()),
                    bias: Array1::zeros(b.bias.len()),
                    gamma: Array1::zeros(b.gamma.len()),
                    beta: Array1::zeros(b.beta.len()),
                })
                .collect(),
            head_weight: Array2::zeros(self.head_weight.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
        }
    }

    /// Tensor names and shapes in the fixed serialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("basis".to_string(), self.basis.shape().to_vec()),
            ("cameras".to_string(), self.cameras.shape().to_vec()),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{k}.weight"), b.weight.shape().to_vec()));
            out.push((format!("block{k}.bias"), b.bias.shape().to_vec()));
            out.push((format!("block{k}.gamma"), b.gamma.shape().to_vec()));
            out.push((format!("block{k}.beta"), b.beta.shape().to_vec()));
        }
        out.push(("head.weight".to_string(), self.head_weight.shape().to_vec()));
        out.push(("head.bias".to_string(), self.head_bias.shape().to_vec()));
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![slice(&self.basis), slice(&self.cameras)];
        for b in &self.blocks {
            out.push(slice(&b.weight));
            out.push(slice(&b.bias));
            out.push(slice(&b.gamma));
            out.push(slice(&b.beta));
        }
        out.push(slice(&self.head_weight));
        out.push(slice(&self.head_bias));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.basis.as_slice_mut().expect("standard layout"),
            self.cameras.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            out.push(b.weight.as_slice_mut().expect("standard layout"));
            out.push(b.bias.as_slice_mut().expect("standard layout"));
            out.push(b.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.beta.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head_weight.as_slice_mut().expect("standard layout"));
        out.push(self.head_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// One encoder input row: normalized `[x1, y1, x2, y2]` and a camera index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderInput {
    pub corners: [f64; 4],
    pub camera: usize,
}

impl EncoderInput {
    pub fn from_detection(det: &Detection, cams: &CameraSet) -> Result<Self> {
        let meta = cams
            .get(det.camera)
            .ok_or_else(|| Error::input(format!("unknown camera id {}", det.camera)))?;
        Ok(Self {
            corners: det.bbox.normalized(meta.width as f64, meta.height as f64),
            camera: det.camera as usize,
        })
    }
}

struct BlockCache {
    zhat: Array2<f64>,
    inv_std: Array1<f64>,
    y: Array2<f64>,
}

/// Intermediate values of a batched forward pass, kept for backprop.
pub struct Forward {
    inputs: Vec<EncoderInput>,
    /// `activations[0]` is the concatenated input, `activations[k + 1]` the
    /// output of block `k`; the last one is the geometric feature matrix.
    activations: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    /// `n x 4` reconstructed corners.
    pub reprojection: Array2<f64>,
}

impl Forward {
    pub fn features(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one activation")
    }

    pub fn inputs(&self) -> &[EncoderInput] {
        &self.inputs
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricEncoder {
    pub shape: EncoderShape,
    pub num_cameras: usize,
    pub seed: u64,
    pub params: Parameters,
}

impl GeometricEncoder {
    /// Random initialization: unit Gaussian frequencies and camera vectors,
    /// uniform `±1/sqrt(fan_in)` linear layers, identity layer norms.
    pub fn new(shape: EncoderShape, num_cameras: usize, seed: u64) -> Result<Self> {
        shape.validate()?;
        if num_cameras == 0 {
            return Err(Error::input("encoder needs at least one camera"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal))
        };
        let basis = normal(shape.num_freqs, 2);
        let cameras = normal(num_cameras, shape.camera_dim);

        let mut uniform = |dims: (usize, usize), fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn(dims, || rng.random_range(-bound..bound))
        };
        let widths = shape.widths();
        let blocks = widths
            .windows(2)
            .map(|w| FcBlock {
                weight: uniform((w[1], w[0]), w[0]),
                bias: uniform((1, w[1]), w[0])
                    .into_shape_with_order(w[1])
                    .unwrap(),
                gamma: Array1::ones(w[1]),
                beta: Array1::zeros(w[1]),
            })
            .collect();
        let g = shape.feature_dim;
        let head_weight = uniform((4, g), g);
        let head_bias = uniform((1, 4), g).into_shape_with_order(4).unwrap();

        let mut params = Parameters {
            basis,
            cameras,
            blocks,
            head_weight,
            head_bias,
        };
        params.quantize();
        Ok(Self {
            shape,
            num_cameras,
            seed,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim()
    }

    pub fn input_for(&self, det: &Detection, cams: &CameraSet) -> Result<EncoderInput> {
        let input = EncoderInput::from_detection(det, cams)?;
        if input.camera >= self.num_cameras {
            return Err(Error::input(format!(
                "camera id {} outside the encoder's {} cameras",
                input.camera, self.num_cameras
            )));
        }
        Ok(input)
    }

    fn build_input(&self, inputs: &[EncoderInput]) -> Array2<f64> {
        let n2 = 2 * self.shape.num_freqs;
        let mut x = Array2::zeros((inputs.len(), self.input_dim()));
        for (row, inp) in x.outer_iter_mut().zip(inputs) {
            let row = row.into_slice().expect("standard layout");
            let c = &inp.corners;
            fourier_encode_into([c[0], c[1]], self.params.basis.view(), &mut row[..n2]);
            fourier_encode_into([c[2], c[3]], self.params.basis.view(), &mut row[n2..2 * n2]);
            row[2 * n2..].copy_from_slice(
                self.params
                    .cameras
                    .row(inp.camera)
                    .as_slice()
                    .expect("standard layout"),
            );
        }
        x
    }

    /// Batched forward pass over all rows in `inputs`.
    pub fn forward(&self, inputs: &[EncoderInput]) -> Forward {
        let mut activations = vec![self.build_input(inputs)];
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for b in &self.params.blocks {
            let h = activations.last().unwrap();
            let mut z = h.dot(&b.weight.t());
            z += &b.bias;
            let (zhat, inv_std) = layer_norm(&z);
            let mut y = zhat.clone();
            y *= &b.gamma;
            y += &b.beta;
            let out = y.mapv(silu);
            caches.push(BlockCache { zhat, inv_std, y });
            activations.push(out);
        }
        let f = activations.last().unwrap();
        let mut reprojection = f.dot(&self.params.head_weight.t());
        reprojection += &self.params.head_bias;
        Forward {
            inputs: inputs.to_vec(),
            activations,
            blocks: caches,
            reprojection,
        }
    }

    /// Geometric feature of a single detection.
    pub fn encode_geometric(&self, det: &Detection, cams: &CameraSet) -> Result<Vec<f64>> {
        let input = self.input_for(det, cams)?;
        Ok(self.forward(&[input]).features().row(0).to_vec())
    }

    /// Reconstructed normalized corners `(x1, y1, x2, y2)` from a feature.
    pub fn reproject(&self, feature: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let w = self.params.head_weight.row(k);
            *o = w.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>() + self.params.head_bias[k];
        }
        out
    }

    /// Gradients of a scalar loss given its partials with respect to the
    /// feature matrix and the reprojection matrix of `fwd`.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_features: ArrayView2<'_, f64>,
        d_reproj: ArrayView2<'_, f64>,
    ) -> Parameters {
        let mut grads = self.params.zeros_like();
        self.backward_into(fwd, d_features, d_reproj, &mut grads);
        grads
    }

    /// [`Self::backward`] writing into an existing buffer shaped like the
    /// parameters; every entry is overwritten.
    pub fn backward_into(
        &self,
        fwd: &Forward,
        d_features: ArrayView2<'_, f64>,
        d_reproj: ArrayView2<'_, f64>,
        grads: &mut Parameters,
    ) {
        let feats = fwd.features();
        general_mat_mul(1.0, &d_reproj.t(), feats, 0.0, &mut grads.head_weight);
        grads.head_bias.assign(&d_reproj.sum_axis(Axis(0)));
        let mut dh = d_features.to_owned() + d_reproj.dot(&self.params.head_weight);

        for (k, b) in self.params.blocks.iter().enumerate().rev() {
            let cache = &fwd.blocks[k];
            let input = &fwd.activations[k];
            let mut dy = dh;
            dy.zip_mut_with(&cache.y, |d, &y| *d *= silu_grad(y));
            let g = &mut grads.blocks[k];
            g.gamma.assign(&(&dy * &cache.zhat).sum_axis(Axis(0)));
            g.beta.assign(&dy.sum_axis(Axis(0)));
            let dzhat = dy * &b.gamma;
            let dz = layer_norm_backward(&dzhat, &cache.zhat, &cache.inv_std);
            general_mat_mul(1.0, &dz.t(), input, 0.0, &mut g.weight);
            g.bias.assign(&dz.sum_axis(Axis(0)));
            dh = dz.dot(&b.weight);
        }

        grads.basis.fill(0.0);
        grads.cameras.fill(0.0);
        let n2 = 2 * self.shape.num_freqs;
        let x0 = &fwd.activations[0];
        for (r, inp) in fwd.inputs.iter().enumerate() {
            let dx = dh.row(r);
            let x = x0.row(r);
            let mut cam = grads.cameras.row_mut(inp.camera);
            cam += &dx.slice(s![2 * n2..]);
            for (half, v) in [
                [inp.corners[0], inp.corners[1]],
                [inp.corners[2], inp.corners[3]],
            ]
            .iter()
            .enumerate()
            {
                let off = half * n2;
                for j in 0..self.shape.num_freqs {
                    let (sin_f, cos_f) = (x[off + 2 * j], x[off + 2 * j + 1]);
                    let df = dx[off + 2 * j] * cos_f - dx[off + 2 * j + 1] * sin_f;
                    grads.basis[[j, 0]] += 2.0 * PI * df * v[0];
                    grads.basis[[j, 1]] += 2.0 * PI * df * v[1];
                }
            }
        }
    }
}

fn layer_norm(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = z.ncols() as f64;
    let mut zhat = z.clone();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in zhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let k = *inv;
        row.mapv_inplace(|v| (v - mean) * k);
    }
    (zhat, inv_std)
}

fn layer_norm_backward(
    dzhat: &Array2<f64>,
    zhat: &Array2<f64>,
    inv_std: &Array1<f64>,
) -> Array2<f64> {
    let width = dzhat.ncols() as f64;
    let mut dz = dzhat.clone();
    for ((mut row, zh), &inv) in dz.outer_iter_mut().zip(zhat.outer_iter()).zip(inv_std) {
        let mean_d = row.sum() / width;
        let mean_dz = row.iter().zip(zh.iter()).map(|(a, b)| a * b).sum::<f64>() / width;
        for (d, &h) in row.iter_mut().zip(zh.iter()) {
            *d = inv * (*d - mean_d - h * mean_dz);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeometricEncoder {
        let shape = EncoderShape {
            num_freqs: 4,
            camera_dim: 3,
            hidden: vec![6],
            feature_dim: 5,
        };
        GeometricEncoder::new(shape, 2, 9).unwrap()
    }

    #[test]
    fn default_input_width() {
        // 2N per corner plus V
        assert_eq!(EncoderShape::default().input_dim(), 2 * 256 + 256);
        assert_eq!(EncoderShape::default().widths(), vec![768, 512, 512, 256]);
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = small();
        let inp = [EncoderInput {
            corners: [0.1, 0.2, 0.3, 0.6],
            camera: 1,
        }];
        let a = enc.forward(&inp);
        let b = enc.forward(&inp);
        assert_eq!(a.features(), b.features());
        assert_eq!(a.reprojection, b.reprojection);
    }

    #[test]
    fn camera_changes_feature() {
        let enc = small();
        let c = [0.1, 0.2, 0.3, 0.6];
        let f = enc.forward(&[
            EncoderInput {
                corners: c,
                camera: 0,
            },
            EncoderInput {
                corners: c,
                camera: 1,
            },
        ]);
        assert_ne!(f.features().row(0), f.features().row(1));
    }

    #[test]
    fn zero_head_reprojects_to_zero_and_is_linear() {
        let mut enc = small();
        enc.params.head_weight.fill(0.0);
        enc.params.head_bias.fill(0.0);
        assert_eq!(enc.reproject(&[1.0, 2.0, 3.0, 4.0, 5.0]), [0.0; 4]);

        let enc = {
            let mut e = small();
            e.params.head_bias.fill(0.0);
            e
        };
        let f = [0.3, -0.2, 0.9, 0.1, -0.5];
        let scaled: Vec<f64> = f.iter().map(|v| 2.5 * v).collect();
        let a = enc.reproject(&f);
        let b = enc.reproject(&scaled);
        for k in 0..4 {
            assert!((b[k] - 2.5 * a[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let enc = small();
        let a = EncoderInput {
            corners: [0.1, 0.2, 0.3, 0.6],
            camera: 0,
        };
        let b = EncoderInput {
            corners: [0.5, 0.1, 0.9, 0.7],
            camera: 1,
        };
        let both = enc.forward(&[a, b]);
        let one = enc.forward(&[b]);
        for (x, y) in both.features().row(1).iter().zip(one.features().row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

//! Binary encoder checkpoint.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "MVAE" | format_version u32 | N u32 | V u32 | C u32 | G u32
//! | hidden count u32 | hidden widths u32* | seed u64
//! | epochs_done u32 | optimizer step u64 | has_optimizer u8
//! | tensor count u32
//! | per tensor: name length u32, name utf-8, ndim u32, dims u32*, values f32*
//! ```
//!
//! Tensors appear in the fixed order of [`Parameters::layout`], followed by
//! the first and second Adam moments (prefixed `adam_m.` / `adam_v.`) when
//! optimizer state is present.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::encoder::{EncoderShape, GeometricEncoder, Parameters};
use super::train::{Adam, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MVAE";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: GeometricEncoder,
    pub epochs_done: u32,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            encoder: state.encoder.clone(),
            epochs_done: state.epochs_done,
            optimizer: Some(state.optimizer.clone()),
        }
    }

    pub fn weights_only(encoder: GeometricEncoder) -> Self {
        Self {
            encoder,
            epochs_done: 0,
            optimizer: None,
        }
    }

    pub fn into_state(self) -> TrainState {
        let optimizer = self
            .optimizer
            .unwrap_or_else(|| Adam::new(&self.encoder.params));
        TrainState {
            encoder: self.encoder,
            optimizer,
            epochs_done: self.epochs_done,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let enc = &self.encoder;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let w = &mut out;
        let u32_ = |w: &mut Vec<u8>, v: usize| w.write_u32::<LittleEndian>(v as u32).unwrap();
        u32_(w, FORMAT_VERSION as usize);
        u32_(w, enc.shape.num_freqs);
        u32_(w, enc.shape.camera_dim);
        u32_(w, enc.num_cameras);
        u32_(w, enc.shape.feature_dim);
        u32_(w, enc.shape.hidden.len());
        for &h in &enc.shape.hidden {
            u32_(w, h);
        }
        w.write_u64::<LittleEndian>(enc.seed).unwrap();
        u32_(w, self.epochs_done as usize);
        let (step, has_opt) = match &self.optimizer {
            Some(a) => (a.step, 1u8),
            None => (0, 0u8),
        };
        w.write_u64::<LittleEndian>(step).unwrap();
        w.write_u8(has_opt).unwrap();

        let layout = enc.params.layout();
        let mut tensors: Vec<(String, &Vec<usize>, &[f64])> = layout
            .iter()
            .zip(enc.params.slices())
            .map(|((n, s), d)| (n.clone(), s, d))
            .collect();
        if let Some(a) = &self.optimizer {
            for (prefix, p) in [("adam_m.", &a.m), ("adam_v.", &a.v)] {
                for ((n, s), d) in layout.iter().zip(p.slices()) {
                    tensors.push((format!("{prefix}{n}"), s, d));
                }
            }
        }
        u32_(w, tensors.len());
        for (name, shape, data) in tensors {
            u32_(w, name.len());
            w.write_all(name.as_bytes()).unwrap();
            u32_(w, shape.len());
            for &d in shape {
                u32_(w, d);
            }
            for &v in data {
                w.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not an encoder checkpoint"));
        }
        let rd = |r: &mut Cursor<&[u8]>| -> Result<usize> {
            r.read_u32::<LittleEndian>()
                .map(|v| v as usize)
                .map_err(|_| Error::Checkpoint("truncated file".into()))
        };
        let version = rd(&mut r)? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let num_freqs = rd(&mut r)?;
        let camera_dim = rd(&mut r)?;
        let num_cameras = rd(&mut r)?;
        let feature_dim = rd(&mut r)?;
        let n_hidden = rd(&mut r)?;
        if n_hidden > 64 {
            return Err(bad("implausible layer count"));
        }
        let hidden = (0..n_hidden)
            .map(|_| rd(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let seed = r
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated file"))?;
        let epochs_done = rd(&mut r)? as u32;
        let step = r
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated file"))?;
        let has_opt = r.read_u8().map_err(|_| bad("truncated file"))?;
        if has_opt > 1 {
            return Err(bad("bad optimizer flag"));
        }

        let shape = EncoderShape {
            num_freqs,
            camera_dim,
            hidden,
            feature_dim,
        };
        shape.validate()?;
        let mut encoder = GeometricEncoder::new(shape, num_cameras, seed)?;
        let layout = encoder.params.layout();
        let count = rd(&mut r)?;
        let expected = layout.len() * if has_opt == 1 { 3 } else { 1 };
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {count}"
            )));
        }

        let read_into = |target: &mut Parameters,
                         prefix: &str,
                         r: &mut Cursor<&[u8]>|
         -> Result<()> {
            for ((name, shape), slot) in layout.iter().zip(target.slices_mut()) {
                let len = rd(r)?;
                let mut buf = vec![0u8; len.min(4096)];
                if len > buf.len() {
                    return Err(bad("tensor name too long"));
                }
                r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
                let got = String::from_utf8(buf).map_err(|_| bad("tensor name is not utf-8"))?;
                let want = format!("{prefix}{name}");
                if got != want {
                    return Err(Error::Checkpoint(format!(
                        "expected tensor {want}, found {got}"
                    )));
                }
                let ndim = rd(r)?;
                let dims = (0..ndim.min(8))
                    .map(|_| rd(r))
                    .collect::<Result<Vec<_>>>()?;
                if &dims != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {want} has shape {dims:?}, expected {shape:?}"
                    )));
                }
                for v in slot.iter_mut() {
                    *v = r
                        .read_f32::<LittleEndian>()
                        .map_err(|_| bad("truncated file"))? as f64;
                }
            }
            Ok(())
        };
        read_into(&mut encoder.params, "", &mut r)?;
        let optimizer = if has_opt == 1 {
            let mut adam = Adam::new(&encoder.params);
            adam.step = step;
            read_into(&mut adam.m, "adam_m.", &mut r)?;
            read_into(&mut adam.v, "adam_v.", &mut r)?;
            Some(adam)
        } else {
            None
        };
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        if !encoder.params.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            encoder,
            epochs_done,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| w.write_all(&self.to_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeometricEncoder {
        let shape = EncoderShape {
            num_freqs: 3,
            camera_dim: 2,
            hidden: vec![5, 4],
            feature_dim: 3,
        };
        GeometricEncoder::new(shape, 3, 77).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = Checkpoint::weights_only(tiny());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let enc = tiny();
        let mut adam = Adam::new(&enc.params);
        adam.step = 12;
        adam.m.basis.fill(0.25);
        adam.v.head_bias.fill(1e-7f32 as f64);
        let ck = Checkpoint {
            encoder: enc,
            epochs_done: 4,
            optimizer: Some(adam),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint::weights_only(tiny()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}

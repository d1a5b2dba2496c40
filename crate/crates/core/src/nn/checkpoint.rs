//! Binary checkpoint files.
//!
//! Layout (little-endian): the 8 magic bytes `TAFCKPT1`, a `u64` tensor
//! count, then per tensor a `u64` name length, the UTF-8 name, a `u64` rank,
//! `rank` × `u64` dims and the raw `f32` values. Metadata (epoch, config
//! fingerprint) travels as `meta.*` tensors holding 16-bit chunks, which
//! `f32` represents exactly.

use std::path::Path;

use super::model::VideoModel;
use super::optim::Sgd;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_PREFIX: &[u8; 7] = b"TAFCKPT";
pub const FORMAT_VERSION: u8 = b'1';

const META_EPOCH: &str = "meta.epoch";
const META_FINGERPRINT: &str = "meta.fingerprint";
const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn u64_to_chunks(x: u64) -> Tensor<f32> {
    Tensor::from_fn(&[4], |i| ((x >> (16 * i)) & 0xffff) as f32)
}

fn chunks_to_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        (v >= 0.0 && v <= 65535.0 && v.fract() == 0.0).then(|| acc | ((v as u64) << (16 * i)))
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Snapshot of a model, its optimizer state and the epoch counter.
    pub fn from_model(model: &VideoModel<f32>, optimizer: Option<&Sgd<f32>>, epoch: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (name, t) in model.param_names().into_iter().zip(model.params()) {
            tensors.push((name, strip(t)));
        }
        for (name, t) in model.buffer_names().into_iter().zip(model.buffers()) {
            tensors.push((name, strip(t)));
        }
        if let Some(opt) = optimizer {
            for ((name, t), v) in model.param_names().iter().zip(model.params()).zip(opt.velocity()) {
                let vel = Tensor::new(t.shape(), v.clone()).expect("velocity matches parameter");
                tensors.push((format!("{MOMENTUM_PREFIX}{name}"), vel));
            }
        }
        tensors.push((META_EPOCH.into(), u64_to_chunks(epoch)));
        tensors.push((META_FINGERPRINT.into(), u64_to_chunks(model.config().fingerprint())));
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn epoch(&self) -> Option<u64> {
        self.get(META_EPOCH).and_then(chunks_to_u64)
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.get(META_FINGERPRINT).and_then(chunks_to_u64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8)?;
        if &magic[..7] != MAGIC_PREFIX {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        if magic[7] != FORMAT_VERSION {
            return Err(Error::UnknownVersion(magic[7]));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("implausible rank {rank} for `{name}`")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("dims of `{name}` overflow")))?;
            let bytes = r.take(numel.checked_mul(4).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("dims of `{name}` overflow"))
            })?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&buf)
    }

    /// Writes every stored parameter and statistic into `model`.
    pub fn restore_model(&self, model: &mut VideoModel<f32>) -> Result<()> {
        if let Some(fp) = self.fingerprint() {
            if fp != model.config().fingerprint() {
                return Err(Error::Config(format!(
                    "checkpoint fingerprint {fp:016x} does not match model config {:016x}",
                    model.config().fingerprint()
                )));
            }
        }
        let names: Vec<String> = model.param_names().into_iter().chain(model.buffer_names()).collect();
        for (name, dst) in names.iter().zip(model.state_mut()) {
            let src = self
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::DimensionMismatch {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Restores momentum buffers, if the checkpoint carries them.
    pub fn restore_optimizer(&self, model: &VideoModel<f32>, optimizer: &mut Sgd<f32>) -> Result<bool> {
        let mut velocity = Vec::new();
        for (name, p) in model.param_names().iter().zip(model.params()) {
            let Some(v) = self.get(&format!("{MOMENTUM_PREFIX}{name}")) else {
                return Ok(false);
            };
            if v.shape() != p.shape() {
                return Err(Error::DimensionMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: v.shape().to_vec(),
                });
            }
            velocity.push(v.data().to_vec());
        }
        optimizer.set_velocity(velocity);
        Ok(true)
    }
}

fn strip(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn small() -> VideoModel<f32> {
        let cfg = ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            classes: 3,
            widths: vec![4, 4],
            strides: vec![2, 1],
            ..ModelConfig::default()
        };
        VideoModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn bytes_round_trip_idempotently() {
        let m = small();
        let ck = Checkpoint::from_model(&m, None, 7);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch(), Some(7));
        assert_eq!(back.fingerprint(), Some(m.config().fingerprint()));
        assert_eq!(&bytes[..8], b"TAFCKPT1");
    }

    #[test]
    fn truncated_and_versioned_inputs_are_rejected() {
        let bytes = Checkpoint::from_model(&small(), None, 0).to_bytes();
        for cut in [3, 8, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::UnknownVersion(b'2'))));
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&junk), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn restore_reports_dimension_mismatch() {
        let m = small();
        let mut ck = Checkpoint::from_model(&m, None, 0);
        ck.tensors.retain(|(n, _)| !n.starts_with("meta."));
        ck.tensors[0].1 = Tensor::zeros(&[1, 2, 3]);
        let mut target = small();
        assert!(matches!(
            ck.restore_model(&mut target),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn u64_chunks_are_exact() {
        for x in [0u64, 1, 0xdead_beef_cafe_f00d, u64::MAX] {
            assert_eq!(chunks_to_u64(&u64_to_chunks(x)), Some(x));
        }
    }
}

//! Bit-exact checkpoint archive.
//!
//! Layout: magic `GGNN`, u32 version, u32 tensor count, then per tensor:
//! u32 name length, UTF-8 name, u8 element-type code, u8 rank, u32 dims,
//! raw little-endian data; a trailing CRC32 (IEEE) covers all preceding
//! bytes. Everything — parameters, optimizer moments, schedule state, RNG
//! seed, epoch counter — is stored as named tensors, in a fixed order, so
//! save→load→save reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use iml_net::Params;
use iml_tensor::{Precision, Scalar, Tensor};

use crate::error::{Result, TrainError};

pub const MAGIC: [u8; 4] = *b"GGNN";
pub const VERSION: u32 = 1;
/// Element-type code for raw u64 payloads (counters, seeds).
pub const CODE_U64: u8 = 3;

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE reflected polynomial.
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub code: u8,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn push_scalar_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let mut data = Vec::with_capacity(t.numel() * T::PRECISION.byte_width());
        for &v in t.values() {
            v.write_le(&mut data);
        }
        self.tensors.push(StoredTensor {
            name: name.to_string(),
            code: T::PRECISION.code(),
            shape: t.shape().to_vec(),
            data,
        });
    }

    pub fn push_f64_vec(&mut self, name: &str, values: &[f64]) {
        let mut data = Vec::with_capacity(values.len() * 8);
        for &v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(StoredTensor {
            name: name.to_string(),
            code: Precision::Double.code(),
            shape: vec![values.len()],
            data,
        });
    }

    pub fn push_u64s(&mut self, name: &str, values: &[u64]) {
        let mut data = Vec::with_capacity(values.len() * 8);
        for &v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(StoredTensor {
            name: name.to_string(),
            code: CODE_U64,
            shape: vec![values.len()],
            data,
        });
    }

    pub fn find(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| TrainError::MissingTensor(name.to_string()))
    }

    pub fn f64_vec(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.find(name)?;
        if t.code != Precision::Double.code() {
            return Err(TrainError::TensorType(name.to_string()));
        }
        Ok(t.data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u64_vec(&self, name: &str) -> Result<Vec<u64>> {
        let t = self.find(name)?;
        if t.code != CODE_U64 {
            return Err(TrainError::TensorType(name.to_string()));
        }
        Ok(t.data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn scalar_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self.find(name)?;
        if t.code != T::PRECISION.code() {
            return Err(TrainError::TensorType(name.to_string()));
        }
        let width = T::PRECISION.byte_width();
        let values: Vec<T> = t.data.chunks_exact(width).map(T::read_le).collect();
        Ok(Tensor::from_vec(values, &t.shape))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.code);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if bytes.len() < *pos + n {
                return Err(TrainError::Truncated(bytes.len()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(TrainError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(TrainError::Version(version));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| TrainError::Truncated(pos))?;
            let code = take(&mut pos, 1)?[0];
            let width = match code {
                c if c == Precision::Single.code() => 4,
                c if c == Precision::Double.code() => 8,
                CODE_U64 => 8,
                _ => return Err(TrainError::TensorType(name)),
            };
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = take(&mut pos, numel * width)?.to_vec();
            tensors.push(StoredTensor { name, code, shape, data });
        }
        let stored = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let computed = crc32(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(TrainError::Checksum { stored, computed });
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Append every model parameter under `params.<name>` in traversal order.
pub fn push_model_params<T: Scalar, M: Params<T>>(ckpt: &mut Checkpoint, model: &M) {
    model.visit("", &mut |name, tensor| {
        ckpt.push_scalar_tensor(&format!("params.{name}"), tensor);
    });
}

/// Restore parameters into `model`, failing on the first name, shape, or
/// type mismatch.
pub fn load_model_params<T: Scalar, M: Params<T>>(model: &mut M, ckpt: &Checkpoint) -> Result<()> {
    let mut failure = None;
    model.visit_mut("", &mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let stored = match ckpt.scalar_tensor::<T>(&format!("params.{name}")) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        if stored.shape() != tensor.shape() {
            failure = Some(TrainError::TensorShape {
                name: name.to_string(),
                expected: tensor.shape().to_vec(),
                got: stored.shape().to_vec(),
            });
            return;
        }
        *tensor = stored.requires_grad(true);
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

//! Binary model file.
//!
//! All integers little-endian:
//!
//! ```text
//! "SINF"                  4 bytes magic
//! version                 u16 (= 1)
//! input_dim               u32
//! layer_count             u32
//! metadata_len            u32
//! metadata                UTF-8, `key=value` lines
//! per layer:
//!   in_dim                u32
//!   out_dim               u32
//!   activation tag        u8  (0 linear, 1 sigmoid, 2 tanh, 3 rectifier, 4 ramp)
//!   activation param      f64 (ramp threshold, else 0)
//!   weights               f32 x in_dim*out_dim, row-major
//!   bias                  f32 x out_dim
//! crc32                   u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activations::{Activation, ActivationError};
use crate::linalg::Matrix;

use super::{LayerParams, MlpModel, NetworkError};

pub const MODEL_MAGIC: [u8; 4] = *b"SINF";
pub const FORMAT_VERSION: u16 = 1;

// Refuse absurd declared sizes before allocating.
const MAX_DIM: usize = 1 << 20;
const MAX_LAYERS: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file: magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),
    #[error("model file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("layer {layer}: declared dims do not chain ({detail})")]
    DimMismatch { layer: usize, detail: String },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("metadata is not valid UTF-8 key=value text")]
    BadMetadata,
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Model(#[from] NetworkError),
}

impl MlpModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            out.push(layer.activation.tag());
            out.extend_from_slice(&layer.activation.param().to_le_bytes());
            for &w in layer.weights.as_slice() {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
            for &b in &layer.bias {
                out.extend_from_slice(&(b as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MODEL_MAGIC {
            return Err(ModelFileError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(ModelFileError::UnsupportedVersion(version));
        }
        let input_dim = r.u32()? as usize;
        let layer_count = r.u32()? as usize;
        if layer_count == 0 || layer_count > MAX_LAYERS || input_dim == 0 || input_dim > MAX_DIM {
            return Err(ModelFileError::DimMismatch {
                layer: 0,
                detail: format!("input_dim {input_dim}, {layer_count} layers"),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| ModelFileError::BadMetadata)?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or(ModelFileError::BadMetadata)?;
            metadata.insert(k.to_string(), v.to_string());
        }

        let mut layers = Vec::with_capacity(layer_count);
        let mut width = input_dim;
        for layer in 0..layer_count {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            if in_dim != width || out_dim == 0 || out_dim > MAX_DIM {
                return Err(ModelFileError::DimMismatch {
                    layer,
                    detail: format!("in {in_dim} (expected {width}), out {out_dim}"),
                });
            }
            let tag = r.u8()?;
            let param = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let activation = Activation::from_tag(tag, param)?;
            let weights = r.f32s(in_dim * out_dim)?;
            let bias = r.f32s(out_dim)?;
            let weights = Matrix::from_vec(in_dim, out_dim, weights).map_err(NetworkError::from)?;
            layers.push(LayerParams::new(weights, bias, activation)?);
            width = out_dim;
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(ModelFileError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(ModelFileError::TrailingBytes(bytes.len() - r.pos));
        }
        let mut model = MlpModel::new(input_dim, layers)?;
        model.metadata = metadata;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelFileError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized model.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ModelFileError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        let raw = self.take(n.saturating_mul(4))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

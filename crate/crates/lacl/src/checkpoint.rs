//! Binary checkpoint files holding both parameter branches, the optimizer
//! velocity, and the queue contents.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "LACL"
//! version  u32      currently 1
//! dims     5 x u32  input, hidden, backbone, proj_hidden, contrast
//! step     u64
//! epoch    u32
//! floats   3 x num_params x f64   query params, key params, velocity
//! classes  u32
//! capacity u64      slots per class
//! qdim     u32      queue entry dim
//! per class: len u64, then len x qdim x f64
//! ```
//!
//! Floats are stored bit-for-bit, so a save/load round trip reproduces
//! training state exactly. Loading validates everything it reads and
//! distinguishes a wrong file type, a wrong version, a short file, and
//! internally inconsistent contents.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::Reader;
use crate::math::Embedding;
use crate::model::{ModelDims, ModelParams};
use crate::queue::QueueSnapshot;

const MAGIC: &[u8; 4] = b"LACL";
const VERSION: u32 = 1;

/// Full training state as stored on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u32,
    pub params_q: ModelParams,
    pub params_k: ModelParams,
    pub velocity: ModelParams,
    pub queue: QueueSnapshot,
    pub per_class_capacity: usize,
}

impl Checkpoint {
    /// Serialize to `path`, writing a sibling temp file first so a crash
    /// mid-write never leaves a half-formed checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        crate::fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn validate(&self) -> Result<()> {
        let dims = self.params_q.dims;
        if self.params_k.dims != dims || self.velocity.dims != dims {
            return Err(Error::InvalidState(
                "parameter branches disagree on layer dims".into(),
            ));
        }
        if self.per_class_capacity == 0 {
            return Err(Error::InvalidState(
                "queue capacity must be > 0".into(),
            ));
        }
        for class in 0..self.queue.num_classes() {
            if self.queue.class_keys(class).len() > self.per_class_capacity {
                return Err(Error::InvalidState(format!(
                    "class {class} holds more keys than its capacity {}",
                    self.per_class_capacity
                )));
            }
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params_q.dims;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [
            dims.input_dim,
            dims.hidden_dim,
            dims.backbone_dim,
            dims.proj_hidden_dim,
            dims.contrast_dim,
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for params in [&self.params_q, &self.params_k, &self.velocity] {
            for v in params.flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.queue.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.per_class_capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.queue.dim() as u32).to_le_bytes());
        for class in 0..self.queue.num_classes() {
            let keys = self.queue.class_keys(class);
            out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
            for key in keys {
                for &v in key.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "LACL",
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let dims = ModelDims {
            input_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            backbone_dim: r.u32()? as usize,
            proj_hidden_dim: r.u32()? as usize,
            contrast_dim: r.u32()? as usize,
        };
        dims.validate()
            .map_err(|e| r.malformed(format!("bad layer dims: {e}")))?;
        let step = r.u64()?;
        let epoch = r.u32()?;

        let n = dims.num_params();
        let mut branches = Vec::with_capacity(3);
        for name in ["query params", "key params", "velocity"] {
            let flat = r.f64s(n)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(r.malformed(format!("non-finite value in {name}")));
            }
            branches.push(ModelParams::from_flat(dims, &flat).map_err(|e| {
                r.malformed(format!("cannot rebuild {name}: {e}"))
            })?);
        }
        let velocity = branches.pop().unwrap();
        let params_k = branches.pop().unwrap();
        let params_q = branches.pop().unwrap();

        let classes = r.u32()? as usize;
        let capacity = r.u64()? as usize;
        let qdim = r.u32()? as usize;
        if classes == 0 || capacity == 0 || qdim == 0 {
            return Err(r.malformed(format!(
                "degenerate queue header: {classes} classes, capacity {capacity}, dim {qdim}"
            )));
        }
        let mut per_class = Vec::with_capacity(classes);
        for class in 0..classes {
            let len = r.u64()? as usize;
            if len > capacity {
                return Err(r.malformed(format!(
                    "class {class} claims {len} keys but capacity is {capacity}"
                )));
            }
            let mut keys = Vec::with_capacity(len);
            for slot in 0..len {
                let v = r.f64s(qdim)?;
                keys.push(Embedding::from_unit(v).map_err(|e| {
                    r.malformed(format!("class {class} slot {slot}: {e}"))
                })?);
            }
            per_class.push(keys);
        }
        if !r.is_empty() {
            return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
        }
        let queue = QueueSnapshot::new(qdim, per_class)
            .map_err(|e| r.malformed(format!("cannot rebuild queue: {e}")))?;
        Ok(Checkpoint {
            step,
            epoch,
            params_q,
            params_k,
            velocity,
            queue,
            per_class_capacity: capacity,
        })
    }
}

//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "TSEG"                       magic
//! u32                          format version (1)
//! u32 n, n × [u32; 5]          architecture fingerprint
//! u32 m, m × (u32 len, len × f32)   parameter buffers: w0, b0, w1, b1, ...
//! u32 epoch, f64 best_iou, u64 seed
//! u32 len, len × u8            config echo (UTF-8)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::layers::ConvParams;
use crate::model::{fingerprint, Geometry, TriChannelNet};

pub const MAGIC: &[u8; 4] = b"TSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic bytes: not a checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("architecture fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub best_iou: f64,
    pub seed: u64,
    /// Resolved training configuration, `key=value` per line.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: TriChannelNet<f32>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let fp = fingerprint(self.net.geometry());
        out.extend_from_slice(&(fp.len() as u32).to_le_bytes());
        for entry in &fp {
            for v in entry {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let params = self.net.params();
        out.extend_from_slice(&(2 * params.len() as u32).to_le_bytes());
        for p in params {
            for buf in [&p.weights, &p.bias] {
                out.extend_from_slice(&(buf.len() as u32).to_le_bytes());
                for v in buf.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.best_iou.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let mut fp = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let mut e = [0u32; 5];
            for v in &mut e {
                *v = r.u32()?;
            }
            fp.push(e);
        }
        let geometry = match fp.first() {
            Some(&[0, h, w, 1, 0]) => Geometry::new(h as usize, w as usize)
                .map_err(|e| CheckpointError::FingerprintMismatch(e.to_string()))?,
            _ => return Err(CheckpointError::FingerprintMismatch("missing input descriptor".into())),
        };
        let expected = fingerprint(geometry);
        if fp != expected {
            let at = fp.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(fp.len().min(expected.len()));
            return Err(CheckpointError::FingerprintMismatch(format!("layer descriptor {at} differs")));
        }
        let template = TriChannelNet::<f32>::zeroed(geometry);
        let buffers = r.u32()? as usize;
        if buffers != 2 * template.params().len() {
            return Err(CheckpointError::Corrupt(format!("{buffers} parameter buffers")));
        }
        let mut params = Vec::with_capacity(template.params().len());
        for t in template.params() {
            let mut read = |expected: usize| -> Result<Vec<f32>, CheckpointError> {
                let len = r.u32()? as usize;
                if len != expected {
                    return Err(CheckpointError::Corrupt(format!("buffer of {len} values, expected {expected}")));
                }
                r.f32s(len)
            };
            let weights = read(t.weights.len())?;
            let bias = read(t.bias.len())?;
            params.push(
                ConvParams::from_parts(t.filters, t.kernel_h, t.kernel_w, t.in_channels, weights, bias)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            );
        }
        let net = TriChannelNet::from_params(geometry, params).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let epoch = r.u32()?;
        let best_iou = f64::from_bits(r.u64()?);
        let seed = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config echo is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { net, meta: CheckpointMeta { epoch, best_iou, seed, config } })
    }

    /// Loads a checkpoint and requires it to match `geometry`.
    pub fn load(path: &Path, geometry: Geometry) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.net.geometry() != geometry {
            return Err(CheckpointError::FingerprintMismatch(format!(
                "checkpoint input is {}x{}, expected {}x{}",
                ck.net.geometry().height,
                ck.net.geometry().width,
                geometry.height,
                geometry.width
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }
}

pub fn save_checkpoint(net: &TriChannelNet<f32>, meta: &CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint { net: net.clone(), meta: meta.clone() }.save(path)
}

/// Loads a production (100×100) checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path, Geometry::PRODUCTION)
}

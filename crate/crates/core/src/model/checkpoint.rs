//! Binary weights file plus a JSON metadata sidecar.
//!
//! Weights file, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"HLATVAE\0"
//! 8       4     u32 format version (1)
//! 12      4     u32 input dim d
//! 16      4     u32 latent dim n
//! 20      4     u32 hidden layer count L
//! 24      4·L   u32 hidden widths h₁ … h_L
//! …       8     u64 epochs trained
//! …       8     u64 seed
//! …             f64 parameter blobs
//! ```
//!
//! The parameter blobs follow [`Vae::parameters`] order: every encoder
//! layer, then every decoder layer, each as its weight (`fan_in × fan_out`,
//! row-major) followed by its bias (`fan_out`). Shapes are implied by the
//! dimensions in the header.
//!
//! The sidecar (`<file>.json`) holds [`CheckpointMeta`], including the
//! SHA-256 of the weights file; loading fails if either file is missing or
//! the hash does not match.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layer, TrainConfig, Vae};
use crate::datasets::Scaling;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::matrix::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"HLATVAE\0";
pub const FORMAT_VERSION: u32 = 1;

/// Trained weights with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeCheckpoint {
    pub model: Vae,
    pub spec: LossSpec,
    pub config: TrainConfig,
    pub epochs: usize,
    /// Scaling fitted on the training CSV, reused on evaluation data.
    pub input_scaling: Option<Scaling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub loss_spec: LossSpec,
    pub train_config: TrainConfig,
    pub input_scaling: Option<Scaling>,
    pub weights_sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| Error::Format("parameter size overflows".into()))?;
        let data = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseMatrix::new(rows, cols, data)
    }
}

impl VaeCheckpoint {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn encode(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.model.encode(x)
    }

    pub fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.model.embed(x)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut out = Vec::with_capacity(64 + 8 * m.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, m.input_dim)?;
        put_u32(&mut out, m.latent_dim)?;
        put_u32(&mut out, m.hidden.len())?;
        for &h in &m.hidden {
            put_u32(&mut out, h)?;
        }
        out.extend_from_slice(&(self.epochs as u64).to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        for p in m.parameters() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a weights file. Returns the network, epochs and seed.
    pub fn parse_weights(bytes: &[u8]) -> Result<(Vae, usize, u64)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let d = r.u32()?;
        let n = r.u32()?;
        let layers = r.u32()?;
        if layers > 64 {
            return Err(Error::Format(format!("implausible hidden layer count {layers}")));
        }
        let hidden = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let epochs = r.u64()? as usize;
        let seed = r.u64()?;
        let mut vae = Vae::new(d, n, &hidden, 0).map_err(|e| Error::Format(e.to_string()))?;
        let mut read_layers = |layers: &mut Vec<Layer>| -> Result<()> {
            for l in layers.iter_mut() {
                l.weight = r.matrix(l.weight.rows(), l.weight.cols())?;
                l.bias = r.matrix(1, l.bias.cols())?;
            }
            Ok(())
        };
        read_layers(&mut vae.encoder)?;
        read_layers(&mut vae.decoder)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((vae, epochs, seed))
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format_version: FORMAT_VERSION,
            input_dim: self.model.input_dim,
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden.clone(),
            epochs: self.epochs,
            seed: self.config.seed,
            loss_spec: self.spec.clone(),
            train_config: self.config.clone(),
            input_scaling: self.input_scaling.clone(),
            weights_sha256: self.sha256()?,
        })
    }

    /// Writes the weights to `path` and the metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta()?)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let read = |p: &Path| {
            fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(p.to_path_buf()),
                _ => Error::Io(e),
            })
        };
        let bytes = read(path)?;
        let meta_path = sidecar_path(path);
        let meta: CheckpointMeta = serde_json::from_slice(&read(&meta_path)?)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != meta.weights_sha256 {
            return Err(Error::Format(format!(
                "{} does not match the hash recorded in {}",
                path.display(),
                meta_path.display()
            )));
        }
        let (model, epochs, seed) = Self::parse_weights(&bytes)?;
        if (model.input_dim, model.latent_dim, &model.hidden, epochs, seed)
            != (meta.input_dim, meta.latent_dim, &meta.hidden, meta.epochs, meta.seed)
        {
            return Err(Error::Format("weights header disagrees with metadata".into()));
        }
        meta.loss_spec.validate()?;
        Ok(Self {
            model,
            spec: meta.loss_spec,
            config: meta.train_config,
            epochs,
            input_scaling: meta.input_scaling,
        })
    }
}

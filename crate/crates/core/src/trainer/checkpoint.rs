//! Binary checkpoint container.
//!
//! Layout: the 5-byte magic `GRQO1`, a little-endian `u32` format version, a
//! little-endian `u64` metadata length, the metadata as JSON (configs, step,
//! epoch, metric history, tensor directory), then the tensors as row-major
//! little-endian `f32` values at the offsets listed in the directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GRQO1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    epoch: usize,
    history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    payload_crc32: u32,
}

/// Parameters plus the bookkeeping needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self { model: model.config.clone(), train: None, step: 0, epoch: 0, history: Vec::new(), params: model.params.clone() }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::check_layout(&self.model, &self.params)?;
        Ok(Model { config: self.model, params: self.params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.num_elements() * 4);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols(), offset: payload.len() as u64 });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Metadata {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            epoch: self.epoch,
            history: self.history.clone(),
            tensors,
            payload_len: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("missing GRQO1 header"));
        }
        let mut at = MAGIC.len();
        let version = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        at += 4;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        at += 8;
        if bytes.len() < at + meta_len {
            return Err(corrupt("truncated metadata"));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[at..at + meta_len]).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        at += meta_len;
        let payload = &bytes[at..];
        if payload.len() as u64 != meta.payload_len {
            return Err(Error::Checksum {
                what: format!("{} payload ({} of {} bytes)", path.display(), payload.len(), meta.payload_len),
                expected: meta.payload_crc32,
                actual: crc32fast::hash(payload),
            });
        }
        let actual = crc32fast::hash(payload);
        if actual != meta.payload_crc32 {
            return Err(Error::Checksum { what: format!("{} payload", path.display()), expected: meta.payload_crc32, actual });
        }
        let mut params = ParamStore::new();
        for e in &meta.tensors {
            let start = e.offset as usize;
            let end = start + e.rows * e.cols * 4;
            if end > payload.len() {
                return Err(corrupt(&format!("tensor {} extends past the payload", e.name)));
            }
            let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(e.name.clone(), Tensor::new(e.rows, e.cols, data));
        }
        Ok(Self { model: meta.model, train: meta.train, step: meta.step, epoch: meta.epoch, history: meta.history, params })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Loads a checkpoint and checks it against an expected architecture.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model != expected {
        return Err(Error::Shape(format!(
            "checkpoint architecture differs: num_queries {} vs {}, dim {} vs {}, decoder_layers {} vs {}",
            ckpt.model.num_queries,
            expected.num_queries,
            ckpt.model.dim,
            expected.dim,
            ckpt.model.decoder_layers,
            expected.decoder_layers
        )));
    }
    Model::check_layout(expected, &ckpt.params)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        let cfg = ModelConfig { dim: 8, heads: 2, ffn_hidden: 16, num_queries: 4, ..Default::default() };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut c = Checkpoint::from_model(&small());
        c.step = 17;
        c.params.get_mut("anchors").unwrap().data_mut()[0] = f32::from_bits(0x3f80_0001);
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.fingerprint(), c.params.fingerprint());
    }

    #[test]
    fn corruption_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = Checkpoint::from_model(&small());
        let bytes = c.to_bytes().unwrap();

        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checksum { .. })));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 3] ^= 1;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checksum { .. })));

        let mut v = bytes.clone();
        v[5] = 9;
        fs::write(&p, &v).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 9, .. })));

        fs::write(&p, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn mismatched_queries_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = small();
        save_checkpoint(&p, &Checkpoint::from_model(&m)).unwrap();
        let other = ModelConfig { num_queries: 8, ..m.config.clone() };
        assert!(matches!(load_checkpoint_for(&p, &other), Err(Error::Shape(_))));
        assert!(load_checkpoint_for(&p, &m.config).is_ok());
    }
}

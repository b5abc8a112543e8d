//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VXCK" | u16 version | u8 kind | u32 header_len | header JSON
//! u32 n_tensors | n x (u16 name_len | name | u8 dtype | u8 ndims | u32 dims.. | f32/f64 data)
//! 32-byte SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::duration::{DurationModel, DurationModelConfig};
use crate::error::{Error, Result};
use crate::frontend::features::ByteReader;
use crate::nn::ParamStore;
use crate::vocoder::{Discriminators, Generator, VocoderConfig};

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u16 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Duration,
    Acoustic,
    Generator,
    Discriminators,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Duration => 1,
            ModelKind::Acoustic => 2,
            ModelKind::Generator => 3,
            ModelKind::Discriminators => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => ModelKind::Duration,
            2 => ModelKind::Acoustic,
            3 => ModelKind::Generator,
            4 => ModelKind::Discriminators,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Duration => "duration",
            ModelKind::Acoustic => "acoustic",
            ModelKind::Generator => "generator",
            ModelKind::Discriminators => "discriminators",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Optimisation steps taken to produce these weights.
    pub step: u64,
    #[serde(default)]
    pub speakers: Vec<String>,
}

/// SHA-256 of the canonical (key-sorted) JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.header.kind.code());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(t.dtype() == DType::F64));
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            if t.dtype() == DType::F64 {
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Reads only the magic, version and header.
    pub fn header_from_bytes(bytes: &[u8]) -> Result<CheckpointHeader> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.u16().ok_or_else(|| corrupt("truncated"))?;
        if version != CHECKPOINT_VERSION {
            let hint = if version < CHECKPOINT_VERSION {
                format!(
                    "format v{version} predates v{CHECKPOINT_VERSION}; load it with the release that \
                     wrote it and re-save, or retrain"
                )
            } else {
                format!("format v{version} is newer than this build; upgrade voxclone")
            };
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: CHECKPOINT_VERSION as u32,
                hint,
            });
        }
        let kind = r.u8().ok_or_else(|| corrupt("truncated"))?;
        let kind = ModelKind::from_code(kind).ok_or_else(|| corrupt(format!("unknown kind {kind}")))?;
        let len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let json = r.take(len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.kind != kind {
            return Err(corrupt("kind byte disagrees with header"));
        }
        Ok(header)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Self::header_from_bytes(bytes)?;
        if bytes.len() < 32 {
            return Err(corrupt("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = ByteReader::new(body);
        r.take(7);
        let len = r.u32().expect("header already parsed") as usize;
        r.take(len);
        let n = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u16().ok_or_else(|| corrupt("truncated"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| corrupt("truncated"))?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let is_f64 = r.u8().ok_or_else(|| corrupt("truncated"))? == 1;
            let rank = r.u8().ok_or_else(|| corrupt("truncated"))? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("truncated"))?;
            let count: usize = dims.iter().product();
            let width = if is_f64 { 8 } else { 4 };
            let raw = r
                .take(count * width)
                .ok_or_else(|| corrupt(format!("tensor {name} truncated")))?;
            let t = if is_f64 {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            } else {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            };
            tensors.insert(name, t);
        }
        if !r.rest().is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn is_checkpoint(bytes: &[u8]) -> bool {
        bytes.starts_with(MAGIC)
    }
}

/// Models that can be stored as a [`Checkpoint`].
pub trait Checkpointable: Sized {
    const KIND: ModelKind;
    type Config: Serialize + serde::de::DeserializeOwned;

    fn model_config(&self) -> &Self::Config;
    fn params(&self) -> &ParamStore;
    fn speaker_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn rebuild(config: Self::Config, speakers: Vec<String>, store: ParamStore) -> Result<Self>;
}

impl Checkpointable for DurationModel {
    const KIND: ModelKind = ModelKind::Duration;
    type Config = DurationModelConfig;

    fn model_config(&self) -> &Self::Config {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        self.store()
    }
    fn rebuild(config: Self::Config, _: Vec<String>, store: ParamStore) -> Result<Self> {
        DurationModel::from_store(config, store)
    }
}

impl Checkpointable for AcousticModel {
    const KIND: ModelKind = ModelKind::Acoustic;
    type Config = AcousticConfig;

    fn model_config(&self) -> &Self::Config {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        self.store()
    }
    fn speaker_names(&self) -> Vec<String> {
        self.speakers().to_vec()
    }
    fn rebuild(config: Self::Config, speakers: Vec<String>, store: ParamStore) -> Result<Self> {
        AcousticModel::from_store(config, speakers, store)
    }
}

impl Checkpointable for Generator {
    const KIND: ModelKind = ModelKind::Generator;
    type Config = VocoderConfig;

    fn model_config(&self) -> &Self::Config {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        self.store()
    }
    fn rebuild(config: Self::Config, _: Vec<String>, store: ParamStore) -> Result<Self> {
        Generator::from_store(config, store)
    }
}

impl Checkpointable for Discriminators {
    const KIND: ModelKind = ModelKind::Discriminators;
    type Config = VocoderConfig;

    fn model_config(&self) -> &Self::Config {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        self.store()
    }
    fn rebuild(config: Self::Config, _: Vec<String>, store: ParamStore) -> Result<Self> {
        Discriminators::from_store(config, store)
    }
}

pub fn to_checkpoint<M: Checkpointable>(model: &M, step: u64) -> Result<Checkpoint> {
    let config = model.model_config();
    Ok(Checkpoint {
        header: CheckpointHeader {
            kind: M::KIND,
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            step,
            speakers: model.speaker_names(),
        },
        tensors: model.params().tensors(),
    })
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, step: u64, path: &Path) -> Result<()> {
    to_checkpoint(model, step)?.save(path)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Refuse checkpoints whose config hash differs, unless `force` is set.
    pub expected_config_hash: Option<String>,
    pub force: bool,
}

pub fn from_checkpoint<M: Checkpointable>(ck: Checkpoint, opts: &LoadOptions) -> Result<(M, CheckpointHeader)> {
    if ck.header.kind != M::KIND {
        return Err(corrupt(format!(
            "expected a {} checkpoint, found {}",
            M::KIND.as_str(),
            ck.header.kind.as_str()
        )));
    }
    let config: M::Config = serde_json::from_value(ck.header.config.clone())
        .map_err(|e| corrupt(format!("config: {e}")))?;
    let actual = config_hash(&config)?;
    if actual != ck.header.config_hash {
        return Err(corrupt("stored config hash does not match stored config"));
    }
    if let Some(expected) = &opts.expected_config_hash {
        if *expected != actual && !opts.force {
            return Err(Error::ConfigHashMismatch {
                found: actual,
                expected: expected.clone(),
            });
        }
    }
    let n_tensors = ck.tensors.len();
    let store = ParamStore::from_tensors(ck.tensors)?;
    let model = M::rebuild(config, ck.header.speakers.clone(), store)?;
    if model.params().tensors().len() != n_tensors {
        return Err(corrupt("checkpoint holds parameters the model does not use"));
    }
    Ok((model, ck.header))
}

pub fn load_checkpoint<M: Checkpointable>(path: &Path, opts: &LoadOptions) -> Result<(M, CheckpointHeader)> {
    from_checkpoint(Checkpoint::load(path)?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Precision;

    fn duration() -> DurationModel {
        let cfg = DurationModelConfig {
            embedding_dim: 4,
            recurrent_hidden: 4,
            ..DurationModelConfig::new(6)
        };
        DurationModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("d.ckpt");
        let m = duration();
        save_checkpoint(&m, 17, &path).unwrap();
        let (back, header): (DurationModel, _) = load_checkpoint(&path, &LoadOptions::default()).unwrap();
        assert!(back.store().bit_identical(m.store()).unwrap());
        assert_eq!(header.step, 17);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn f64_models_round_trip() {
        let cfg = DurationModelConfig {
            embedding_dim: 4,
            recurrent_hidden: 4,
            precision: Precision::F64,
            ..DurationModelConfig::new(6)
        };
        let m = DurationModel::new(cfg, 1).unwrap();
        let ck = Checkpoint::from_bytes(&to_checkpoint(&m, 0).unwrap().to_bytes().unwrap()).unwrap();
        let (back, _): (DurationModel, _) = from_checkpoint(ck, &LoadOptions::default()).unwrap();
        assert!(back.store().bit_identical(m.store()).unwrap());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = to_checkpoint(&duration(), 0).unwrap().to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(b"random bytes here"),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn old_version_has_migration_hint() {
        let mut bytes = to_checkpoint(&duration(), 0).unwrap().to_bytes().unwrap();
        bytes[4..6].copy_from_slice(&1u16.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::VersionMismatch { found: 1, hint, .. }) => assert!(hint.contains("re-save")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_hash_is_checked_unless_forced() {
        let ck = to_checkpoint(&duration(), 0).unwrap();
        let strict = LoadOptions {
            expected_config_hash: Some("0".repeat(64)),
            force: false,
        };
        assert!(matches!(
            from_checkpoint::<DurationModel>(ck.clone(), &strict),
            Err(Error::ConfigHashMismatch { .. })
        ));
        let forced = LoadOptions { force: true, ..strict };
        assert!(from_checkpoint::<DurationModel>(ck, &forced).is_ok());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let ck = to_checkpoint(&duration(), 0).unwrap();
        assert!(from_checkpoint::<Generator>(ck, &LoadOptions::default()).is_err());
    }
}

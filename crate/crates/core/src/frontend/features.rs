//! Per-utterance feature preparation and the binary feature cache.
//!
//! Cache file layout (little endian):
//!
//! ```text
//! b"VXFT" | version: u16 | dtype: u8 (0 = f32, 1 = u32) | ndims: u8 | dims: u32 * ndims
//! | hop: u32 | win: u32 | sample_rate: u32 | key: [u8; 32] | data
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::alignment::{durations_to_frames, parse_alignment, DurationFrames};
use super::audio::{load_audio, AudioConfig, Waveform};
use super::manifest::UtteranceRecord;
use super::mel::{MelConfig, MelExtractor, MelSpectrogram};
use super::phones::PhoneInventory;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VXFT";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArray {
    pub dims: Vec<usize>,
    pub data: FeatureData,
    pub hop: u32,
    pub win: u32,
    pub sample_rate: u32,
    pub key: [u8; 32],
}

impl FeatureArray {
    pub fn dtype_name(&self) -> &'static str {
        match self.data {
            FeatureData::F32(_) => "f32",
            FeatureData::U32(_) => "u32",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.push(match self.data {
            FeatureData::F32(_) => 0,
            FeatureData::U32(_) => 1,
        });
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [self.hop, self.win, self.sample_rate] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.key);
        match &self.data {
            FeatureData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FeatureData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptCheckpoint(format!("feature file: {what}"));
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or_else(|| corrupt("truncated"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16().ok_or_else(|| corrupt("truncated"))?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: FEATURE_VERSION as u32,
                hint: "re-run `prepare` to rebuild the feature cache".into(),
            });
        }
        let dtype = r.u8().ok_or_else(|| corrupt("truncated"))?;
        let ndims = r.u8().ok_or_else(|| corrupt("truncated"))? as usize;
        let dims = (0..ndims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("truncated"))?;
        let hop = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let win = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let sample_rate = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let key: [u8; 32] = r
            .take(32)
            .ok_or_else(|| corrupt("truncated"))?
            .try_into()
            .expect("32 bytes");
        let count: usize = dims.iter().product();
        let payload = r.rest();
        if payload.len() != count * 4 {
            return Err(corrupt("payload size does not match dims"));
        }
        let words = payload.chunks_exact(4).map(|c| c.try_into().expect("4 bytes"));
        let data = match dtype {
            0 => FeatureData::F32(words.map(f32::from_le_bytes).collect()),
            1 => FeatureData::U32(words.map(u32::from_le_bytes).collect()),
            _ => return Err(corrupt("unknown dtype")),
        };
        Ok(Self {
            dims,
            data,
            hop,
            win,
            sample_rate,
            key,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn is_feature_file(bytes: &[u8]) -> bool {
        bytes.starts_with(MAGIC)
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

/// One ingested utterance: phone ids, frame durations, log-mel and (optionally) audio.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub speaker: String,
    pub phone_ids: Vec<usize>,
    pub durations: DurationFrames,
    pub mel: MelSpectrogram,
    /// Padded to exactly `mel frames * hop` samples.
    pub waveform: Option<Waveform>,
}

impl TrainingExample {
    pub fn n_frames(&self) -> usize {
        self.mel.n_frames()
    }
}

/// Front-end settings shared by every stage.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub audio: AudioConfig,
    pub mel: MelExtractor,
    pub inventory: PhoneInventory,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    audio: &'a AudioConfig,
    mel: &'a MelConfig,
    inventory: &'a [String],
}

impl FeaturePipeline {
    pub fn new(audio: AudioConfig, mel: MelConfig, inventory: PhoneInventory) -> Self {
        Self {
            audio,
            mel: MelExtractor::new(mel),
            inventory,
        }
    }

    fn cache_key(&self, record: &UtteranceRecord) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(std::fs::read(&record.audio)?);
        h.update([0u8]);
        h.update(std::fs::read(&record.alignment)?);
        h.update([0u8]);
        h.update(serde_json::to_vec(&KeyMaterial {
            audio: &self.audio,
            mel: self.mel.config(),
            inventory: self.inventory.symbols(),
        })?);
        Ok(h.finalize().into())
    }

    fn load_waveform(&self, record: &UtteranceRecord, frames: usize) -> Result<Waveform> {
        let mut wave = load_audio(&record.audio, &self.audio)?;
        wave.fit_to(frames * self.mel.config().hop);
        Ok(wave)
    }

    /// Computes features from scratch.
    pub fn extract(&self, record: &UtteranceRecord, with_audio: bool) -> Result<TrainingExample> {
        let cfg = self.mel.config();
        let wave = load_audio(&record.audio, &self.audio)?;
        let mel = self.mel.compute(&wave)?;
        let tier = parse_alignment(&record.alignment, Some(&self.inventory))?;
        tier.check_span(wave.seconds(), cfg.hop as f64 / cfg.sample_rate as f64)?;
        let durations = durations_to_frames(&tier, cfg.hop, cfg.sample_rate, mel.n_frames())?;
        let phone_ids = self.inventory.ids(&tier.phones())?;
        let waveform = with_audio.then(|| {
            let mut w = wave;
            w.fit_to(mel.n_frames() * cfg.hop);
            w
        });
        Ok(TrainingExample {
            id: record.id.clone(),
            speaker: record.speaker.clone(),
            phone_ids,
            durations,
            mel,
            waveform,
        })
    }

    /// Like [`extract`](Self::extract) but reads and writes the cache in `cache_dir`.
    /// The flag is true on a cache hit.
    pub fn extract_cached(
        &self,
        record: &UtteranceRecord,
        cache_dir: &Path,
        with_audio: bool,
    ) -> Result<(TrainingExample, bool)> {
        let key = self.cache_key(record)?;
        let (mel_path, dur_path) = cache_paths(cache_dir, &record.id);
        if let (Ok(mel), Ok(dur)) = (FeatureArray::load(&mel_path), FeatureArray::load(&dur_path)) {
            if mel.key == key && dur.key == key {
                if let Some(example) = self.from_cache(record, mel, dur, with_audio)? {
                    return Ok((example, true));
                }
            }
        }
        let example = self.extract(record, with_audio)?;
        std::fs::create_dir_all(cache_dir)?;
        let cfg = self.mel.config();
        let header = |dims: Vec<usize>, data: FeatureData| FeatureArray {
            dims,
            data,
            hop: cfg.hop as u32,
            win: cfg.n_fft as u32,
            sample_rate: cfg.sample_rate,
            key,
        };
        header(
            vec![example.mel.n_frames(), example.mel.n_mels()],
            FeatureData::F32(example.mel.frames.iter().copied().collect()),
        )
        .save(&mel_path)?;
        let phone_ids: Vec<u32> = example.phone_ids.iter().map(|&p| p as u32).collect();
        let counts: Vec<u32> = example.durations.counts().iter().map(|&c| c as u32).collect();
        header(
            vec![2, counts.len()],
            FeatureData::U32(phone_ids.into_iter().chain(counts).collect()),
        )
        .save(&dur_path)?;
        Ok((example, false))
    }

    fn from_cache(
        &self,
        record: &UtteranceRecord,
        mel: FeatureArray,
        dur: FeatureArray,
        with_audio: bool,
    ) -> Result<Option<TrainingExample>> {
        let (FeatureData::F32(mel_data), FeatureData::U32(dur_data)) = (mel.data, dur.data) else {
            return Ok(None);
        };
        let [t, m] = mel.dims[..] else {
            return Ok(None);
        };
        let [2, l] = dur.dims[..] else {
            return Ok(None);
        };
        let frames = Array2::from_shape_vec((t, m), mel_data)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let phone_ids = dur_data[..l].iter().map(|&p| p as usize).collect();
        let durations = DurationFrames::new(dur_data[l..].iter().map(|&c| c as usize).collect())?;
        let waveform = if with_audio {
            Some(self.load_waveform(record, t)?)
        } else {
            None
        };
        Ok(Some(TrainingExample {
            id: record.id.clone(),
            speaker: record.speaker.clone(),
            phone_ids,
            durations,
            mel: MelSpectrogram {
                frames,
                hop: mel.hop as usize,
                win: mel.win as usize,
            },
            waveform,
        }))
    }
}

pub fn cache_paths(cache_dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    let stem = id.replace(['/', '\\'], "__");
    (
        cache_dir.join(format!("{stem}.mel")),
        cache_dir.join(format!("{stem}.dur")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureArray {
        FeatureArray {
            dims: vec![3, 2],
            data: FeatureData::F32(vec![0.0, 1.5, -2.0, 3.25, 4.0, -11.5]),
            hop: 256,
            win: 1024,
            sample_rate: 22050,
            key: [7; 32],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let f = sample();
        assert_eq!(FeatureArray::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                FeatureArray::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn ids_map_to_flat_file_names() {
        let (m, d) = cache_paths(Path::new("/c"), "spk/u01");
        assert_eq!(m, Path::new("/c/spk__u01.mel"));
        assert_eq!(d, Path::new("/c/spk__u01.dur"));
    }
}

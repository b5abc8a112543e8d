//! Corpus discovery and the JSON-lines manifest.
//!
//! Layout: `<corpus>/<speaker>/<utt>.wav`, `<utt>.txt` and `<utt>.align`. A speaker
//! directory may hold a `quality` file containing `low` to mark noisy recordings.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AUDIO_EXT: &str = "wav";
pub const TEXT_EXT: &str = "txt";
pub const ALIGN_EXT: &str = "align";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub text: String,
    pub audio: PathBuf,
    pub alignment: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    #[default]
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerInfo {
    pub name: String,
    pub index: usize,
    #[serde(default)]
    pub quality: Quality,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedUtterance {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub speakers: Vec<SpeakerInfo>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, speakers: Vec<SpeakerInfo>) -> Result<Self> {
        let mut ids = HashSet::new();
        let names: HashSet<&str> = speakers.iter().map(|s| s.name.as_str()).collect();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::ConfigInvalid(format!("duplicate utterance id {}", r.id)));
            }
            if !names.contains(r.speaker.as_str()) {
                return Err(Error::UnknownSpeaker(r.speaker.clone()));
            }
        }
        Ok(Self { records, speakers })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speaker(&self, name: &str) -> Option<&SpeakerInfo> {
        self.speakers.iter().find(|s| s.name == name)
    }

    /// Keeps the named speakers (and their records), re-indexing them densely.
    pub fn filter_speakers(&self, keep: impl Fn(&SpeakerInfo) -> bool) -> Manifest {
        let speakers: Vec<SpeakerInfo> = self
            .speakers
            .iter()
            .filter(|s| keep(s))
            .enumerate()
            .map(|(index, s)| SpeakerInfo {
                index,
                ..s.clone()
            })
            .collect();
        let names: HashSet<&str> = speakers.iter().map(|s| s.name.as_str()).collect();
        let records = self
            .records
            .iter()
            .filter(|r| names.contains(r.speaker.as_str()))
            .cloned()
            .collect();
        Manifest { records, speakers }
    }

    /// Writes `manifest.jsonl` and the `speakers.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for r in &self.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        std::fs::write(dir.join("manifest.jsonl"), lines)?;
        std::fs::write(
            dir.join("speakers.json"),
            serde_json::to_string_pretty(&self.speakers)?,
        )?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<UtteranceRecord>, _>>()?;
        let sidecar = manifest_path.with_file_name("speakers.json");
        let speakers: Vec<SpeakerInfo> = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        Self::new(records, speakers)
    }
}

fn read_quality(dir: &Path) -> Quality {
    match std::fs::read_to_string(dir.join("quality")) {
        Ok(s) if s.trim().eq_ignore_ascii_case("low") => Quality::Low,
        _ => Quality::High,
    }
}

/// Scans a corpus directory; utterances missing any of audio/text/alignment are skipped.
pub fn build_manifest(corpus_dir: &Path) -> Result<(Manifest, Vec<SkippedUtterance>)> {
    if !corpus_dir.is_dir() {
        return Err(Error::EmptyCorpus(corpus_dir.to_path_buf()));
    }
    let mut speaker_dirs: Vec<PathBuf> = std::fs::read_dir(corpus_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speaker_dirs.sort();

    let mut records = Vec::new();
    let mut speakers = Vec::new();
    let mut skipped = Vec::new();
    for dir in speaker_dirs {
        let Some(name) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        // stem -> extensions present
        let mut stems: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let (Some(stem), Some(ext)) = (
                path.file_stem().and_then(|s| s.to_str()),
                path.extension().and_then(|s| s.to_str()),
            ) else {
                continue;
            };
            if [AUDIO_EXT, TEXT_EXT, ALIGN_EXT].contains(&ext) {
                stems
                    .entry(stem.to_string())
                    .or_default()
                    .insert(ext.to_string());
            }
        }
        let mut count = 0;
        for (stem, exts) in stems {
            let id = format!("{name}/{stem}");
            let missing: Vec<&str> = [AUDIO_EXT, TEXT_EXT, ALIGN_EXT]
                .into_iter()
                .filter(|e| !exts.contains(*e))
                .collect();
            if !missing.is_empty() {
                skipped.push(SkippedUtterance {
                    id,
                    reason: format!("missing .{}", missing.join(", .")),
                });
                continue;
            }
            let text = std::fs::read_to_string(dir.join(format!("{stem}.{TEXT_EXT}")))?
                .trim()
                .to_string();
            records.push(UtteranceRecord {
                id,
                speaker: name.clone(),
                text,
                audio: dir.join(format!("{stem}.{AUDIO_EXT}")),
                alignment: dir.join(format!("{stem}.{ALIGN_EXT}")),
            });
            count += 1;
        }
        if count > 0 {
            speakers.push(SpeakerInfo {
                index: speakers.len(),
                quality: read_quality(&dir),
                name,
                utterances: count,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(corpus_dir.to_path_buf()));
    }
    Ok((Manifest::new(records, speakers)?, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, spk: &str, stem: &str, exts: &[&str]) {
        let d = dir.join(spk);
        std::fs::create_dir_all(&d).unwrap();
        for e in exts {
            std::fs::write(d.join(format!("{stem}.{e}")), "x").unwrap();
        }
    }

    #[test]
    fn counts_complete_triples() {
        let tmp = tempfile::tempdir().unwrap();
        for spk in ["alice", "bob"] {
            for u in 0..3 {
                touch(tmp.path(), spk, &format!("u{u}"), &["wav", "txt", "align"]);
            }
        }
        let (m, skipped) = build_manifest(tmp.path()).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.speakers.len(), 2);
        assert!(skipped.is_empty());
        assert_eq!(m.speaker("bob").unwrap().index, 1);
    }

    #[test]
    fn incomplete_utterance_is_skipped() {
        let tmp = tempfile::tempdir().unwrap();
        for spk in ["alice", "bob"] {
            for u in 0..3 {
                let exts: &[&str] = if spk == "bob" && u == 2 {
                    &["wav", "txt"]
                } else {
                    &["wav", "txt", "align"]
                };
                touch(tmp.path(), spk, &format!("u{u}"), exts);
            }
        }
        let (m, skipped) = build_manifest(tmp.path()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].id, "bob/u2");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_manifest(tmp.path()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn quality_marker_and_filtering() {
        let tmp = tempfile::tempdir().unwrap();
        touch(tmp.path(), "clean", "u0", &["wav", "txt", "align"]);
        touch(tmp.path(), "noisy", "u0", &["wav", "txt", "align"]);
        std::fs::write(tmp.path().join("noisy/quality"), "low\n").unwrap();
        let (m, _) = build_manifest(tmp.path()).unwrap();
        assert_eq!(m.speaker("noisy").unwrap().quality, Quality::Low);
        let hq = m.filter_speakers(|s| s.quality == Quality::High);
        assert_eq!(hq.len(), 1);
        assert_eq!(hq.speakers[0].name, "clean");
    }

    #[test]
    fn save_and_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        touch(tmp.path(), "alice", "u0", &["wav", "txt", "align"]);
        let (m, _) = build_manifest(tmp.path()).unwrap();
        let out = tmp.path().join("out");
        m.save(&out).unwrap();
        assert_eq!(Manifest::load(&out.join("manifest.jsonl")).unwrap(), m);
    }
}

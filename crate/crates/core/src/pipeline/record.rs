use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::error::{Error, Result};

pub const RUN_RECORD_FILE: &str = "run.json";

/// A per-item failure that did not abort the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub index: usize,
    pub item: String,
    pub category: String,
    pub message: String,
}

impl ItemError {
    pub fn new(index: usize, item: impl Into<String>, err: &Error) -> Self {
        Self {
            index,
            item: item.into(),
            category: err.category().as_str().to_string(),
            message: err.to_string(),
        }
    }
}

/// Written as `run.json` next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub started_at: f64,
    pub finished_at: f64,
    pub config_hash: String,
    pub seed: u64,
    /// Loss at the first step of each optimised model.
    pub initial_losses: BTreeMap<String, f64>,
    pub final_losses: BTreeMap<String, f64>,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub errors: Vec<ItemError>,
    /// Stage-specific facts, e.g. the adapted speaker or per-utterance frame counts.
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunRecord {
    pub fn start(stage: Stage, config_hash: String, seed: u64) -> Self {
        Self {
            stage,
            started_at: unix_now(),
            finished_at: 0.0,
            config_hash,
            seed,
            initial_losses: BTreeMap::new(),
            final_losses: BTreeMap::new(),
            loss_curves: BTreeMap::new(),
            artifacts: Vec::new(),
            errors: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn record_curve(&mut self, name: &str, curve: Vec<f64>) {
        if let (Some(&first), Some(&last)) = (curve.first(), curve.last()) {
            self.initial_losses.insert(name.to_string(), first);
            self.final_losses.insert(name.to_string(), last);
        }
        self.loss_curves.insert(name.to_string(), curve);
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(
            key.to_string(),
            serde_json::to_value(value).expect("detail serializes"),
        );
    }

    pub fn finish(&mut self) {
        self.finished_at = unix_now();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingCheckpoint(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut r = RunRecord::start(Stage::Synth, "abc".into(), 7);
        r.record_curve("acoustic", vec![2.0, 1.0, 0.5]);
        r.errors.push(ItemError::new(1, "q", &Error::EmptyText));
        r.detail("speaker", "target1");
        r.finish();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join(RUN_RECORD_FILE);
        r.save(&p).unwrap();
        let back = RunRecord::load(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.initial_losses["acoustic"], 2.0);
        assert_eq!(back.final_losses["acoustic"], 0.5);
        assert_eq!(back.errors[0].category, "frontend");
    }

    proptest::proptest! {
        #[test]
        fn floats_round_trip_exactly(t in proptest::num::f64::NORMAL, loss in proptest::num::f64::NORMAL) {
            let mut r = RunRecord::start(Stage::Train, "h".into(), 0);
            r.started_at = t.abs();
            r.record_curve("acoustic", vec![loss]);
            let back: RunRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            proptest::prop_assert_eq!(back, r);
        }
    }
}

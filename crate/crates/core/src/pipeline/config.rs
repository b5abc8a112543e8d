//! Run configuration: one TOML file with a section per stage. Any key can be
//! overridden with a dotted path, e.g. `adapt.acoustic_steps=0`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::AcousticConfig;
use crate::duration::DurationModelConfig;
use crate::error::{Error, Result};
use crate::frontend::{AudioConfig, MelConfig};
use crate::nn::Precision;
use crate::toy::LEXICON_FILE;
use crate::vocoder::VocoderConfig;

pub const CONFIG_ENV: &str = "VOXCLONE_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Adapt,
    Synth,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Adapt => "adapt",
            Stage::Synth => "synth",
        }
    }
}

/// Which stage-1 speakers to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusPolicy {
    #[default]
    HighQualityOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    /// Defaults to `<path>/lexicon.txt`.
    pub lexicon: Option<PathBuf>,
    pub policy: CorpusPolicy,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus"),
            lexicon: None,
            policy: CorpusPolicy::HighQualityOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationSection {
    pub embedding_dim: usize,
    pub recurrent_hidden: usize,
    pub learning_rate: f64,
    pub min_frames: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
}

impl Default for DurationSection {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            recurrent_hidden: 64,
            learning_rate: 3e-3,
            min_frames: 1,
            batch_size: 8,
            eval_every: 25,
            patience: 6,
            holdout_fraction: 0.1,
        }
    }
}

impl DurationSection {
    pub fn model_config(&self, vocab: usize) -> DurationModelConfig {
        DurationModelConfig {
            embedding_dim: self.embedding_dim,
            recurrent_hidden: self.recurrent_hidden,
            learning_rate: self.learning_rate,
            min_frames: self.min_frames,
            ..DurationModelConfig::new(vocab)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticSection {
    pub speaker_embedding_dim: usize,
    pub encoder_dim: usize,
    pub encoder_convs: usize,
    pub encoder_kernel: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub dropout_at_synthesis: bool,
    pub decoder_dim: usize,
    pub postnet_layers: usize,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for AcousticSection {
    fn default() -> Self {
        Self {
            speaker_embedding_dim: 16,
            encoder_dim: 64,
            encoder_convs: 3,
            encoder_kernel: 5,
            prenet_dims: vec![64, 64],
            prenet_dropout: 0.5,
            dropout_at_synthesis: true,
            decoder_dim: 128,
            postnet_layers: 5,
            postnet_dim: 64,
            postnet_kernel: 5,
            learning_rate: 2e-3,
            grad_clip: 1.0,
            batch_size: 8,
            precision: Precision::F32,
        }
    }
}

impl AcousticSection {
    pub fn model_config(&self, vocab: usize, speakers: usize) -> AcousticConfig {
        AcousticConfig {
            speaker_embedding_dim: self.speaker_embedding_dim,
            encoder_dim: self.encoder_dim,
            encoder_convs: self.encoder_convs,
            encoder_kernel: self.encoder_kernel,
            prenet_dims: self.prenet_dims.clone(),
            prenet_dropout: self.prenet_dropout,
            dropout_at_synthesis: self.dropout_at_synthesis,
            decoder_dim: self.decoder_dim,
            postnet_layers: self.postnet_layers,
            postnet_dim: self.postnet_dim,
            postnet_kernel: self.postnet_kernel,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            precision: self.precision,
            ..AcousticConfig::new(vocab, speakers)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub duration_steps: usize,
    pub acoustic_steps: usize,
    pub vocoder_steps: usize,
    /// Directory with a pretrained `generator.ckpt` and `discriminators.ckpt`; when set,
    /// the vocoder starts from these weights (and `vocoder_steps` may be 0).
    pub vocoder_init: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            duration_steps: 400,
            acoustic_steps: 1500,
            vocoder_steps: 1000,
            vocoder_init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    /// Corpus holding the target speaker's utterances.
    pub corpus: PathBuf,
    /// Target speaker; may be empty when the corpus holds a single speaker.
    pub speaker: String,
    pub acoustic_steps: usize,
    pub vocoder_steps: usize,
    pub acoustic_batch_size: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("target"),
            speaker: String::new(),
            acoustic_steps: 3000,
            vocoder_steps: 3000,
            acoustic_batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// One prompt per non-empty line.
    pub text_file: Option<PathBuf>,
    pub texts: Vec<String>,
    /// Defaults to the adapted target speaker.
    pub speaker: Option<String>,
    /// Synthesise from the stage-1 checkpoints (baseline) instead of stage 2.
    pub use_stage1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Emit a progress line every this many optimisation steps.
    pub log_every: usize,
    pub audio: AudioConfig,
    pub mel: MelConfig,
    pub corpus: CorpusSection,
    pub duration: DurationSection,
    pub acoustic: AcousticSection,
    pub vocoder: VocoderConfig,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub synth: SynthSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_every: 50,
            audio: AudioConfig::default(),
            mel: MelConfig::default(),
            corpus: CorpusSection::default(),
            duration: DurationSection::default(),
            acoustic: AcousticSection::default(),
            vocoder: VocoderConfig::desk(),
            train: TrainSection::default(),
            adapt: AdaptSection::default(),
            synth: SynthSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dotted path) in `doc`; `raw` is parsed as a TOML value, falling back to a
/// plain string.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::ConfigInvalid(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::ConfigInvalid(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses `text` on top of the defaults, so a file only needs the keys it changes.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        let mut doc = toml::Table::try_from(Self::default())
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        merge(&mut doc, user);
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))
    }

    /// Reads `path`, resolving relative paths in the file against its directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.corpus.path);
        if let Some(l) = self.corpus.lexicon.as_mut() {
            fix(l);
        }
        if let Some(v) = self.train.vocoder_init.as_mut() {
            fix(v);
        }
        fix(&mut self.adapt.corpus);
        if let Some(t) = self.synth.text_file.as_mut() {
            fix(t);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn lexicon_path(&self) -> PathBuf {
        self.corpus
            .lexicon
            .clone()
            .unwrap_or_else(|| self.corpus.path.join(LEXICON_FILE))
    }

    /// Checks the parts of the configuration `stage` depends on.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        self.vocoder.validate(self.mel.hop)?;
        self.duration.model_config(1).validate()?;
        self.acoustic.model_config(1, 1).validate()?;
        if self.mel.n_mels != crate::frontend::N_MELS {
            return Err(Error::ConfigInvalid("mel.n_mels must be 80".into()));
        }
        if self.log_every == 0 {
            return Err(Error::ConfigInvalid("log_every must be positive".into()));
        }
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::ConfigInvalid(format!("{what} {} does not exist", p.display())))
            }
        };
        match stage {
            Stage::Train => {
                must_exist(&self.corpus.path, "corpus")?;
                must_exist(&self.lexicon_path(), "lexicon")?;
                if let Some(v) = &self.train.vocoder_init {
                    must_exist(v, "vocoder_init")?;
                }
            }
            Stage::Adapt => must_exist(&self.adapt.corpus, "target corpus")?,
            Stage::Synth => {
                if let Some(t) = &self.synth.text_file {
                    must_exist(t, "text file")?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding of the stage and resolved configuration.
    pub fn hash(&self, stage: Stage) -> String {
        let value = serde_json::json!({ "stage": stage, "config": self });
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let text = "seed = 3\n[adapt]\nacoustic_steps = 10\n";
        let over = vec![
            ("adapt.acoustic_steps".to_string(), "0".to_string()),
            ("adapt.speaker".to_string(), "target1".to_string()),
            ("acoustic.prenet_dims".to_string(), "[8, 8]".to_string()),
        ];
        let cfg = PipelineConfig::from_toml(text, &over).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.adapt.acoustic_steps, 0);
        assert_eq!(cfg.adapt.speaker, "target1");
        assert_eq!(cfg.acoustic.prenet_dims, [8, 8]);
    }

    #[test]
    fn partial_sections_keep_pipeline_defaults() {
        let cfg = PipelineConfig::from_toml("[vocoder]\ninitial_channels = 16\n", &[]).unwrap();
        assert_eq!(cfg.vocoder.initial_channels, 16);
        assert_eq!(cfg.vocoder.resblock_kernels, VocoderConfig::desk().resblock_kernels);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[adapt]\nstepz = 1\n", &[]).is_err());
        let over = vec![("nope".to_string(), "1".to_string())];
        assert!(PipelineConfig::from_toml("", &over).is_err());
        assert!(PipelineConfig::from_toml("[vocoder]\nchannels = 3\n", &[]).is_err());
        assert!(PipelineConfig::from_toml("[mel]\nhops = 3\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(Stage::Train), cfg.hash(Stage::Train));
        assert_ne!(cfg.hash(Stage::Train), cfg.hash(Stage::Adapt));
    }

    #[test]
    fn missing_corpus_is_a_config_error() {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.path = PathBuf::from("/definitely/not/here");
        assert!(matches!(cfg.validate(Stage::Train), Err(Error::ConfigInvalid(_))));
    }
}

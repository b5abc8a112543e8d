//! The three-stage voice-cloning workflow: multi-speaker training, target-speaker
//! adaptation and synthesis. Every stage writes into its own subdirectory of
//! `out_dir` and leaves a [`RunRecord`] behind.

pub mod config;
pub mod lock;
pub mod record;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{
    adapt_acoustic, train_acoustic, AcousticExample, AcousticModel, AcousticTrainConfig,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, LoadOptions};
use crate::duration::{train_duration_model, DurationModel, DurationTrainConfig};
use crate::error::{Error, Result};
use crate::frontend::{
    build_manifest, text_to_phones, write_wav, FeaturePipeline, Lexicon, Manifest, Quality,
    SkippedUtterance, TrainingExample,
};
use crate::vocoder::{adapt_vocoder, train_vocoder, Discriminators, Generator, VocoderPair};

pub use config::{CorpusPolicy, PipelineConfig, Stage, CONFIG_ENV};
pub use lock::{RunLock, LOCK_FILE};
pub use record::{ItemError, RunRecord, RUN_RECORD_FILE};

pub const MANIFEST_DIR: &str = "manifest";
pub const CACHE_DIR: &str = "cache";
pub const LEXICON_COPY: &str = "lexicon.txt";
pub const DURATION_CKPT: &str = "duration.ckpt";
pub const ACOUSTIC_CKPT: &str = "acoustic.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISCRIMINATORS_CKPT: &str = "discriminators.ckpt";

pub fn stage_dir(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(match stage {
        Stage::Train => "stage1",
        Stage::Adapt => "stage2",
        Stage::Synth => "stage3",
    })
}

/// Progress notifications; the CLI renders them as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    Step {
        stage: Stage,
        model: &'static str,
        step: usize,
        loss: f64,
    },
    Note {
        stage: Stage,
        key: &'static str,
        value: String,
    },
}

pub type ProgressFn<'a> = dyn FnMut(&Progress) + 'a;

fn note(progress: &mut ProgressFn, stage: Stage, key: &'static str, value: impl ToString) {
    progress(&Progress::Note {
        stage,
        key,
        value: value.to_string(),
    });
}

/// Forwards every `every`-th step (and the first) to `progress` and keeps the curve.
struct StepLog<'p, 'a> {
    stage: Stage,
    model: &'static str,
    every: usize,
    progress: &'p mut ProgressFn<'a>,
    curve: Vec<f64>,
}

impl<'p, 'a> StepLog<'p, 'a> {
    fn new(stage: Stage, model: &'static str, every: usize, progress: &'p mut ProgressFn<'a>) -> Self {
        Self {
            stage,
            model,
            every,
            progress,
            curve: Vec::new(),
        }
    }

    fn push(&mut self, step: usize, loss: f64) {
        self.curve.push(loss);
        if step % self.every == 0 {
            (self.progress)(&Progress::Step {
                stage: self.stage,
                model: self.model,
                step,
                loss,
            });
        }
    }
}

/// Examples extracted from one corpus.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub manifest: Manifest,
    pub examples: Vec<TrainingExample>,
    pub skipped: Vec<SkippedUtterance>,
    pub cache_hits: usize,
}

impl LoadedCorpus {
    pub fn total_frames(&self) -> usize {
        self.examples.iter().map(|e| e.n_frames()).sum()
    }
}

/// Extracts (or loads cached) features for every record; failing utterances are
/// skipped and listed rather than aborting the run.
pub fn load_corpus(
    manifest: Manifest,
    mut skipped: Vec<SkippedUtterance>,
    features: &FeaturePipeline,
    cache_dir: &Path,
    with_audio: bool,
) -> Result<LoadedCorpus> {
    let mut examples = Vec::new();
    let mut cache_hits = 0;
    for record in &manifest.records {
        match features.extract_cached(record, cache_dir, with_audio) {
            Ok((ex, hit)) => {
                cache_hits += usize::from(hit);
                examples.push(ex);
            }
            Err(e) => skipped.push(SkippedUtterance {
                id: record.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(LoadedCorpus {
        manifest,
        examples,
        skipped,
        cache_hits,
    })
}

fn feature_pipeline(cfg: &PipelineConfig, lexicon: &Lexicon) -> FeaturePipeline {
    FeaturePipeline::new(cfg.audio, cfg.mel.clone(), lexicon.inventory().clone())
}

fn load_lexicon(path: &Path) -> Result<Lexicon> {
    if !path.exists() {
        return Err(Error::ConfigInvalid(format!("lexicon {} does not exist", path.display())));
    }
    Lexicon::load(path)
}

/// Summary of a `prepare` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub kept: usize,
    pub skipped: Vec<SkippedUtterance>,
    pub speakers: usize,
    pub total_frames: usize,
    pub cache_hits: usize,
}

/// Scans the training corpus, writes the manifest and fills the feature cache.
pub fn prepare(cfg: &PipelineConfig) -> Result<PrepareSummary> {
    cfg.validate(Stage::Train)?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let lexicon = load_lexicon(&cfg.lexicon_path())?;
    let (manifest, skipped) = build_manifest(&cfg.corpus.path)?;
    let corpus = load_corpus(
        manifest,
        skipped,
        &feature_pipeline(cfg, &lexicon),
        &cfg.out_dir.join(CACHE_DIR),
        false,
    )?;
    let kept_ids: std::collections::HashSet<&str> =
        corpus.examples.iter().map(|e| e.id.as_str()).collect();
    let kept_records = corpus
        .manifest
        .records
        .iter()
        .filter(|r| kept_ids.contains(r.id.as_str()))
        .cloned()
        .collect();
    Manifest::new(kept_records, corpus.manifest.speakers.clone())?
        .save(&cfg.out_dir.join(MANIFEST_DIR))?;
    Ok(PrepareSummary {
        kept: corpus.examples.len(),
        skipped: corpus.skipped.clone(),
        speakers: corpus.manifest.speakers.len(),
        total_frames: corpus.total_frames(),
        cache_hits: corpus.cache_hits,
    })
}

fn stage1_training_corpus(cfg: &PipelineConfig, lexicon: &Lexicon) -> Result<LoadedCorpus> {
    let (manifest, skipped) = build_manifest(&cfg.corpus.path)?;
    let manifest = match cfg.corpus.policy {
        CorpusPolicy::HighQualityOnly => manifest.filter_speakers(|s| s.quality == Quality::High),
        CorpusPolicy::All => manifest,
    };
    let corpus = load_corpus(
        manifest,
        skipped,
        &feature_pipeline(cfg, lexicon),
        &cfg.out_dir.join(CACHE_DIR),
        true,
    )?;
    if corpus.examples.is_empty() {
        return Err(Error::EmptyCorpus(cfg.corpus.path.clone()));
    }
    Ok(corpus)
}

fn acoustic_examples(
    examples: &[TrainingExample],
    speaker_of: impl Fn(&str) -> Option<usize>,
) -> Vec<AcousticExample> {
    examples
        .iter()
        .filter_map(|e| {
            Some(AcousticExample {
                phone_ids: e.phone_ids.clone(),
                durations: e.durations.clone(),
                speaker: speaker_of(&e.speaker)?,
                mel: e.mel.clone(),
            })
        })
        .collect()
}

fn vocoder_pairs(examples: &[TrainingExample]) -> Vec<VocoderPair> {
    examples
        .iter()
        .filter_map(|e| {
            Some(VocoderPair {
                waveform: e.waveform.clone()?,
                mel: e.mel.clone(),
            })
        })
        .collect()
}

fn artifact(out_dir: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(out_dir).unwrap_or(path).to_path_buf()
}

/// Stage 1: trains the duration model, the multi-speaker acoustic model and the
/// vocoder on the (policy-filtered) training corpus.
pub fn run_stage1_train(cfg: &PipelineConfig, progress: &mut ProgressFn) -> Result<RunRecord> {
    let stage = Stage::Train;
    cfg.validate(stage)?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let mut record = RunRecord::start(stage, cfg.hash(stage), cfg.seed);
    note(progress, stage, "config_hash", &record.config_hash);

    let lexicon = load_lexicon(&cfg.lexicon_path())?;
    let corpus = stage1_training_corpus(cfg, &lexicon)?;
    let speakers: Vec<String> = corpus.manifest.speakers.iter().map(|s| s.name.clone()).collect();
    note(progress, stage, "utterances", corpus.examples.len());
    note(progress, stage, "speakers", speakers.len());
    note(progress, stage, "cache_hits", corpus.cache_hits);
    for (i, s) in corpus.skipped.iter().enumerate() {
        record.errors.push(ItemError {
            index: i,
            item: s.id.clone(),
            category: "corpus".into(),
            message: s.reason.clone(),
        });
    }
    record.detail("speakers", &speakers);
    record.detail("utterances", corpus.examples.len());
    record.detail("total_frames", corpus.total_frames());

    let dir = stage_dir(&cfg.out_dir, stage);
    std::fs::create_dir_all(&dir)?;
    let vocab = lexicon.inventory().len();

    let mut duration = DurationModel::new(cfg.duration.model_config(vocab), cfg.seed)?;
    let pairs: Vec<_> = corpus
        .examples
        .iter()
        .map(|e| (e.phone_ids.clone(), e.durations.clone()))
        .collect();
    let dcfg = DurationTrainConfig {
        steps: cfg.train.duration_steps,
        batch_size: cfg.duration.batch_size,
        eval_every: cfg.duration.eval_every,
        patience: cfg.duration.patience,
        holdout_fraction: cfg.duration.holdout_fraction,
        seed: cfg.seed,
    };
    let mut log = StepLog::new(stage, "duration", cfg.log_every, progress);
    let dreport = train_duration_model(&mut duration, &pairs, &dcfg, &mut |s, l| log.push(s, l))?;
    record.record_curve("duration", log.curve);
    record.detail("duration_early_stopped", dreport.early_stopped);

    let acfg = cfg.acoustic.model_config(vocab, speakers.len());
    let mut acoustic = AcousticModel::new(acfg, speakers.clone(), cfg.seed.wrapping_add(1))?;
    let examples = acoustic_examples(&corpus.examples, |s| speakers.iter().position(|x| x == s));
    let tcfg = AcousticTrainConfig {
        steps: cfg.train.acoustic_steps,
        batch_size: cfg.acoustic.batch_size,
        seed: cfg.seed,
    };
    let mut log = StepLog::new(stage, "acoustic", cfg.log_every, progress);
    train_acoustic(&mut acoustic, &examples, &tcfg, &mut |s, l| log.push(s, l))?;
    record.record_curve("acoustic", log.curve);

    let (generator, discriminators, vocoder_start) = match &cfg.train.vocoder_init {
        Some(init) => {
            let opts = LoadOptions::default();
            let (g, header) = load_checkpoint::<Generator>(&init.join(GENERATOR_CKPT), &opts)?;
            let (d, _) = load_checkpoint::<Discriminators>(&init.join(DISCRIMINATORS_CKPT), &opts)?;
            if g.config().hop() != cfg.mel.hop {
                return Err(Error::ConfigInvalid(format!(
                    "imported generator upsamples by {} but mel.hop is {}",
                    g.config().hop(),
                    cfg.mel.hop
                )));
            }
            note(progress, stage, "vocoder_init", init.display());
            (g, d, header.step)
        }
        None => (
            Generator::new(cfg.vocoder.clone(), cfg.seed.wrapping_add(2))?,
            Discriminators::new(cfg.vocoder.clone(), cfg.seed.wrapping_add(3))?,
            0,
        ),
    };
    let vpairs = vocoder_pairs(&corpus.examples);
    let (gen_curve, disc_curve) = {
        let mut glog = StepLog::new(stage, "generator", cfg.log_every, progress);
        let mut dcurve = Vec::new();
        train_vocoder(
            &generator,
            &discriminators,
            &vpairs,
            cfg.train.vocoder_steps,
            &cfg.mel,
            cfg.seed,
            &mut |s, r| {
                glog.push(s, r.generator_total);
                dcurve.push(r.discriminator);
            },
        )?;
        (glog.curve, dcurve)
    };
    record.record_curve("generator", gen_curve);
    record.record_curve("discriminators", disc_curve);

    let save = |name: &str| dir.join(name);
    save_checkpoint(&duration, dreport.steps_run as u64, &save(DURATION_CKPT))?;
    save_checkpoint(&acoustic, cfg.train.acoustic_steps as u64, &save(ACOUSTIC_CKPT))?;
    let vocoder_step = vocoder_start + cfg.train.vocoder_steps as u64;
    save_checkpoint(&generator, vocoder_step, &save(GENERATOR_CKPT))?;
    save_checkpoint(&discriminators, vocoder_step, &save(DISCRIMINATORS_CKPT))?;
    std::fs::write(save(LEXICON_COPY), lexicon.to_text())?;
    for name in [DURATION_CKPT, ACOUSTIC_CKPT, GENERATOR_CKPT, DISCRIMINATORS_CKPT, LEXICON_COPY] {
        record.artifacts.push(artifact(&cfg.out_dir, &save(name)));
    }
    record.finish();
    record.save(&dir.join(RUN_RECORD_FILE))?;
    Ok(record)
}

fn require_stage(out_dir: &Path, stage: Stage) -> Result<RunRecord> {
    RunRecord::load(&stage_dir(out_dir, stage).join(RUN_RECORD_FILE))
}

/// Mean per-utterance loss on `examples` using `speaker`'s row, or the mean row when
/// the model has none for it yet.
pub fn speaker_loss(model: &AcousticModel, speaker: &str, examples: &[AcousticExample]) -> Result<f64> {
    let model = match model.speaker_index(speaker) {
        Some(_) => model.try_clone()?,
        None => model.with_new_speaker(speaker)?,
    };
    let index = model.speaker_index(speaker).expect("row ensured");
    let relabelled: Vec<AcousticExample> = examples
        .iter()
        .map(|e| AcousticExample {
            speaker: index,
            ..e.clone()
        })
        .collect();
    model.evaluate(&relabelled)
}

fn target_corpus(cfg: &PipelineConfig, lexicon: &Lexicon) -> Result<(String, LoadedCorpus)> {
    let (manifest, skipped) = match build_manifest(&cfg.adapt.corpus) {
        Err(Error::EmptyCorpus(_)) => return Err(Error::EmptyTargetCorpus),
        other => other?,
    };
    let speaker = if cfg.adapt.speaker.is_empty() {
        match manifest.speakers.as_slice() {
            [only] => only.name.clone(),
            _ => {
                return Err(Error::ConfigInvalid(
                    "adapt.speaker must be set when the target corpus has several speakers".into(),
                ))
            }
        }
    } else {
        cfg.adapt.speaker.clone()
    };
    if manifest.speaker(&speaker).is_none() {
        return Err(Error::UnknownSpeaker(speaker));
    }
    let manifest = manifest.filter_speakers(|s| s.name == speaker);
    let corpus = load_corpus(
        manifest,
        skipped,
        &feature_pipeline(cfg, lexicon),
        &cfg.out_dir.join(CACHE_DIR),
        true,
    )?;
    if corpus.examples.is_empty() {
        return Err(Error::EmptyTargetCorpus);
    }
    Ok((speaker, corpus))
}

/// Stage 2: fine-tunes the acoustic model on the target speaker, regenerates
/// teacher-forced mels with the adapted model and fine-tunes the vocoder on them.
/// Stage-1 artifacts are only read.
pub fn run_stage2_adapt(cfg: &PipelineConfig, progress: &mut ProgressFn) -> Result<RunRecord> {
    let stage = Stage::Adapt;
    cfg.validate(stage)?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    require_stage(&cfg.out_dir, Stage::Train)?;
    let mut record = RunRecord::start(stage, cfg.hash(stage), cfg.seed);
    note(progress, stage, "config_hash", &record.config_hash);

    let s1 = stage_dir(&cfg.out_dir, Stage::Train);
    let opts = LoadOptions::default();
    let (acoustic, a_header) = load_checkpoint::<AcousticModel>(&s1.join(ACOUSTIC_CKPT), &opts)?;
    let (generator, g_header) = load_checkpoint::<Generator>(&s1.join(GENERATOR_CKPT), &opts)?;
    let (discriminators, d_header) =
        load_checkpoint::<Discriminators>(&s1.join(DISCRIMINATORS_CKPT), &opts)?;
    if !s1.join(DURATION_CKPT).exists() {
        return Err(Error::MissingCheckpoint(s1.join(DURATION_CKPT)));
    }
    let lexicon = load_lexicon(&s1.join(LEXICON_COPY))?;

    let (speaker, corpus) = target_corpus(cfg, &lexicon)?;
    note(progress, stage, "speaker", &speaker);
    note(progress, stage, "utterances", corpus.examples.len());
    record.detail("speaker", &speaker);
    record.detail("utterances", corpus.examples.len());
    let target = acoustic_examples(&corpus.examples, |_| Some(0));

    let before = speaker_loss(&acoustic, &speaker, &target)?;
    note(progress, stage, "pre_adaptation_loss", format!("{before:.6}"));
    let tcfg = AcousticTrainConfig {
        steps: cfg.adapt.acoustic_steps,
        batch_size: cfg.adapt.acoustic_batch_size,
        seed: cfg.seed,
    };
    let mut log = StepLog::new(stage, "acoustic", cfg.log_every, progress);
    let (adapted, _) = adapt_acoustic(&acoustic, &speaker, &target, &tcfg, &mut |s, l| log.push(s, l))?;
    record.record_curve("acoustic", log.curve);
    let after = speaker_loss(&adapted, &speaker, &target)?;
    note(progress, stage, "adapted_loss", format!("{after:.6}"));
    record.detail("pre_adaptation_loss", before);
    record.detail("adapted_loss", after);

    // the vocoder adapts to what the adapted acoustic model actually produces
    let tf_model = match adapted.speaker_index(&speaker) {
        Some(_) => adapted.try_clone()?,
        None => adapted.with_new_speaker(&speaker)?,
    };
    let index = tf_model.speaker_index(&speaker).expect("row ensured");
    let relabelled: Vec<AcousticExample> = target
        .iter()
        .map(|e| AcousticExample {
            speaker: index,
            ..e.clone()
        })
        .collect();
    let tf_mels = tf_model.teacher_forced_mels(&relabelled)?;
    let vpairs: Vec<VocoderPair> = corpus
        .examples
        .iter()
        .zip(tf_mels)
        .filter_map(|(e, mel)| {
            Some(VocoderPair {
                waveform: e.waveform.clone()?,
                mel,
            })
        })
        .collect();
    let (gen, disc, gen_curve, disc_curve) = {
        let mut glog = StepLog::new(stage, "generator", cfg.log_every, progress);
        let mut dcurve = Vec::new();
        let (g, d, _) = adapt_vocoder(
            &generator,
            &discriminators,
            &vpairs,
            cfg.adapt.vocoder_steps,
            &cfg.mel,
            cfg.seed,
            &mut |s, r| {
                glog.push(s, r.generator_total);
                dcurve.push(r.discriminator);
            },
        )?;
        (g, d, glog.curve, dcurve)
    };
    record.record_curve("generator", gen_curve);
    record.record_curve("discriminators", disc_curve);

    let dir = stage_dir(&cfg.out_dir, stage);
    std::fs::create_dir_all(&dir)?;
    let a_steps = cfg.adapt.acoustic_steps as u64;
    let v_steps = cfg.adapt.vocoder_steps as u64;
    save_checkpoint(&adapted, a_header.step + a_steps, &dir.join(ACOUSTIC_CKPT))?;
    save_checkpoint(&gen, g_header.step + v_steps, &dir.join(GENERATOR_CKPT))?;
    save_checkpoint(&disc, d_header.step + v_steps, &dir.join(DISCRIMINATORS_CKPT))?;
    // the duration model is frozen after stage 1; carry it over byte for byte
    std::fs::copy(s1.join(DURATION_CKPT), dir.join(DURATION_CKPT))?;
    std::fs::copy(s1.join(LEXICON_COPY), dir.join(LEXICON_COPY))?;
    for name in [DURATION_CKPT, ACOUSTIC_CKPT, GENERATOR_CKPT, DISCRIMINATORS_CKPT, LEXICON_COPY] {
        record.artifacts.push(artifact(&cfg.out_dir, &dir.join(name)));
    }
    record.finish();
    record.save(&dir.join(RUN_RECORD_FILE))?;
    Ok(record)
}

/// Outcome for one synthesised text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedUtterance {
    pub index: usize,
    pub text: String,
    pub wav: PathBuf,
    pub phones: Vec<String>,
    pub durations: Vec<usize>,
    pub frames: usize,
    pub samples: usize,
}

/// The models stage 3 needs, loaded from one stage directory.
pub struct Synthesizer {
    pub lexicon: Lexicon,
    pub duration: DurationModel,
    pub acoustic: AcousticModel,
    pub generator: Generator,
}

impl Synthesizer {
    pub fn load(dir: &Path) -> Result<Self> {
        let opts = LoadOptions::default();
        Ok(Self {
            lexicon: load_lexicon(&dir.join(LEXICON_COPY))?,
            duration: load_checkpoint(&dir.join(DURATION_CKPT), &opts)?.0,
            acoustic: load_checkpoint(&dir.join(ACOUSTIC_CKPT), &opts)?.0,
            generator: load_checkpoint(&dir.join(GENERATOR_CKPT), &opts)?.0,
        })
    }

    /// Text to waveform for one prompt. `speaker` without a row of its own uses the mean
    /// row, which is where adaptation would have started from.
    pub fn synthesize(
        &self,
        text: &str,
        speaker: &str,
        seed: u64,
    ) -> Result<(crate::frontend::Waveform, SynthesizedUtterance)> {
        let phones = text_to_phones(text, &self.lexicon, Default::default())?;
        let ids = self.lexicon.inventory().ids(&phones)?;
        let durations = self.duration.predict_durations(&ids)?;
        let spk = self.acoustic.speaker_vector_for(speaker)?;
        let expanded = self.acoustic.expand(&ids, &durations, &spk)?;
        let mel = self.acoustic.autoregressive_synthesize(&expanded, seed)?;
        let wave = self.generator.generate_waveform(&mel)?;
        let info = SynthesizedUtterance {
            index: 0,
            text: text.to_string(),
            wav: PathBuf::new(),
            phones: phones.symbols().iter().map(|s| s.to_string()).collect(),
            durations: durations.counts().to_vec(),
            frames: durations.total(),
            samples: wave.len(),
        };
        Ok((wave, info))
    }
}

fn synth_texts(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let mut texts = cfg.synth.texts.clone();
    if let Some(path) = &cfg.synth.text_file {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        texts.extend(body.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    Ok(texts)
}

/// Stage 3: one WAV per text, in input order. A text that fails (e.g. an unknown
/// grapheme) is recorded in the run record and the batch continues.
pub fn run_stage3_synthesize(cfg: &PipelineConfig, progress: &mut ProgressFn) -> Result<RunRecord> {
    let stage = Stage::Synth;
    cfg.validate(stage)?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let source = if cfg.synth.use_stage1 { Stage::Train } else { Stage::Adapt };
    let source_record = require_stage(&cfg.out_dir, source)?;
    let mut record = RunRecord::start(stage, cfg.hash(stage), cfg.seed);
    note(progress, stage, "config_hash", &record.config_hash);
    note(progress, stage, "models", source.as_str());

    let synth = Synthesizer::load(&stage_dir(&cfg.out_dir, source))?;
    let adapted_speaker = source_record
        .details
        .get("speaker")
        .and_then(|v| v.as_str())
        .map(String::from);
    let speaker = match (&cfg.synth.speaker, &adapted_speaker) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => synth.acoustic.speakers()[0].clone(),
    };
    let known = synth.acoustic.speaker_index(&speaker).is_some()
        || Some(&speaker) == adapted_speaker.as_ref()
        || (cfg.synth.use_stage1 && speaker == cfg.adapt.speaker);
    if !known {
        return Err(Error::UnknownSpeaker(speaker));
    }
    record.detail("speaker", &speaker);
    record.detail("models", source.as_str());

    let texts = synth_texts(cfg)?;
    let dir = stage_dir(&cfg.out_dir, stage);
    std::fs::create_dir_all(&dir)?;
    let mut done = Vec::new();
    for (index, text) in texts.iter().enumerate() {
        match synth.synthesize(text, &speaker, cfg.seed.wrapping_add(index as u64)) {
            Ok((wave, mut info)) => {
                let path = dir.join(format!("{index:04}.wav"));
                write_wav(&path, &wave)?;
                info.index = index;
                info.wav = artifact(&cfg.out_dir, &path);
                note(progress, stage, "wrote", info.wav.display());
                record.artifacts.push(info.wav.clone());
                done.push(info);
            }
            Err(e) => {
                note(progress, stage, "failed", format!("{index} {e}"));
                record.errors.push(ItemError::new(index, text.clone(), &e));
            }
        }
    }
    record.detail("texts", texts.len());
    record.detail("utterances", &done);
    record.finish();
    record.save(&dir.join(RUN_RECORD_FILE))?;
    Ok(record)
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage, progress: &mut ProgressFn) -> Result<RunRecord> {
    match stage {
        Stage::Train => run_stage1_train(cfg, progress),
        Stage::Adapt => run_stage2_adapt(cfg, progress),
        Stage::Synth => run_stage3_synthesize(cfg, progress),
    }
}

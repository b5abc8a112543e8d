use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use voxclone::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use voxclone::frontend::{FeatureArray, Manifest};
use voxclone::pipeline::{
    self, PipelineConfig, Progress, RunRecord, Stage, CONFIG_ENV, MANIFEST_DIR,
};
use voxclone::{Error, ErrorCategory};

/// Few-shot voice cloning: prepare a corpus, train, adapt to a new speaker, synthesize.
#[derive(Parser, Debug)]
#[command(name = "voxclone", version)]
struct Cli {
    /// TOML configuration; defaults to $VOXCLONE_CONFIG.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Output directory (`out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Random seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set acoustic.decoder_dim=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a corpus, write the manifest and fill the feature cache.
    Prepare {
        /// Training corpus directory (`corpus.path`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the duration, acoustic and vocoder models.
    Train {
        /// Training corpus directory (`corpus.path`).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `train.duration_steps`.
        #[arg(long)]
        duration_steps: Option<usize>,
        /// `train.acoustic_steps`.
        #[arg(long)]
        acoustic_steps: Option<usize>,
        /// `train.vocoder_steps`.
        #[arg(long)]
        vocoder_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: adapt the stage-1 models to a target speaker.
    Adapt {
        /// Target speaker corpus (`adapt.corpus`).
        #[arg(long)]
        target_corpus: Option<PathBuf>,
        /// Target speaker id (`adapt.speaker`).
        #[arg(long)]
        speaker: Option<String>,
        /// `adapt.acoustic_steps`.
        #[arg(long)]
        acoustic_steps: Option<usize>,
        /// `adapt.vocoder_steps`.
        #[arg(long)]
        vocoder_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 3: synthesize one WAV per line of a text file.
    Synth {
        /// One prompt per line (`synth.text_file`).
        #[arg(long)]
        text_file: Option<PathBuf>,
        /// A prompt; may be repeated.
        #[arg(long)]
        text: Vec<String>,
        /// Voice to use (`synth.speaker`); defaults to the adapted speaker.
        #[arg(long)]
        speaker: Option<String>,
        /// Use the stage-1 models (unadapted baseline).
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Describe a checkpoint, manifest, feature file or run record.
    Inspect { path: PathBuf },
}

fn kv(key: &str, value: impl std::fmt::Display) -> String {
    let v = value.to_string();
    if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
        format!("{key}={v:?}")
    } else {
        format!("{key}={v}")
    }
}

fn print_progress(p: &Progress) {
    match p {
        Progress::Step {
            stage,
            model,
            step,
            loss,
        } => println!(
            "{} {} {} {}",
            kv("stage", stage.as_str()),
            kv("model", model),
            kv("step", step),
            kv("loss", format!("{loss:.6}"))
        ),
        Progress::Note { stage, key, value } => {
            println!("{} {}", kv("stage", stage.as_str()), kv(key, value))
        }
    }
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Error> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::ConfigInvalid(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Debug for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Loads the config file; flags are applied as overrides on top of the file and
/// `--set` pairs, so they always win.
fn load_config(
    path: Option<&Path>,
    common: &Common,
    mut flags: Vec<(String, String)>,
) -> anyhow::Result<PipelineConfig> {
    let path = path.ok_or_else(|| {
        UsageError(format!("no configuration given; pass --config or set {CONFIG_ENV}"))
    })?;
    if !path.is_file() {
        return Err(UsageError(format!("configuration file {} not found", path.display())).into());
    }
    let mut overrides = parse_sets(&common.set)?;
    if let Some(seed) = common.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(flags);
    let mut cfg = PipelineConfig::load(path, &overrides)?;
    if let Some(out) = &common.out_dir {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn string_flag(key: &str, value: &str) -> (String, String) {
    // quoted so the override parser never reinterprets it
    (key.to_string(), format!("{value:?}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    let mut progress = print_progress;
    match cli.command {
        Command::Prepare { corpus, common } => {
            let mut cfg = load_config(config, &common, vec![])?;
            if let Some(c) = corpus {
                cfg.corpus.path = c;
            }
            let summary = pipeline::prepare(&cfg)?;
            for s in &summary.skipped {
                println!("{} {}", kv("skipped_utterance", &s.id), kv("reason", &s.reason));
            }
            println!(
                "{} {} {} {} {}",
                kv("kept", summary.kept),
                kv("skipped", summary.skipped.len()),
                kv("speakers", summary.speakers),
                kv("total_frames", summary.total_frames),
                kv("cache_hits", summary.cache_hits)
            );
            println!("{}", kv("manifest", cfg.out_dir.join(MANIFEST_DIR).join("manifest.jsonl").display()));
        }
        Command::Train {
            corpus,
            duration_steps,
            acoustic_steps,
            vocoder_steps,
            common,
        } => {
            let mut flags = vec![];
            for (k, v) in [
                ("train.duration_steps", duration_steps),
                ("train.acoustic_steps", acoustic_steps),
                ("train.vocoder_steps", vocoder_steps),
            ] {
                if let Some(v) = v {
                    flags.push((k.to_string(), v.to_string()));
                }
            }
            let mut cfg = load_config(config, &common, flags)?;
            if let Some(c) = corpus {
                cfg.corpus.path = c;
            }
            finish(pipeline::run_stage(&cfg, Stage::Train, &mut progress)?, &cfg);
        }
        Command::Adapt {
            target_corpus,
            speaker,
            acoustic_steps,
            vocoder_steps,
            common,
        } => {
            let mut flags = vec![];
            for (k, v) in [
                ("adapt.acoustic_steps", acoustic_steps),
                ("adapt.vocoder_steps", vocoder_steps),
            ] {
                if let Some(v) = v {
                    flags.push((k.to_string(), v.to_string()));
                }
            }
            if let Some(s) = &speaker {
                flags.push(string_flag("adapt.speaker", s));
            }
            let mut cfg = load_config(config, &common, flags)?;
            if let Some(c) = target_corpus {
                cfg.adapt.corpus = c;
            }
            finish(pipeline::run_stage(&cfg, Stage::Adapt, &mut progress)?, &cfg);
        }
        Command::Synth {
            text_file,
            text,
            speaker,
            baseline,
            common,
        } => {
            let mut flags = vec![];
            if let Some(s) = &speaker {
                flags.push(string_flag("synth.speaker", s));
            }
            if baseline {
                flags.push(("synth.use_stage1".into(), "true".into()));
            }
            let mut cfg = load_config(config, &common, flags)?;
            if let Some(t) = text_file {
                cfg.synth.text_file = Some(t);
            }
            cfg.synth.texts.extend(text);
            finish(pipeline::run_stage(&cfg, Stage::Synth, &mut progress)?, &cfg);
        }
        Command::Inspect { path } => inspect(&path)?,
    }
    Ok(())
}

fn finish(record: RunRecord, cfg: &PipelineConfig) {
    let mut line = vec![
        kv("stage", record.stage.as_str()),
        kv("status", "done"),
        kv("config_hash", &record.config_hash),
        kv("artifacts", record.artifacts.len()),
        kv("errors", record.errors.len()),
    ];
    for (k, v) in &record.final_losses {
        line.push(kv(&format!("final_{k}"), format!("{v:.6}")));
    }
    println!("{}", line.join(" "));
    for e in &record.errors {
        println!(
            "{} {} {} {}",
            kv("item_error", e.index),
            kv("category", &e.category),
            kv("item", &e.item),
            kv("message", &e.message)
        );
    }
    let rec = pipeline::stage_dir(&cfg.out_dir, record.stage).join(pipeline::RUN_RECORD_FILE);
    println!("{}", kv("run_record", rec.display()));
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let manifest_path = if path.is_dir() {
        [path.join("manifest.jsonl"), path.join(MANIFEST_DIR).join("manifest.jsonl")]
            .into_iter()
            .find(|p| p.is_file())
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        Some(path.to_path_buf())
    } else {
        None
    };
    if let Some(mp) = manifest_path {
        let m = Manifest::load(&mp).with_context(|| format!("reading manifest {}", mp.display()))?;
        println!("{} {} {}", kv("type", "manifest"), kv("utterances", m.len()), kv("speakers", m.speakers.len()));
        for s in &m.speakers {
            println!(
                "{} {} {}",
                kv("speaker", &s.name),
                kv("quality", format!("{:?}", s.quality).to_lowercase()),
                kv("utterances", s.utterances)
            );
        }
        return Ok(());
    }
    let bytes = std::fs::read(path).map_err(Error::from)?;
    if FeatureArray::is_feature_file(&bytes) {
        let f = FeatureArray::from_bytes(&bytes)?;
        println!(
            "{} {} {} {} {} {}",
            kv("type", "features"),
            kv("dtype", f.dtype_name()),
            kv("dims", format!("{:?}", f.dims).replace(' ', "")),
            kv("hop", f.hop),
            kv("win", f.win),
            kv("sample_rate", f.sample_rate)
        );
        return Ok(());
    }
    if path.extension().is_some_and(|e| e == "json") {
        if let Ok(r) = serde_json::from_slice::<RunRecord>(&bytes) {
            println!(
                "{} {} {} {} {}",
                kv("type", "run_record"),
                kv("stage", r.stage.as_str()),
                kv("config_hash", &r.config_hash),
                kv("artifacts", r.artifacts.len()),
                kv("errors", r.errors.len())
            );
            return Ok(());
        }
    }
    // anything else must be a checkpoint; malformed input is reported as corrupt
    let ck = Checkpoint::from_bytes(&bytes)?;
    let h = &ck.header;
    let params: usize = ck.tensors.values().map(|t| t.elem_count()).sum();
    println!(
        "{} {} {} {} {} {}",
        kv("type", h.kind.as_str()),
        kv("version", CHECKPOINT_VERSION),
        kv("config_hash", &h.config_hash),
        kv("step", h.step),
        kv("speakers", h.speakers.len()),
        kv("params", params)
    );
    println!("{}", kv("config", serde_json::to_string(&h.config)?));
    for (name, t) in &ck.tensors {
        println!("{} {}", kv("tensor", name), kv("dims", format!("{:?}", t.dims()).replace(' ', "")));
    }
    Ok(())
}

fn category_of(err: &anyhow::Error) -> ErrorCategory {
    if err.downcast_ref::<UsageError>().is_some() {
        return ErrorCategory::Usage;
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::category)
        .unwrap_or(ErrorCategory::Io)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let cat = category_of(&err);
            eprintln!("error {} {}", kv("category", cat.as_str()), kv("message", format!("{err:#}")));
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}

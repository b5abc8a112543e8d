use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxclone::toy::{write_toy_corpus, ToySpeaker};

const TINY: &str = r#"
seed = 5
log_every = 5

[train]
duration_steps = 10
acoustic_steps = 10
vocoder_steps = 2

[adapt]
acoustic_steps = 4
vocoder_steps = 2

[duration]
embedding_dim = 8
recurrent_hidden = 8

[acoustic]
speaker_embedding_dim = 4
encoder_dim = 8
prenet_dims = [8, 8]
decoder_dim = 16
postnet_layers = 2
postnet_dim = 8
batch_size = 2

[vocoder]
initial_channels = 16
resblock_kernels = [3]
resblock_dilations = [[1]]
periods = [2, 3]
scales = 2
discriminator_channels = [2, 4]
segment_frames = 4
"#;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        write_toy_corpus(
            &root.join("corpus"),
            &[ToySpeaker::new("spk_a", 110.0, 3), ToySpeaker::new("spk_b", 190.0, 3)],
            1,
        )
        .unwrap();
        write_toy_corpus(&root.join("target"), &[ToySpeaker::new("target1", 150.0, 2)], 2).unwrap();
        let cfg = format!("out_dir = \"out\"\n{TINY}\n[corpus]\npath = \"corpus\"\n")
            .replace("[adapt]\n", "[adapt]\ncorpus = \"target\"\nspeaker = \"target1\"\n");
        std::fs::write(root.join("config.toml"), cfg).unwrap();
        Self { _tmp: tmp, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_voxclone"))
            .args(args)
            .current_dir(&self.root)
            .env("VOXCLONE_CONFIG", self.root.join("config.toml"))
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of `key=` on the first line containing it.
fn field(text: &str, key: &str) -> Option<String> {
    text.split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")).map(String::from))
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_voxclone"))
        .args(["train"])
        .env_remove("VOXCLONE_CONFIG")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("category=usage"));

    let o = Command::new(env!("CARGO_BIN_EXE_voxclone"))
        .args(["train", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flags_are_rejected() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--bogus-flag"]);
    assert_eq!(code(&o), 2);
    assert!(!ws.out().exists());
}

#[test]
fn random_bytes_are_a_corrupt_artifact() {
    let ws = Workspace::new();
    let junk = ws.root.join("junk.bin");
    std::fs::write(&junk, (0..2000u32).map(|i| (i * 7919 % 251) as u8).collect::<Vec<_>>()).unwrap();
    let o = ws.run(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    assert!(stderr(&o).contains("category=checkpoint"));
}

#[test]
fn missing_corpus_is_a_config_error() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--corpus", "nowhere"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn stages_must_run_in_order() {
    let ws = Workspace::new();
    let o = ws.run(&["adapt"]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    assert!(stderr(&o).contains("missing checkpoint"));
    let o = ws.run(&["synth", "--text", "mano"]);
    assert_eq!(code(&o), 6);
}

#[test]
fn live_lock_is_refused() {
    let ws = Workspace::new();
    std::fs::create_dir_all(ws.out()).unwrap();
    // this test process is certainly alive
    std::fs::write(ws.out().join("voxclone.lock"), format!("{}\n", std::process::id())).unwrap();
    let o = ws.run(&["prepare"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn prepare_summarises_caches_and_skips_corrupt_audio() {
    let ws = Workspace::new();
    let bad = ws.root.join("corpus/spk_a");
    std::fs::write(bad.join("u900.wav"), b"RIFF not really a wav").unwrap();
    std::fs::copy(bad.join("u000.txt"), bad.join("u900.txt")).unwrap();
    std::fs::copy(bad.join("u000.align"), bad.join("u900.align")).unwrap();

    let first = ws.run(&["prepare"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let out = stdout(&first);
    assert_eq!(field(&out, "kept").as_deref(), Some("6"));
    assert_eq!(field(&out, "skipped").as_deref(), Some("1"));
    assert_eq!(field(&out, "speakers").as_deref(), Some("2"));
    assert_eq!(field(&out, "cache_hits").as_deref(), Some("0"));
    assert!(out.contains("spk_a/u900"), "{out}");
    assert!(field(&out, "total_frames").unwrap().parse::<usize>().unwrap() > 0);

    let again = stdout(&ws.run(&["prepare"]));
    assert_eq!(field(&again, "cache_hits").as_deref(), Some("6"));

    let o = ws.run(&["inspect", ws.out().join("manifest").to_str().unwrap()]);
    assert_eq!(field(&stdout(&o), "utterances").as_deref(), Some("6"));
    assert_eq!(field(&stdout(&o), "speakers").as_deref(), Some("2"));
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn train_adapt_synth_round_trip() {
    let ws = Workspace::new();
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("stage=train model=acoustic step=0 loss="), "{out}");
    let hash = field(&out, "config_hash").unwrap();
    let s1 = ws.out().join("stage1");
    let snapshot = || -> Vec<(PathBuf, Vec<u8>)> {
        files(&s1).into_iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect()
    };
    let first_run = snapshot();

    // same seed, same config: same hash and same first losses
    let rerun = stdout(&ws.run(&["train"]));
    assert_eq!(field(&rerun, "config_hash").unwrap(), hash);
    let first_loss = |s: &str| {
        s.lines()
            .find(|l| l.contains("model=acoustic step=0 "))
            .and_then(|l| field(l, "loss"))
    };
    assert_eq!(first_loss(&rerun), first_loss(&out));
    // reruns are reproducible: identical checkpoints
    for ((path, a), (_, b)) in first_run.iter().zip(snapshot()) {
        if path.extension().is_some_and(|e| e == "ckpt") {
            assert_eq!(a, &b, "{} differs between identical runs", path.display());
        }
    }
    let stage1_bytes = snapshot();

    let o = ws.run(&["inspect", s1.join("acoustic.ckpt").to_str().unwrap()]);
    let info = stdout(&o);
    assert_eq!(field(&info, "type").as_deref(), Some("acoustic"));
    assert_eq!(field(&info, "version").as_deref(), Some("2"));
    assert_eq!(field(&info, "step").as_deref(), Some("10"));
    assert_eq!(field(&info, "speakers").as_deref(), Some("2"));
    assert!(info.contains("tensor=speaker_table dims=[2,4]"), "{info}");

    let o = ws.run(&["adapt", "--acoustic-steps", "0", "--vocoder-steps", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s2 = ws.out().join("stage2");
    for name in ["acoustic.ckpt", "generator.ckpt", "discriminators.ckpt", "duration.ckpt"] {
        assert_eq!(
            std::fs::read(s2.join(name)).unwrap(),
            std::fs::read(s1.join(name)).unwrap(),
            "{name} differs after a zero-step adaptation"
        );
    }

    let o = ws.run(&["adapt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_ne!(
        std::fs::read(s2.join("acoustic.ckpt")).unwrap(),
        std::fs::read(s1.join("acoustic.ckpt")).unwrap()
    );
    for (path, bytes) in &stage1_bytes {
        assert_eq!(&std::fs::read(path).unwrap(), bytes, "{} changed", path.display());
    }

    std::fs::write(ws.root.join("prompts.txt"), "mano, se\nsinu\nxylo\n\nemu\n").unwrap();
    let o = ws.run(&["synth", "--text-file", "prompts.txt", "--speaker", "target1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(field(&out, "errors").as_deref(), Some("1"));
    assert!(out.contains("category=frontend"), "{out}");
    let s3 = ws.out().join("stage3");
    for i in [0, 1, 3] {
        let wav = s3.join(format!("{i:04}.wav"));
        let spec = hound::WavReader::open(&wav).unwrap().spec();
        assert_eq!((spec.sample_rate, spec.bits_per_sample, spec.channels), (22050, 16, 1));
    }
    assert!(!s3.join("0002.wav").exists());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s3.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["errors"][0]["index"], 2);
    assert_eq!(record["details"]["utterances"].as_array().unwrap().len(), 3);

    // baseline from stage 1 is allowed; an empty prompt list still yields a record
    std::fs::write(ws.root.join("empty.txt"), "").unwrap();
    let o = ws.run(&["synth", "--baseline", "--text-file", "empty.txt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "artifacts").as_deref(), Some("0"));

    // nothing is written outside the output directory, and the lock is released
    let top: Vec<String> = files(&ws.root)
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(top, ["config.toml", "corpus", "empty.txt", "out", "prompts.txt", "target"]);
    assert!(!ws.out().join("voxclone.lock").exists());
}

#[test]
fn pretrained_vocoder_is_imported() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["train"])), 0);
    let o = ws.run(&["train", "--set", "train.vocoder_init=\"missing\""]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = ws.run(&[
        "train",
        "--out-dir",
        "out2",
        "--vocoder-steps",
        "0",
        "--set",
        "train.vocoder_init=\"out/stage1\"",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["generator.ckpt", "discriminators.ckpt"] {
        assert_eq!(
            std::fs::read(ws.root.join("out2/stage1").join(name)).unwrap(),
            std::fs::read(ws.out().join("stage1").join(name)).unwrap(),
            "{name} not carried over"
        );
    }
}

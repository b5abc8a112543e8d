//! Python bindings: front-end helpers, model inspection, the three pipeline stages
//! and an in-memory synthesizer.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voxclone::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use voxclone::frontend::{self, Lexicon, Waveform, SAMPLE_RATE};
use voxclone::pipeline::{self, PipelineConfig, Progress, Stage};
use voxclone::toy::{self, ToySpeaker};

create_exception!(voxclone_py, VoxcloneError, PyException);

/// Raises `VoxcloneError("<category>: <message>")`.
fn err(e: voxclone::Error) -> PyErr {
    VoxcloneError::new_err(format!("{}: {e}", e.category().as_str()))
}

fn to_py_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    match name {
        "train" => Ok(Stage::Train),
        "adapt" => Ok(Stage::Adapt),
        "synth" => Ok(Stage::Synth),
        other => Err(VoxcloneError::new_err(format!("usage: unknown stage {other:?}"))),
    }
}

#[pyclass(name = "Lexicon")]
struct PyLexicon {
    inner: Lexicon,
}

#[pymethods]
impl PyLexicon {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Lexicon::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Lexicon::parse(text).map_err(err)?,
        })
    }

    /// Phone symbols for `text`, wrapped in boundary silence.
    fn text_to_phones(&self, text: &str) -> PyResult<Vec<String>> {
        let seq = frontend::text_to_phones(text, &self.inner, Default::default()).map_err(err)?;
        Ok(seq.symbols().into_iter().map(String::from).collect())
    }

    fn inventory(&self) -> Vec<String> {
        self.inner.inventory().symbols().to_vec()
    }
}

#[pyclass(name = "PipelineConfig")]
struct PyPipelineConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    /// Reads a TOML file; `overrides` maps dotted keys to TOML literals.
    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn load(path: PathBuf, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(&path, &overrides.unwrap_or_default()).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text = "", overrides = None))]
    fn from_toml(text: &str, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::from_toml(text, &overrides.unwrap_or_default()).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self, stage: &str) -> PyResult<String> {
        Ok(self.inner.hash(parse_stage(stage)?))
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }
}

/// Runs one stage (`"train"`, `"adapt"` or `"synth"`) and returns its run record.
#[pyfunction]
#[pyo3(signature = (config, stage, verbose = false))]
fn run_stage<'py>(
    py: Python<'py>,
    config: &PyPipelineConfig,
    stage: &str,
    verbose: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let stage = parse_stage(stage)?;
    let mut progress = |p: &Progress| {
        if verbose {
            println!("{p:?}");
        }
    };
    let record = pipeline::run_stage(&config.inner, stage, &mut progress).map_err(err)?;
    to_py_json(py, &record)
}

/// Prepares the training corpus; returns the summary as a dict.
#[pyfunction]
fn prepare<'py>(py: Python<'py>, config: &PyPipelineConfig) -> PyResult<Bound<'py, PyAny>> {
    to_py_json(py, &pipeline::prepare(&config.inner).map_err(err)?)
}

#[pyclass(name = "Synthesizer", unsendable)]
struct PySynthesizer {
    inner: pipeline::Synthesizer,
}

#[pymethods]
impl PySynthesizer {
    /// Loads the models from a stage directory (e.g. `out/stage2`).
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::Synthesizer::load(&dir).map_err(err)?,
        })
    }

    fn speakers(&self) -> Vec<String> {
        self.inner.acoustic.speakers().to_vec()
    }

    /// Returns `(samples, info)`; samples are floats at 22050 Hz.
    #[pyo3(signature = (text, speaker, seed = 0))]
    fn synthesize<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        speaker: &str,
        seed: u64,
    ) -> PyResult<(Vec<f32>, Bound<'py, PyAny>)> {
        let (wave, info) = self.inner.synthesize(text, speaker, seed).map_err(err)?;
        Ok((wave.samples, to_py_json(py, &info)?))
    }
}

/// Log-mel spectrogram (frames x 80) of mono samples at 22050 Hz.
#[pyfunction]
fn compute_mel(samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
    let mel = frontend::compute_mel(&Waveform::new(samples, SAMPLE_RATE)).map_err(err)?;
    Ok(mel.frames.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Per-phone frame counts for an alignment file, summing to `n_frames`.
#[pyfunction]
#[pyo3(signature = (path, n_frames, hop = frontend::HOP, sample_rate = SAMPLE_RATE))]
fn alignment_durations(path: PathBuf, n_frames: usize, hop: usize, sample_rate: u32) -> PyResult<(Vec<String>, Vec<usize>)> {
    let tier = frontend::parse_alignment(&path, None).map_err(err)?;
    let d = frontend::durations_to_frames(&tier, hop, sample_rate, n_frames).map_err(err)?;
    let phones = tier.intervals().iter().map(|i| i.phone.clone()).collect();
    Ok((phones, d.counts().to_vec()))
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f32>> {
    Ok(frontend::load_audio(&path, &Default::default()).map_err(err)?.samples)
}

#[pyfunction]
fn write_wav(path: PathBuf, samples: Vec<f32>) -> PyResult<()> {
    frontend::write_wav(&path, &Waveform::new(samples, SAMPLE_RATE)).map_err(err)
}

/// Header of a checkpoint file; corrupt files raise `VoxcloneError("checkpoint: ...")`.
#[pyfunction]
fn inspect_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let ck = Checkpoint::load(&path).map_err(err)?;
    let h = &ck.header;
    let d = PyDict::new(py);
    d.set_item("type", h.kind.as_str())?;
    d.set_item("version", CHECKPOINT_VERSION)?;
    d.set_item("config_hash", &h.config_hash)?;
    d.set_item("step", h.step)?;
    d.set_item("speakers", h.speakers.clone())?;
    d.set_item("config", to_py_json(py, &h.config)?)?;
    let shapes = PyDict::new(py);
    for (name, t) in &ck.tensors {
        shapes.set_item(name, t.dims().to_vec())?;
    }
    d.set_item("tensors", shapes)?;
    Ok(d)
}

/// Writes a synthetic corpus; `speakers` holds `(name, f0_hz, utterances)` triples.
#[pyfunction]
#[pyo3(signature = (dir, speakers, seed = 0))]
fn write_toy_corpus(dir: PathBuf, speakers: Vec<(String, f64, usize)>, seed: u64) -> PyResult<()> {
    let speakers: Vec<ToySpeaker> = speakers
        .iter()
        .map(|(n, f0, u)| ToySpeaker::new(n, *f0, *u))
        .collect();
    toy::write_toy_corpus(&dir, &speakers, seed).map_err(err)
}

#[pymodule]
fn voxclone_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VoxcloneError", m.py().get_type::<VoxcloneError>())?;
    m.add("SAMPLE_RATE", SAMPLE_RATE)?;
    m.add("HOP", frontend::HOP)?;
    m.add_class::<PyLexicon>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PySynthesizer>()?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(compute_mel, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_durations, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(write_toy_corpus, m)?)?;
    Ok(())
}

//! Duration-informed Tacotron2-style acoustic model.
//!
//! Phones are encoded by convolutions and a bidirectional LSTM, expanded to frame rate
//! by explicit durations together with a within-phone position scalar and a speaker
//! embedding, then decoded frame by frame by two LSTMs. A convolutional postnet adds a
//! residual to the decoder output.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{DurationFrames, MelSpectrogram, N_MELS};
use crate::nn::{
    scalar, Adam, BiLstm, Conv1d, DropoutRng, Embedding, Init, Linear, LstmCell, LstmState,
    ParamStore, Precision,
};

pub const SPEAKER_TABLE: &str = "speaker_table";

/// Fixed affine map between log-mel values and the unit range the networks see.
/// Inputs and outputs of the model stay in log-mel units.
pub const MEL_CENTER: f64 = -5.0;
pub const MEL_SCALE: f64 = 4.0;

fn normalize_mel(x: &Tensor) -> Result<Tensor> {
    Ok(((x - MEL_CENTER)? / MEL_SCALE)?)
}

fn denormalize_mel(x: &Tensor) -> Result<Tensor> {
    Ok(((x * MEL_SCALE)? + MEL_CENTER)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub phone_vocab_size: usize,
    pub speaker_count: usize,
    pub speaker_embedding_dim: usize,
    /// Phone embedding, encoder convolution and BiLSTM output width.
    pub encoder_dim: usize,
    pub encoder_convs: usize,
    pub encoder_kernel: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    /// Keep prenet dropout on during autoregressive synthesis.
    pub dropout_at_synthesis: bool,
    pub decoder_dim: usize,
    pub postnet_layers: usize,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub mel_dim: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl AcousticConfig {
    pub fn new(phone_vocab_size: usize, speaker_count: usize) -> Self {
        Self {
            phone_vocab_size,
            speaker_count,
            speaker_embedding_dim: 64,
            encoder_dim: 512,
            encoder_convs: 3,
            encoder_kernel: 5,
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            dropout_at_synthesis: true,
            decoder_dim: 1024,
            postnet_layers: 5,
            postnet_dim: 512,
            postnet_kernel: 5,
            mel_dim: N_MELS,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("acoustic: {m}")));
        if self.mel_dim != N_MELS {
            return bad("mel_dim must be 80");
        }
        if self.speaker_count < 1 {
            return bad("speaker_count must be at least 1");
        }
        let dims = [
            self.phone_vocab_size,
            self.speaker_embedding_dim,
            self.encoder_dim,
            self.encoder_kernel,
            self.decoder_dim,
            self.postnet_dim,
            self.postnet_kernel,
        ];
        if dims.contains(&0) || self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return bad("dims must be positive and the prenet non-empty");
        }
        if self.encoder_dim % 2 != 0 {
            return bad("encoder_dim must be even");
        }
        if self.encoder_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("prenet_dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Width of an expanded row: encoder features, position, speaker embedding.
    pub fn row_dim(&self) -> usize {
        self.encoder_dim + 1 + self.speaker_embedding_dim
    }
}

/// Phone-level encoder output, `L x E`.
#[derive(Debug, Clone)]
pub struct EncoderOutputs(pub Tensor);

impl EncoderOutputs {
    pub fn len(&self) -> usize {
        self.0.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frame-level decoder conditioning, `T x (E + 1 + S)`.
#[derive(Debug, Clone)]
pub struct ExpandedEncoderOutputs {
    pub rows: Tensor,
    pub feature_dim: usize,
}

impl ExpandedEncoderOutputs {
    pub fn n_frames(&self) -> usize {
        self.rows.dim(0).unwrap_or(0)
    }

    pub fn positions(&self) -> Result<Vec<f64>> {
        Ok(self
            .rows
            .narrow(1, self.feature_dim, 1)?
            .squeeze(1)?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }
}

/// Decoder output before and after the postnet, each `T x 80`.
#[derive(Debug, Clone)]
pub struct MelPrediction {
    pub before_postnet: Tensor,
    pub after_postnet: Tensor,
}

impl MelPrediction {
    pub fn to_mel(&self) -> Result<MelSpectrogram> {
        tensor_to_mel(&self.after_postnet)
    }
}

pub fn mel_to_tensor(mel: &MelSpectrogram, dtype: DType) -> Result<Tensor> {
    let (t, m) = mel.frames.dim();
    let data: Vec<f32> = mel.frames.iter().copied().collect();
    Ok(Tensor::from_vec(data, (t, m), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_mel(t: &Tensor) -> Result<MelSpectrogram> {
    let (rows, cols) = t.dims2()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let frames = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    Ok(MelSpectrogram::new(frames))
}

/// Position of frame `j` within a phone of `d` frames: `j / (d - 1)`, or 0 when `d == 1`.
pub fn relative_position(j: usize, d: usize) -> f64 {
    if d <= 1 {
        0.0
    } else {
        j as f64 / (d - 1) as f64
    }
}

/// Repeats encoder row `i` `durations[i]` times and appends the position scalar and
/// `speaker` (an `S` vector) to every row.
pub fn length_regulate(
    enc: &EncoderOutputs,
    durations: &DurationFrames,
    speaker: &Tensor,
) -> Result<ExpandedEncoderOutputs> {
    length_regulate_counts(enc, durations.counts(), speaker)
}

pub fn length_regulate_counts(
    enc: &EncoderOutputs,
    counts: &[usize],
    speaker: &Tensor,
) -> Result<ExpandedEncoderOutputs> {
    let l = enc.len();
    if counts.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            actual: counts.len(),
        });
    }
    if let Some(index) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroDuration { index });
    }
    let dtype = enc.0.dtype();
    let feature_dim = enc.0.dim(1)?;
    let mut index = Vec::new();
    let mut positions = Vec::new();
    for (i, &d) in counts.iter().enumerate() {
        for j in 0..d {
            index.push(i as u32);
            positions.push(relative_position(j, d));
        }
    }
    let t = index.len();
    if t == 0 {
        let width = feature_dim + 1 + speaker.dim(0)?;
        return Ok(ExpandedEncoderOutputs {
            rows: Tensor::zeros((0, width), dtype, &Device::Cpu)?,
            feature_dim,
        });
    }
    let index = Tensor::from_vec(index, t, &Device::Cpu)?;
    let features = enc.0.index_select(&index, 0)?;
    let positions = Tensor::from_vec(positions, (t, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let s = speaker.dim(0)?;
    let speaker = speaker.reshape((1, s))?.broadcast_as((t, s))?;
    Ok(ExpandedEncoderOutputs {
        rows: Tensor::cat(&[&features, &positions, &speaker], 1)?,
        feature_dim,
    })
}

/// `MSE(before, gt) + MSE(after, gt)`.
pub fn acoustic_loss(pred: &MelPrediction, gt: &Tensor) -> Result<Tensor> {
    for t in [&pred.before_postnet, &pred.after_postnet] {
        if t.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                expected: gt.dims().to_vec(),
                actual: t.dims().to_vec(),
            });
        }
    }
    let before = (&pred.before_postnet - gt)?.sqr()?.mean_all()?;
    let after = (&pred.after_postnet - gt)?.sqr()?.mean_all()?;
    Ok((before + after)?)
}

struct Encoder {
    embedding: Embedding,
    convs: Vec<Conv1d>,
    lstm: BiLstm,
}

struct Decoder {
    prenet: Vec<Linear>,
    lstm1: LstmCell,
    lstm2: LstmCell,
    proj: Linear,
}

struct Postnet {
    convs: Vec<Conv1d>,
}

/// Options for one decoding pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOptions {
    /// Seed for prenet dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

pub struct AcousticModel {
    config: AcousticConfig,
    speakers: Vec<String>,
    store: ParamStore,
    encoder: Encoder,
    speaker_table: Tensor,
    decoder: Decoder,
    postnet: Postnet,
}

impl AcousticModel {
    pub fn new(config: AcousticConfig, speakers: Vec<String>, seed: u64) -> Result<Self> {
        let store = ParamStore::new(config.precision, seed);
        Self::from_store(config, speakers, store)
    }

    pub fn from_store(
        config: AcousticConfig,
        speakers: Vec<String>,
        mut store: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        if speakers.len() != config.speaker_count {
            return Err(Error::ConfigInvalid(format!(
                "{} speaker names for speaker_count {}",
                speakers.len(),
                config.speaker_count
            )));
        }
        let c = &config;
        let e = c.encoder_dim;
        let embedding = Embedding::new(&mut store, "encoder.embedding", c.phone_vocab_size, e)?;
        let convs = (0..c.encoder_convs)
            .map(|i| Conv1d::new(&mut store, &format!("encoder.conv{i}"), e, e, c.encoder_kernel, 1, 1))
            .collect::<Result<_>>()?;
        let lstm = BiLstm::new(&mut store, "encoder.lstm", e, e / 2)?;
        let speaker_table = store.get(
            SPEAKER_TABLE,
            &[c.speaker_count, c.speaker_embedding_dim],
            Init::Normal(0.3),
        )?;

        let mut prenet = Vec::new();
        let mut width = c.mel_dim;
        for (i, &d) in c.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(&mut store, &format!("decoder.prenet{i}"), width, d)?);
            width = d;
        }
        let r = c.row_dim();
        let lstm1 = LstmCell::new(&mut store, "decoder.lstm1", width + r, c.decoder_dim)?;
        let lstm2 = LstmCell::new(&mut store, "decoder.lstm2", c.decoder_dim + r, c.decoder_dim)?;
        let proj = Linear::new(&mut store, "decoder.proj", c.decoder_dim, c.mel_dim)?;

        let mut post = Vec::new();
        for i in 0..c.postnet_layers {
            let input = if i == 0 { c.mel_dim } else { c.postnet_dim };
            let output = if i + 1 == c.postnet_layers { c.mel_dim } else { c.postnet_dim };
            post.push(Conv1d::new(&mut store, &format!("postnet.conv{i}"), input, output, c.postnet_kernel, 1, 1)?);
        }
        Ok(Self {
            config,
            speakers,
            store,
            encoder: Encoder {
                embedding,
                convs,
                lstm,
            },
            speaker_table,
            decoder: Decoder {
                prenet,
                lstm1,
                lstm2,
                proj,
            },
            postnet: Postnet { convs: post },
        })
    }

    pub fn config(&self) -> &AcousticConfig {
        &self.config
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn try_clone(&self) -> Result<Self> {
        Self::from_store(
            self.config.clone(),
            self.speakers.clone(),
            self.store.deep_clone()?,
        )
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn speaker_index(&self, name: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == name)
    }

    pub fn speaker_vector(&self, index: usize) -> Result<Tensor> {
        if index >= self.config.speaker_count {
            return Err(Error::UnknownSpeaker(format!("speaker index {index}")));
        }
        Ok(self.speaker_table.get(index)?)
    }

    /// Mean of all speaker rows, the starting point for a new speaker.
    pub fn mean_speaker_vector(&self) -> Result<Tensor> {
        Ok(self.speaker_table.mean(0)?)
    }

    /// Embedding for `name`, or the mean row when the speaker has no row of its own.
    pub fn speaker_vector_for(&self, name: &str) -> Result<Tensor> {
        match self.speaker_index(name) {
            Some(i) => self.speaker_vector(i),
            None => self.mean_speaker_vector(),
        }
    }

    /// Overwrites one speaker row in place.
    pub fn set_speaker_row(&mut self, index: usize, row: &[f64]) -> Result<()> {
        let table = self.speaker_table.to_dtype(DType::F64)?;
        let mut rows: Vec<Vec<f64>> = table.to_vec2()?;
        rows[index] = row.to_vec();
        let flat: Vec<f64> = rows.concat();
        let shape = self.speaker_table.shape().clone();
        let new = Tensor::from_vec(flat, shape, &Device::Cpu)?;
        self.store.replace(SPEAKER_TABLE, &new)?;
        *self = Self::from_store(
            self.config.clone(),
            self.speakers.clone(),
            std::mem::replace(&mut self.store, ParamStore::new(self.config.precision, 0)),
        )?;
        Ok(())
    }

    /// Returns a copy with one more speaker row, initialised to the mean of existing rows.
    pub fn with_new_speaker(&self, name: &str) -> Result<Self> {
        let mut store = self.store.deep_clone()?;
        let mean = self.mean_speaker_vector()?.unsqueeze(0)?;
        let table = Tensor::cat(&[&self.speaker_table, &mean], 0)?;
        store.replace(SPEAKER_TABLE, &table)?;
        let mut config = self.config.clone();
        config.speaker_count += 1;
        let mut speakers = self.speakers.clone();
        speakers.push(name.to_string());
        Self::from_store(config, speakers, store)
    }

    pub fn encode(&self, phone_ids: &[usize]) -> Result<EncoderOutputs> {
        let e = self.config.encoder_dim;
        if phone_ids.is_empty() {
            return Ok(EncoderOutputs(Tensor::zeros((0, e), self.dtype(), &Device::Cpu)?));
        }
        let x = self.encoder.embedding.forward(phone_ids)?;
        let mut x = x.t()?.unsqueeze(0)?;
        for conv in &self.encoder.convs {
            x = conv.forward(&x)?.relu()?;
        }
        let x = x.squeeze(0)?.t()?.contiguous()?;
        Ok(EncoderOutputs(self.encoder.lstm.forward(&x)?))
    }

    pub fn expand(
        &self,
        phone_ids: &[usize],
        durations: &DurationFrames,
        speaker: &Tensor,
    ) -> Result<ExpandedEncoderOutputs> {
        length_regulate(&self.encode(phone_ids)?, durations, speaker)
    }

    fn prenet(&self, frame: &Tensor, dropout: &mut Option<DropoutRng>) -> Result<Tensor> {
        let mut x = frame.clone();
        for layer in &self.decoder.prenet {
            x = layer.forward(&x)?.relu()?;
            if let Some(rng) = dropout.as_mut() {
                x = rng.apply(&x, self.config.prenet_dropout)?;
            }
        }
        Ok(x)
    }

    /// Runs the decoder over a padded batch of expanded rows `(B, T, R)`.
    ///
    /// `feedback(t, prev)` supplies the frame consumed at step `t` (shape `(B, 80)`),
    /// given the frame the model emitted at step `t - 1` (the go frame at `t = 0`).
    fn decode(
        &self,
        rows: &Tensor,
        opts: DecodeOptions,
        feedback: &mut dyn FnMut(usize, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (b, t, r) = rows.dims3()?;
        let dtype = rows.dtype();
        let c = &self.config;
        let d = &self.decoder;
        let p = *c.prenet_dims.last().expect("validated non-empty");
        let mut dropout = opts.dropout_seed.map(DropoutRng::new);

        // row contributions to both LSTMs, computed once for all steps
        let shifted = Tensor::cat(
            &[
                &Tensor::zeros((b, 1, r), dtype, &Device::Cpu)?,
                &rows.narrow(1, 0, t - 1)?,
            ],
            1,
        )?;
        let rows1 = shifted
            .broadcast_matmul(&d.lstm1.input_weight_t(p, r)?)?
            .broadcast_add(d.lstm1.bias())?;
        let rows2 = rows
            .broadcast_matmul(&d.lstm2.input_weight_t(c.decoder_dim, r)?)?
            .broadcast_add(d.lstm2.bias())?;
        let w1_prenet = d.lstm1.input_weight_t(0, p)?;
        let w2_context = d.lstm2.input_weight_t(0, c.decoder_dim)?;

        let mut s1: LstmState = d.lstm1.zero_state(b, dtype)?;
        let mut s2: LstmState = d.lstm2.zero_state(b, dtype)?;
        // the go frame sits at the centre of the normalised range
        let mut prev = Tensor::full(MEL_CENTER, (b, c.mel_dim), &Device::Cpu)?.to_dtype(dtype)?;
        let mut frames = Vec::with_capacity(t);
        for step in 0..t {
            let input = normalize_mel(&feedback(step, &prev)?)?;
            let pre = self.prenet(&input, &mut dropout)?;
            let g1 = (pre.matmul(&w1_prenet)? + rows1.narrow(1, step, 1)?.squeeze(1)?)?;
            s1 = d.lstm1.step_projected(&g1, &s1)?;
            let g2 = (s1.h.matmul(&w2_context)? + rows2.narrow(1, step, 1)?.squeeze(1)?)?;
            s2 = d.lstm2.step_projected(&g2, &s2)?;
            let frame = denormalize_mel(&d.proj.forward(&s2.h)?)?;
            frames.push(frame.clone());
            prev = frame;
        }
        Ok(Tensor::stack(&frames, 1)?)
    }

    /// Postnet residual for `(B, T, 80)` input. `mask` is `(B, T, 1)` and zeroes padded
    /// frames between layers, so padding does not leak into valid frames.
    fn postnet_residual(&self, before: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mask = mask.map(|m| m.transpose(1, 2)).transpose()?;
        let mut x = normalize_mel(&before.transpose(1, 2)?.contiguous()?)?;
        if let Some(m) = &mask {
            x = x.broadcast_mul(m)?;
        }
        let n = self.postnet.convs.len();
        for (i, conv) in self.postnet.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < n {
                x = x.tanh()?;
                if let Some(m) = &mask {
                    x = x.broadcast_mul(m)?;
                }
            }
        }
        Ok((x.transpose(1, 2)? * MEL_SCALE)?.contiguous()?)
    }

    pub fn postnet(&self, before: &Tensor) -> Result<Tensor> {
        let batched = before.unsqueeze(0)?;
        Ok(self.postnet_residual(&batched, None)?.squeeze(0)?)
    }

    fn finish(&self, before: Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let before = match mask {
            Some(m) => before.broadcast_mul(m)?,
            None => before,
        };
        let after = (&before + self.postnet_residual(&before, mask)?)?;
        Ok((before, after))
    }

    fn check_frames(expanded: &ExpandedEncoderOutputs, mel: &Tensor) -> Result<()> {
        if mel.dim(0)? != expanded.n_frames() {
            return Err(Error::LengthMismatch {
                expected: expanded.n_frames(),
                actual: mel.dim(0)?,
            });
        }
        Ok(())
    }

    /// Teacher-forced decoding: step `t` consumes ground-truth frame `t - 1`.
    pub fn teacher_forced_forward(
        &self,
        expanded: &ExpandedEncoderOutputs,
        mel_gt: &Tensor,
        opts: DecodeOptions,
    ) -> Result<MelPrediction> {
        Self::check_frames(expanded, mel_gt)?;
        if expanded.n_frames() == 0 {
            return self.empty_prediction();
        }
        let gt = mel_gt.unsqueeze(0)?;
        let rows = expanded.rows.unsqueeze(0)?;
        let before = self.decode(&rows, opts, &mut teacher_feedback(&gt))?;
        let (before, after) = self.finish(before, None)?;
        Ok(MelPrediction {
            before_postnet: before.squeeze(0)?,
            after_postnet: after.squeeze(0)?,
        })
    }

    /// Autoregressive decoding for exactly `expanded.n_frames()` steps. With `forced`
    /// set, the fed-back frame is replaced by that ground truth.
    pub fn autoregressive_decode(
        &self,
        expanded: &ExpandedEncoderOutputs,
        opts: DecodeOptions,
        forced: Option<&Tensor>,
    ) -> Result<MelPrediction> {
        if let Some(gt) = forced {
            Self::check_frames(expanded, gt)?;
        }
        if expanded.n_frames() == 0 {
            return self.empty_prediction();
        }
        let rows = expanded.rows.unsqueeze(0)?;
        let forced = forced.map(|g| g.unsqueeze(0)).transpose()?;
        let mut feedback = |step: usize, prev: &Tensor| -> Result<Tensor> {
            match (&forced, step) {
                (_, 0) => Ok(prev.clone()),
                (Some(gt), s) => Ok(gt.narrow(1, s - 1, 1)?.squeeze(1)?),
                (None, _) => Ok(prev.detach()),
            }
        };
        let before = self.decode(&rows, opts, &mut feedback)?;
        let (before, after) = self.finish(before, None)?;
        Ok(MelPrediction {
            before_postnet: before.squeeze(0)?,
            after_postnet: after.squeeze(0)?,
        })
    }

    /// Free-running synthesis; prenet dropout follows `dropout_at_synthesis`.
    pub fn autoregressive_synthesize(
        &self,
        expanded: &ExpandedEncoderOutputs,
        seed: u64,
    ) -> Result<MelSpectrogram> {
        let opts = DecodeOptions {
            dropout_seed: self.config.dropout_at_synthesis.then_some(seed),
        };
        self.autoregressive_decode(expanded, opts, None)?.to_mel()
    }

    fn empty_prediction(&self) -> Result<MelPrediction> {
        let z = Tensor::zeros((0, self.config.mel_dim), self.dtype(), &Device::Cpu)?;
        Ok(MelPrediction {
            before_postnet: z.clone(),
            after_postnet: z,
        })
    }

    /// Masked teacher-forced loss over a batch of examples.
    pub fn batch_loss(&self, batch: &[&AcousticExample], opts: DecodeOptions) -> Result<Tensor> {
        let dtype = self.dtype();
        let t_max = batch.iter().map(|e| e.durations.total()).max().unwrap_or(0);
        if batch.is_empty() || t_max == 0 {
            return Err(Error::EmptyAdaptationSet);
        }
        let mut rows = Vec::new();
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for ex in batch {
            let t = ex.durations.total();
            let gt = mel_to_tensor(&ex.mel, dtype)?;
            if gt.dim(0)? != t {
                return Err(Error::LengthMismatch {
                    expected: t,
                    actual: gt.dim(0)?,
                });
            }
            let speaker = self.speaker_vector(ex.speaker)?;
            let expanded = self.expand(&ex.phone_ids, &ex.durations, &speaker)?;
            rows.push(expanded.rows.pad_with_zeros(0, 0, t_max - t)?);
            gts.push(gt.pad_with_zeros(0, 0, t_max - t)?);
            let mask: Vec<f64> = (0..t_max).map(|i| if i < t { 1.0 } else { 0.0 }).collect();
            masks.push(Tensor::from_vec(mask, (t_max, 1), &Device::Cpu)?.to_dtype(dtype)?);
        }
        let rows = Tensor::stack(&rows, 0)?;
        let gt = Tensor::stack(&gts, 0)?;
        let mask = Tensor::stack(&masks, 0)?;
        let before = self.decode(&rows, opts, &mut teacher_feedback(&gt))?;
        let (before, after) = self.finish(before, Some(&mask))?;
        let count = scalar(&mask.sum_all()?)? * self.config.mel_dim as f64;
        let se = |x: &Tensor| -> Result<Tensor> {
            Ok((x - &gt)?.broadcast_mul(&mask)?.sqr()?.sum_all()?)
        };
        Ok(((se(&before)? + se(&after)?)? / count)?)
    }

    /// Mean teacher-forced loss per example, dropout off.
    pub fn evaluate(&self, examples: &[AcousticExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for ex in examples {
            total += scalar(&self.batch_loss(&[ex], DecodeOptions::default())?)?;
        }
        Ok(total / examples.len() as f64)
    }

    /// Teacher-forced after-postnet mels, dropout off.
    pub fn teacher_forced_mels(&self, examples: &[AcousticExample]) -> Result<Vec<MelSpectrogram>> {
        examples
            .iter()
            .map(|ex| {
                let speaker = self.speaker_vector(ex.speaker)?;
                let expanded = self.expand(&ex.phone_ids, &ex.durations, &speaker)?;
                let gt = mel_to_tensor(&ex.mel, self.dtype())?;
                self.teacher_forced_forward(&expanded, &gt, DecodeOptions::default())?
                    .to_mel()
            })
            .collect()
    }
}

fn teacher_feedback(gt: &Tensor) -> impl FnMut(usize, &Tensor) -> Result<Tensor> + '_ {
    move |step, prev| {
        if step == 0 {
            Ok(prev.clone())
        } else {
            Ok(gt.narrow(1, step - 1, 1)?.squeeze(1)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcousticExample {
    pub phone_ids: Vec<usize>,
    pub durations: DurationFrames,
    pub speaker: usize,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AcousticTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcousticTrainReport {
    pub losses: Vec<f64>,
}

/// Teacher-forced training with prenet dropout, Adam and gradient clipping.
pub fn train_acoustic(
    model: &mut AcousticModel,
    examples: &[AcousticExample],
    cfg: &AcousticTrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<AcousticTrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus("acoustic training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(
        model.store.vars(),
        model.config.learning_rate,
        Some(model.config.grad_clip),
    )?;
    let dropout = model.config.prenet_dropout > 0.0;
    let mut report = AcousticTrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_size.clamp(1, examples.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let opts = DecodeOptions {
            dropout_seed: dropout.then(|| cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64)),
        };
        let loss = model.batch_loss(&batch, opts)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "acoustic loss diverged at step {step}"
            )));
        }
        opt.backward_step(&loss)?;
        report.losses.push(value);
        progress(step, value);
    }
    Ok(report)
}

/// Fine-tunes every parameter on the target speaker for exactly `cfg.steps` steps and
/// returns the adapted copy. A new speaker row, initialised to the mean of the existing
/// rows, is added unless the speaker already has one. With zero steps the model is
/// returned unchanged.
pub fn adapt_acoustic(
    model: &AcousticModel,
    speaker: &str,
    target: &[AcousticExample],
    cfg: &AcousticTrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<(AcousticModel, AcousticTrainReport)> {
    if target.is_empty() {
        return Err(Error::EmptyTargetCorpus);
    }
    if cfg.steps == 0 {
        return Ok((model.try_clone()?, AcousticTrainReport::default()));
    }
    let mut adapted = match model.speaker_index(speaker) {
        Some(_) => model.try_clone()?,
        None => model.with_new_speaker(speaker)?,
    };
    let index = adapted.speaker_index(speaker).expect("row just ensured");
    let examples: Vec<AcousticExample> = target
        .iter()
        .map(|e| AcousticExample {
            speaker: index,
            ..e.clone()
        })
        .collect();
    let report = train_acoustic(&mut adapted, &examples, cfg, progress)?;
    Ok((adapted, report))
}

/// Re-labels examples with the row the model uses for `speaker` (mean row if absent).
pub fn speaker_examples(
    model: &AcousticModel,
    speaker: &str,
    examples: &[AcousticExample],
) -> Option<Vec<AcousticExample>> {
    let index = model.speaker_index(speaker)?;
    Some(
        examples
            .iter()
            .map(|e| AcousticExample {
                speaker: index,
                ..e.clone()
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(vocab: usize, speakers: usize) -> AcousticConfig {
        AcousticConfig {
            speaker_embedding_dim: 4,
            encoder_dim: 8,
            prenet_dims: vec![8, 8],
            decoder_dim: 8,
            postnet_layers: 3,
            postnet_dim: 8,
            precision: Precision::F64,
            ..AcousticConfig::new(vocab, speakers)
        }
    }

    fn tiny(speakers: usize) -> AcousticModel {
        let names = (0..speakers).map(|i| format!("s{i}")).collect();
        AcousticModel::new(tiny_config(12, speakers), names, 3).unwrap()
    }

    fn mel(t: usize, seed: f32) -> MelSpectrogram {
        MelSpectrogram::new(Array2::from_shape_fn((t, 80), |(i, j)| {
            ((i as f32 * 0.7 + j as f32 * 0.13 + seed).sin()) - 2.0
        }))
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let m = tiny(1);
        let ids: Vec<usize> = (0..12).collect();
        let a = m.encode(&ids).unwrap();
        assert_eq!(a.0.dims(), [12, 8]);
        assert_eq!(m.encode(&[3]).unwrap().0.dims(), [1, 8]);
        let b = m.encode(&ids).unwrap();
        assert_eq!(
            a.0.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.0.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        assert!(matches!(m.encode(&[12]), Err(Error::IndexOutOfVocab { .. })));
    }

    #[test]
    fn length_regulator_examples() {
        let enc = EncoderOutputs(Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap());
        let spk = Tensor::new(&[9.0f64], &Device::Cpu).unwrap();
        let d = DurationFrames::new(vec![2, 3]).unwrap();
        let x = length_regulate(&enc, &d, &spk).unwrap();
        assert_eq!(x.n_frames(), 5);
        assert_eq!(x.positions().unwrap(), [0.0, 1.0, 0.0, 0.5, 1.0]);
        let rows: Vec<Vec<f64>> = x.rows.to_vec2().unwrap();
        assert_eq!(rows[3], [3.0, 4.0, 0.5, 9.0]);

        let ones = DurationFrames::new(vec![1, 1]).unwrap();
        let x = length_regulate(&enc, &ones, &spk).unwrap();
        assert_eq!(x.positions().unwrap(), [0.0, 0.0]);

        let wrong = DurationFrames::new(vec![1, 1, 1]).unwrap();
        assert!(matches!(
            length_regulate(&enc, &wrong, &spk),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            length_regulate_counts(&enc, &[1, 0], &spk),
            Err(Error::ZeroDuration { index: 1 })
        ));
    }

    #[test]
    fn prediction_shapes_and_residual() {
        let m = tiny(2);
        let d = DurationFrames::new(vec![2, 3]).unwrap();
        let x = m.expand(&[1, 2], &d, &m.speaker_vector(1).unwrap()).unwrap();
        let gt = mel_to_tensor(&mel(5, 0.0), DType::F64).unwrap();
        let p = m.teacher_forced_forward(&x, &gt, DecodeOptions::default()).unwrap();
        assert_eq!(p.before_postnet.dims(), [5, 80]);
        assert_eq!(p.after_postnet.dims(), [5, 80]);
        let residual = (&p.after_postnet - &p.before_postnet).unwrap();
        let expected = m.postnet(&p.before_postnet).unwrap();
        let diff = scalar(&(residual - expected).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff < 1e-12);

        let short = mel_to_tensor(&mel(4, 0.0), DType::F64).unwrap();
        assert!(matches!(
            m.teacher_forced_forward(&x, &short, DecodeOptions::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let gt = mel_to_tensor(&mel(3, 0.5), DType::F64).unwrap();
        let exact = MelPrediction {
            before_postnet: gt.clone(),
            after_postnet: gt.clone(),
        };
        assert_eq!(scalar(&acoustic_loss(&exact, &gt).unwrap()).unwrap(), 0.0);
        let offset = MelPrediction {
            before_postnet: gt.clone(),
            after_postnet: (&gt + 1.0).unwrap(),
        };
        assert!((scalar(&acoustic_loss(&offset, &gt).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let bad = MelPrediction {
            before_postnet: gt.narrow(0, 0, 2).unwrap(),
            after_postnet: gt.clone(),
        };
        assert!(matches!(
            acoustic_loss(&bad, &gt),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn synthesis_length_and_seeded_determinism() {
        let m = tiny(1);
        let d = DurationFrames::new(vec![10, 20, 10]).unwrap();
        let x = m.expand(&[1, 2, 3], &d, &m.speaker_vector(0).unwrap()).unwrap();
        let a = m.autoregressive_synthesize(&x, 11).unwrap();
        assert_eq!(a.frames.dim(), (40, 80));
        assert_eq!(a, m.autoregressive_synthesize(&x, 11).unwrap());
    }

    #[test]
    fn teacher_forcing_matches_forced_autoregression() {
        let m = tiny(1);
        let d = DurationFrames::new(vec![3, 1, 4]).unwrap();
        let x = m.expand(&[4, 5, 6], &d, &m.speaker_vector(0).unwrap()).unwrap();
        let gt = mel_to_tensor(&mel(8, 1.0), DType::F64).unwrap();
        let tf = m.teacher_forced_forward(&x, &gt, DecodeOptions::default()).unwrap();
        let ar = m.autoregressive_decode(&x, DecodeOptions::default(), Some(&gt)).unwrap();
        let a = tf.after_postnet.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = ar.after_postnet.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn speaker_rows_are_isolated() {
        let mut m = tiny(2);
        let d = DurationFrames::new(vec![2, 2]).unwrap();
        let run = |m: &AcousticModel| {
            let x = m.expand(&[1, 2], &d, &m.speaker_vector(0).unwrap()).unwrap();
            m.autoregressive_decode(&x, DecodeOptions::default(), None)
                .unwrap()
                .to_mel()
                .unwrap()
        };
        let before = run(&m);
        m.set_speaker_row(1, &[5.0, -5.0, 5.0, -5.0]).unwrap();
        assert_eq!(before, run(&m));
    }

    #[test]
    fn batched_loss_matches_single_examples() {
        let m = tiny(2);
        let a = AcousticExample {
            phone_ids: vec![1, 2],
            durations: DurationFrames::new(vec![2, 3]).unwrap(),
            speaker: 0,
            mel: mel(5, 0.0),
        };
        let b = AcousticExample {
            phone_ids: vec![3, 4, 5],
            durations: DurationFrames::new(vec![1, 1, 1]).unwrap(),
            speaker: 1,
            mel: mel(3, 2.0),
        };
        let o = DecodeOptions::default();
        let la = scalar(&m.batch_loss(&[&a], o).unwrap()).unwrap();
        let lb = scalar(&m.batch_loss(&[&b], o).unwrap()).unwrap();
        let lab = scalar(&m.batch_loss(&[&a, &b], o).unwrap()).unwrap();
        // frame-weighted mean of the per-example losses
        assert!((lab - (5.0 * la + 3.0 * lb) / 8.0).abs() < 1e-10);
    }

    #[test]
    fn batched_loss_gradients_match_finite_differences() {
        let m = tiny(2);
        let a = AcousticExample {
            phone_ids: vec![1, 2],
            durations: DurationFrames::new(vec![2, 2]).unwrap(),
            speaker: 0,
            mel: mel(4, 0.0),
        };
        let b = AcousticExample {
            phone_ids: vec![3, 4],
            durations: DurationFrames::new(vec![1, 2]).unwrap(),
            speaker: 1,
            mel: mel(3, 2.0),
        };
        let loss = || m.batch_loss(&[&a, &b], DecodeOptions::default());
        let check = crate::nn::gradient_check(m.store(), &loss, 1e-6, 1e-3).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn adaptation_contracts() {
        let m = tiny(2);
        let ex = AcousticExample {
            phone_ids: vec![1, 2],
            durations: DurationFrames::new(vec![2, 3]).unwrap(),
            speaker: 0,
            mel: mel(5, 0.3),
        };
        let zero = AcousticTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (same, _) = adapt_acoustic(&m, "new", &[ex.clone()], &zero, &mut |_, _| {}).unwrap();
        assert!(same.store().bit_identical(m.store()).unwrap());
        assert!(matches!(
            adapt_acoustic(&m, "new", &[], &zero, &mut |_, _| {}),
            Err(Error::EmptyTargetCorpus)
        ));

        let cfg = AcousticTrainConfig {
            steps: 30,
            batch_size: 1,
            seed: 0,
        };
        let (adapted, report) = adapt_acoustic(&m, "new", &[ex.clone()], &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(report.losses.len(), 30);
        assert_eq!(adapted.config().speaker_count, 3);
        assert_eq!(adapted.speakers()[2], "new");
        let relabeled = speaker_examples(&adapted, "new", &[ex]).unwrap();
        let before = m.with_new_speaker("new").unwrap().evaluate(&relabeled).unwrap();
        assert!(adapted.evaluate(&relabeled).unwrap() < before);
        // the source model is untouched
        assert_eq!(m.config().speaker_count, 2);
    }
}

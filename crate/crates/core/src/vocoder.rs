//! Mel-to-waveform conversion: a HiFi-GAN style generator trained against multi-period
//! and multi-scale discriminators, and a Griffin-Lim baseline.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::acoustic::mel_to_tensor;
use crate::dsp::{hann_window, mel_filterbank, Padding, Stft};
use crate::error::{Error, Result};
use crate::frontend::{MelConfig, MelSpectrogram, Waveform, N_MELS};
use crate::nn::{scalar, Adam, Conv1d, ParamStore, Precision};

const LRELU_SLOPE: f64 = 0.1;

fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LRELU_SLOPE)?)
}

// ---------------------------------------------------------------------------
// Griffin-Lim

/// Per-iteration STFT magnitude error of a Griffin-Lim run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GriffinLimTrace {
    pub magnitude_error: Vec<f64>,
}

/// Non-negative least-squares estimate of linear STFT magnitudes (`T x bins`) from a
/// log-mel spectrogram, by multiplicative updates.
pub fn mel_to_linear(mel: &MelSpectrogram, config: &MelConfig, iterations: usize) -> Array2<f64> {
    let bank = mel_filterbank(
        config.sample_rate,
        config.n_fft,
        config.n_mels,
        config.fmin,
        config.fmax,
    );
    let y = mel.frames.mapv(|v| (v as f64).exp());
    let gram = bank.t().dot(&bank);
    let target = y.dot(&bank);
    let mut x = target.clone();
    for _ in 0..iterations {
        let denom = x.dot(&gram);
        ndarray::Zip::from(&mut x)
            .and(&target)
            .and(&denom)
            .for_each(|x, &t, &d| *x *= t / (d + 1e-12));
    }
    x
}

/// Griffin-Lim phase reconstruction from a log-mel spectrogram, starting from zero phase.
/// The output has exactly `T * hop` samples.
pub fn griffin_lim(
    mel: &MelSpectrogram,
    config: &MelConfig,
    iterations: usize,
) -> Result<(Waveform, GriffinLimTrace)> {
    if mel.n_mels() != config.n_mels {
        return Err(Error::ShapeMismatch {
            expected: vec![mel.n_frames(), config.n_mels],
            actual: vec![mel.n_frames(), mel.n_mels()],
        });
    }
    let t = mel.n_frames();
    let len = t * config.hop;
    if t == 0 {
        return Ok((Waveform::new(vec![], config.sample_rate), GriffinLimTrace::default()));
    }
    let stft = Stft::new(config.n_fft, config.hop);
    let target = mel_to_linear(mel, config, 200);
    let mut spec = target.mapv(|a| Complex64::new(a, 0.0));
    let mut signal = stft.synthesize(&spec, len);
    let mut trace = GriffinLimTrace::default();
    for _ in 0..iterations {
        let analysed = stft.analyze(&signal, Padding::Zero, t);
        ndarray::Zip::from(&mut spec)
            .and(&analysed)
            .and(&target)
            .for_each(|s, &a, &m| {
                let norm = a.norm();
                *s = if norm > 0.0 { a * (m / norm) } else { Complex64::new(m, 0.0) };
            });
        trace
            .magnitude_error
            .push(stft.spectral_distance(&analysed, &spec));
        signal = stft.synthesize(&spec, len);
    }
    let samples = signal.into_iter().map(|s| s as f32).collect();
    Ok((Waveform::new(samples, config.sample_rate), trace))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderConfig {
    pub upsample_factors: Vec<usize>,
    /// Channels after the input convolution; halved at every upsampling stage.
    pub initial_channels: usize,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
    pub periods: Vec<usize>,
    pub scales: usize,
    /// Channel widths of each sub-discriminator's convolution stack.
    pub discriminator_channels: Vec<usize>,
    pub lambda_feature_matching: f64,
    pub lambda_mel: f64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub segment_frames: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            upsample_factors: vec![8, 8, 2, 2],
            initial_channels: 512,
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5], vec![1, 3, 5], vec![1, 3, 5]],
            periods: vec![2, 3, 5, 7, 11],
            scales: 3,
            discriminator_channels: vec![32, 128, 512, 1024],
            lambda_feature_matching: 2.0,
            lambda_mel: 45.0,
            learning_rate: 2e-4,
            adam_betas: (0.8, 0.99),
            segment_frames: 32,
            batch_size: 16,
            precision: Precision::F32,
        }
    }
}

impl VocoderConfig {
    /// Small widths for CPU-scale runs; the upsampling product is unchanged.
    pub fn desk() -> Self {
        Self {
            initial_channels: 32,
            resblock_kernels: vec![3, 5],
            resblock_dilations: vec![vec![1, 3], vec![1, 3]],
            discriminator_channels: vec![4, 8, 16],
            learning_rate: 1e-3,
            segment_frames: 16,
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn validate(&self, hop: usize) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(format!("vocoder: {m}")));
        if self.hop() != hop {
            return bad(format!("upsample factors multiply to {} not {hop}", self.hop()));
        }
        let mut periods = self.periods.clone();
        periods.sort_unstable();
        periods.dedup();
        if periods.len() != self.periods.len() || periods.contains(&0) {
            return bad("periods must be distinct and positive".into());
        }
        if self.initial_channels >> self.upsample_factors.len() == 0 {
            return bad("initial_channels too small for the number of upsampling stages".into());
        }
        if self.resblock_kernels.len() != self.resblock_dilations.len()
            || self.resblock_kernels.is_empty()
            || self.resblock_kernels.iter().any(|k| k % 2 == 0)
        {
            return bad("need one dilation list per odd resblock kernel".into());
        }
        if self.discriminator_channels.is_empty() || self.segment_frames == 0 || self.batch_size == 0 {
            return bad("discriminator channels, segment_frames and batch_size must be non-empty".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generator

struct ResBlock {
    dilated: Vec<Conv1d>,
    plain: Vec<Conv1d>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.dilated.iter().zip(&self.plain) {
            let y = c2.forward(&lrelu(&c1.forward(&lrelu(&x)?)?)?)?;
            x = (x + y)?;
        }
        Ok(x)
    }
}

struct UpsampleStage {
    factor: usize,
    conv: Conv1d,
    blocks: Vec<ResBlock>,
}

pub struct Generator {
    config: VocoderConfig,
    store: ParamStore,
    conv_pre: Conv1d,
    stages: Vec<UpsampleStage>,
    conv_post: Conv1d,
}

impl Generator {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(config.precision, seed);
        Self::from_store(config, store)
    }

    pub fn from_store(config: VocoderConfig, mut store: ParamStore) -> Result<Self> {
        config.validate(config.hop())?;
        let s = &mut store;
        let mut ch = config.initial_channels;
        let conv_pre = Conv1d::new(s, "generator.conv_pre", N_MELS, ch, 7, 1, 1)?;
        let mut stages = Vec::new();
        for (i, &u) in config.upsample_factors.iter().enumerate() {
            let out = ch / 2;
            let conv = Conv1d::new(s, &format!("generator.up{i}"), ch, out, 2 * u + 1, 1, 1)?;
            let mut blocks = Vec::new();
            for (j, (&k, dil)) in config
                .resblock_kernels
                .iter()
                .zip(&config.resblock_dilations)
                .enumerate()
            {
                let name = format!("generator.up{i}.res{j}");
                let dilated = dil
                    .iter()
                    .enumerate()
                    .map(|(n, &d)| Conv1d::new(s, &format!("{name}.c1_{n}"), out, out, k, 1, d))
                    .collect::<Result<_>>()?;
                let plain = (0..dil.len())
                    .map(|n| Conv1d::new(s, &format!("{name}.c2_{n}"), out, out, k, 1, 1))
                    .collect::<Result<_>>()?;
                blocks.push(ResBlock { dilated, plain });
            }
            stages.push(UpsampleStage {
                factor: u,
                conv,
                blocks,
            });
            ch = out;
        }
        let conv_post = Conv1d::new(s, "generator.conv_post", ch, 1, 7, 1, 1)?;
        Ok(Self {
            config,
            store,
            conv_pre,
            stages,
            conv_post,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn try_clone(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.store.deep_clone()?)
    }

    /// `(B, 80, T) -> (B, 1, T * hop)`
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let mut x = self.conv_pre.forward(mel)?;
        for stage in &self.stages {
            let len = x.dim(2)?;
            x = lrelu(&x)?.upsample_nearest1d(len * stage.factor)?;
            x = stage.conv.forward(&x)?;
            let mut sum: Option<Tensor> = None;
            for block in &stage.blocks {
                let y = block.forward(&x)?;
                sum = Some(match sum {
                    Some(s) => (s + y)?,
                    None => y,
                });
            }
            x = (sum.expect("at least one resblock") / stage.blocks.len() as f64)?;
        }
        let x = candle_nn::ops::leaky_relu(&x, 0.01)?;
        Ok(self.conv_post.forward(&x)?.tanh()?)
    }

    /// Waveform of exactly `T * hop` samples.
    pub fn generate_waveform(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.n_mels() != N_MELS {
            return Err(Error::ShapeMismatch {
                expected: vec![mel.n_frames(), N_MELS],
                actual: vec![mel.n_frames(), mel.n_mels()],
            });
        }
        if mel.n_frames() == 0 {
            return Ok(Waveform::new(vec![], crate::frontend::SAMPLE_RATE));
        }
        let x = mel_to_tensor(mel, self.store.dtype())?.t()?.unsqueeze(0)?;
        let y = self.forward(&x)?.flatten_all()?.to_dtype(DType::F32)?;
        Ok(Waveform::new(y.to_vec1()?, crate::frontend::SAMPLE_RATE))
    }
}

// ---------------------------------------------------------------------------
// Discriminators

/// Score map and intermediate features of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct SubVerdict {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

/// One entry per sub-discriminator: periods first, then scales.
#[derive(Debug, Clone)]
pub struct DiscriminatorVerdict(pub Vec<SubVerdict>);

struct ConvStack {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ConvStack {
    fn forward(&self, x: &Tensor) -> Result<SubVerdict> {
        let mut x = x.clone();
        let mut features = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = lrelu(&conv.forward(&x)?)?;
            features.push(x.clone());
        }
        let score = self.post.forward(&x)?;
        features.push(score.clone());
        Ok(SubVerdict { score, features })
    }
}

pub struct Discriminators {
    config: VocoderConfig,
    store: ParamStore,
    periods: Vec<(usize, ConvStack)>,
    scales: Vec<ConvStack>,
}

impl Discriminators {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(config.precision, seed);
        Self::from_store(config, store)
    }

    pub fn from_store(config: VocoderConfig, mut store: ParamStore) -> Result<Self> {
        config.validate(config.hop())?;
        let chans = &config.discriminator_channels;
        let last = *chans.last().expect("validated non-empty");
        let mut periods = Vec::new();
        for &p in &config.periods {
            let name = format!("mpd.p{p}");
            let mut convs = Vec::new();
            let mut input = 1;
            for (i, &c) in chans.iter().enumerate() {
                convs.push(Conv1d::new(&mut store, &format!("{name}.conv{i}"), input, c, 5, 3, 1)?);
                input = c;
            }
            convs.push(Conv1d::new(&mut store, &format!("{name}.conv_last"), last, last, 5, 1, 1)?);
            let post = Conv1d::new(&mut store, &format!("{name}.post"), last, 1, 3, 1, 1)?;
            periods.push((p, ConvStack { convs, post }));
        }
        let mut scales = Vec::new();
        for s in 0..config.scales {
            let name = format!("msd.s{s}");
            let mut convs = vec![Conv1d::new(&mut store, &format!("{name}.conv_in"), 1, chans[0], 15, 1, 1)?];
            let mut input = chans[0];
            for (i, &c) in chans.iter().enumerate() {
                convs.push(Conv1d::new(&mut store, &format!("{name}.conv{i}"), input, c, 11, 4, 1)?);
                input = c;
            }
            convs.push(Conv1d::new(&mut store, &format!("{name}.conv_last"), last, last, 5, 1, 1)?);
            let post = Conv1d::new(&mut store, &format!("{name}.post"), last, 1, 3, 1, 1)?;
            scales.push(ConvStack { convs, post });
        }
        Ok(Self {
            config,
            store,
            periods,
            scales,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn try_clone(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.store.deep_clone()?)
    }

    pub fn len(&self) -> usize {
        self.periods.len() + self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scores a `(B, 1, N)` waveform batch.
    pub fn forward(&self, wave: &Tensor) -> Result<DiscriminatorVerdict> {
        let (b, _, n) = wave.dims3()?;
        let mut out = Vec::with_capacity(self.len());
        for (p, stack) in &self.periods {
            let padded = n.div_ceil(*p) * p;
            let x = wave.pad_with_zeros(2, 0, padded - n)?;
            // (B, 1, N/p, p) -> (B * p, 1, N/p): each phase becomes its own sequence
            let x = x
                .reshape((b, padded / p, *p))?
                .transpose(1, 2)?
                .reshape((b * p, 1, padded / p))?;
            out.push(stack.forward(&x)?);
        }
        let mut x = wave.clone();
        for (s, stack) in self.scales.iter().enumerate() {
            if s > 0 {
                let len = x.dim(2)? / 2 * 2;
                x = x.narrow(2, 0, len)?.reshape((b, 1, len / 2, 2))?.mean(D::Minus1)?;
            }
            out.push(stack.forward(&x)?);
        }
        Ok(DiscriminatorVerdict(out))
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Log-mel analysis expressed in tensor ops so gradients reach the waveform.
pub struct DifferentiableMel {
    config: MelConfig,
    cos: Tensor,
    sin: Tensor,
    bank: Tensor,
}

impl DifferentiableMel {
    pub fn new(config: MelConfig, dtype: DType) -> Result<Self> {
        let n = config.n_fft;
        let bins = n / 2 + 1;
        let window = hann_window(n);
        let mut cos = Vec::with_capacity(n * bins);
        let mut sin = Vec::with_capacity(n * bins);
        for (i, w) in window.iter().enumerate() {
            for k in 0..bins {
                let a = 2.0 * std::f64::consts::PI * (i * k % n) as f64 / n as f64;
                cos.push(w * a.cos());
                sin.push(w * a.sin());
            }
        }
        let bank = mel_filterbank(config.sample_rate, n, config.n_mels, config.fmin, config.fmax);
        let bank: Vec<f64> = bank.t().iter().copied().collect();
        let dev = &Device::Cpu;
        Ok(Self {
            cos: Tensor::from_vec(cos, (n, bins), dev)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (n, bins), dev)?.to_dtype(dtype)?,
            bank: Tensor::from_vec(bank, (bins, config.n_mels), dev)?.to_dtype(dtype)?,
            config,
        })
    }

    /// `(B, N) -> (B, 1 + N / hop, n_mels)` with reflect padding, as in the front-end.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, n) = wave.dims2()?;
        let (n_fft, hop) = (self.config.n_fft, self.config.hop);
        let pad = n_fft / 2;
        if n <= pad {
            return Err(Error::AudioTooShort {
                samples: n,
                required: pad + 1,
            });
        }
        let frames = 1 + n / hop;
        let reflect = |i: isize| -> u32 {
            let last = n as isize - 1;
            let j = if i < 0 { -i } else if i > last { 2 * last - i } else { i };
            j as u32
        };
        let index: Vec<u32> = (0..frames)
            .flat_map(|t| (0..n_fft).map(move |i| (t * hop + i) as isize - pad as isize))
            .map(reflect)
            .collect();
        let index = Tensor::from_vec(index, frames * n_fft, &Device::Cpu)?;
        let framed = wave.index_select(&index, 1)?.reshape((b * frames, n_fft))?;
        let re = framed.matmul(&self.cos)?;
        let im = framed.matmul(&self.sin)?;
        let mag = ((re.sqr()? + im.sqr()?)? + 1e-12)?.sqrt()?;
        let mel = mag.matmul(&self.bank)?;
        let floor = Tensor::full(self.config.log_floor, mel.shape(), &Device::Cpu)?.to_dtype(mel.dtype())?;
        Ok(mel.maximum(&floor)?.log()?.reshape((b, frames, self.config.n_mels))?)
    }
}

/// Loss components of one training step; the generator total is
/// `adversarial + λ_fm · feature_matching + λ_mel · mel`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VocoderLossReport {
    pub discriminator: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
    pub mel: f64,
    pub generator_total: f64,
}

impl VocoderLossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.discriminator,
            self.adversarial,
            self.feature_matching,
            self.mel,
            self.generator_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn discriminator_loss(real: &DiscriminatorVerdict, fake: &DiscriminatorVerdict) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (r, f) in real.0.iter().zip(&fake.0) {
        terms.push(((1.0 - &r.score)?.sqr()?.mean_all()? + f.score.sqr()?.mean_all()?)?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

pub fn adversarial_loss(fake: &DiscriminatorVerdict) -> Result<Tensor> {
    let terms = fake
        .0
        .iter()
        .map(|f| Ok((1.0 - &f.score)?.sqr()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

pub fn feature_matching_loss(real: &DiscriminatorVerdict, fake: &DiscriminatorVerdict) -> Result<Tensor> {
    let mut terms = Vec::new();
    for (r, f) in real.0.iter().zip(&fake.0) {
        for (a, b) in r.features.iter().zip(&f.features) {
            terms.push((a.detach() - b)?.abs()?.mean_all()?);
        }
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

// ---------------------------------------------------------------------------
// Training

/// A waveform with its conditioning mel; the waveform must hold exactly `T * hop` samples.
#[derive(Debug, Clone)]
pub struct VocoderPair {
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
}

impl VocoderPair {
    pub fn check(&self, hop: usize) -> Result<()> {
        if self.waveform.len() != self.mel.n_frames() * hop {
            return Err(Error::MisalignedPair {
                samples: self.waveform.len(),
                frames: self.mel.n_frames(),
            });
        }
        Ok(())
    }
}

/// Optimizer state for joint generator/discriminator training.
pub struct VocoderTrainer {
    gen_opt: Adam,
    disc_opt: Adam,
    mel: DifferentiableMel,
    rng: ChaCha8Rng,
    segment_frames: usize,
    hop: usize,
    floor: f32,
    lambda_fm: f64,
    lambda_mel: f64,
}

impl VocoderTrainer {
    pub fn new(generator: &Generator, discriminators: &Discriminators, mel: MelConfig, seed: u64) -> Result<Self> {
        let c = generator.config();
        let dtype = generator.store().dtype();
        Ok(Self {
            gen_opt: Adam::with_betas(generator.store().vars(), c.learning_rate, c.adam_betas, Some(100.0))?,
            disc_opt: Adam::with_betas(discriminators.store().vars(), c.learning_rate, c.adam_betas, Some(100.0))?,
            floor: mel.log_floor_value(),
            mel: DifferentiableMel::new(mel, dtype)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            segment_frames: c.segment_frames,
            hop: c.hop(),
            lambda_fm: c.lambda_feature_matching,
            lambda_mel: c.lambda_mel,
        })
    }

    pub fn set_segment_frames(&mut self, frames: usize) {
        self.segment_frames = frames.max(1);
    }

    /// Random aligned crop of `segment_frames`, padded with silence when shorter.
    fn segment(&mut self, pair: &VocoderPair) -> (Vec<f32>, Vec<f32>) {
        let s = self.segment_frames;
        let t = pair.mel.n_frames();
        let start = if t > s { self.rng.random_range(0..=t - s) } else { 0 };
        let take = s.min(t);
        let mut mel = vec![self.floor; s * N_MELS];
        for (i, row) in pair.mel.frames.rows().into_iter().skip(start).take(take).enumerate() {
            mel[i * N_MELS..(i + 1) * N_MELS].copy_from_slice(row.as_slice().expect("standard layout"));
        }
        let mut wave = vec![0.0; s * self.hop];
        wave[..take * self.hop]
            .copy_from_slice(&pair.waveform.samples[start * self.hop..(start + take) * self.hop]);
        (mel, wave)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(
        &mut self,
        generator: &Generator,
        discriminators: &Discriminators,
        batch: &[&VocoderPair],
    ) -> Result<VocoderLossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyAdaptationSet);
        }
        for pair in batch {
            pair.check(self.hop)?;
        }
        let dtype = generator.store().dtype();
        let s = self.segment_frames;
        let n = s * self.hop;
        let b = batch.len();
        let (mut mels, mut waves) = (Vec::new(), Vec::new());
        for pair in batch {
            let (m, w) = self.segment(pair);
            mels.extend(m);
            waves.extend(w);
        }
        let dev = &Device::Cpu;
        let mel_in = Tensor::from_vec(mels, (b, s, N_MELS), dev)?
            .to_dtype(dtype)?
            .transpose(1, 2)?
            .contiguous()?;
        let real = Tensor::from_vec(waves, (b, 1, n), dev)?.to_dtype(dtype)?;

        let fake = generator.forward(&mel_in)?;

        let d_real = discriminators.forward(&real)?;
        let d_fake = discriminators.forward(&fake.detach())?;
        let d_loss = discriminator_loss(&d_real, &d_fake)?;
        let discriminator = scalar(&d_loss)?;
        self.disc_opt.backward_step(&d_loss)?;

        let d_real = discriminators.forward(&real)?;
        let d_fake = discriminators.forward(&fake)?;
        let adv = adversarial_loss(&d_fake)?;
        let fm = feature_matching_loss(&d_real, &d_fake)?;
        let mel_real = self.mel.forward(&real.squeeze(1)?)?;
        let mel_fake = self.mel.forward(&fake.squeeze(1)?)?;
        let mel = (mel_fake - mel_real)?.abs()?.mean_all()?;
        let total = ((&adv + (&fm * self.lambda_fm)?)? + (&mel * self.lambda_mel)?)?;
        let report = VocoderLossReport {
            discriminator,
            adversarial: scalar(&adv)?,
            feature_matching: scalar(&fm)?,
            mel: scalar(&mel)?,
            generator_total: scalar(&total)?,
        };
        self.gen_opt.backward_step(&total)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocoderTrainReport {
    pub steps: Vec<VocoderLossReport>,
}

/// Runs `steps` joint updates, cycling through `pairs` in batches.
pub fn train_vocoder(
    generator: &Generator,
    discriminators: &Discriminators,
    pairs: &[VocoderPair],
    steps: usize,
    mel: &MelConfig,
    seed: u64,
    progress: &mut dyn FnMut(usize, &VocoderLossReport),
) -> Result<VocoderTrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyAdaptationSet);
    }
    for p in pairs {
        p.check(generator.config().hop())?;
    }
    let mut trainer = VocoderTrainer::new(generator, discriminators, mel.clone(), seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let bs = generator.config().batch_size.min(pairs.len());
    let mut report = VocoderTrainReport::default();
    for step in 0..steps {
        let batch: Vec<&VocoderPair> = (0..bs)
            .map(|_| &pairs[order_rng.random_range(0..pairs.len())])
            .collect();
        let r = trainer.step(generator, discriminators, &batch)?;
        if !r.is_finite() {
            return Err(Error::ConfigInvalid(format!("vocoder loss diverged at step {step}")));
        }
        progress(step, &r);
        report.steps.push(r);
    }
    Ok(report)
}

/// Fine-tunes copies of the generator and discriminators for exactly `steps` updates.
pub fn adapt_vocoder(
    generator: &Generator,
    discriminators: &Discriminators,
    pairs: &[VocoderPair],
    steps: usize,
    mel: &MelConfig,
    seed: u64,
    progress: &mut dyn FnMut(usize, &VocoderLossReport),
) -> Result<(Generator, Discriminators, VocoderTrainReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyAdaptationSet);
    }
    let g = generator.try_clone()?;
    let d = discriminators.try_clone()?;
    let report = if steps == 0 {
        VocoderTrainReport::default()
    } else {
        train_vocoder(&g, &d, pairs, steps, mel, seed, progress)?
    };
    Ok((g, d, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{compute_mel, SAMPLE_RATE};

    fn tiny() -> VocoderConfig {
        VocoderConfig {
            initial_channels: 16,
            resblock_kernels: vec![3],
            resblock_dilations: vec![vec![1, 2]],
            periods: vec![2, 3],
            scales: 2,
            discriminator_channels: vec![2, 4],
            segment_frames: 4,
            ..VocoderConfig::desk()
        }
    }

    fn tone(freq: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()) as f32)
            .collect();
        Waveform::new(s, SAMPLE_RATE)
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let config = VocoderConfig {
            upsample_factors: vec![16, 16],
            initial_channels: 4,
            resblock_kernels: vec![3],
            resblock_dilations: vec![vec![1, 2]],
            precision: Precision::F64,
            ..VocoderConfig::desk()
        };
        let g = Generator::new(config, 4).unwrap();
        let mel = Tensor::randn(0.0, 1.0, (2, N_MELS, 2), &Device::Cpu).unwrap();
        let probe = Tensor::randn(0.0, 1.0, (2, 1, 512), &Device::Cpu).unwrap();
        let loss = || Ok((g.forward(&mel)? * &probe)?.sum_all()?);
        let r = crate::nn::gradient_check(g.store(), &loss, 1e-6, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn config_validation() {
        assert!(VocoderConfig::default().validate(256).is_ok());
        let mut c = VocoderConfig::default();
        c.upsample_factors = vec![8, 8, 2];
        assert!(c.validate(256).is_err());
        let mut c = VocoderConfig::default();
        c.periods = vec![2, 3, 2];
        assert!(c.validate(256).is_err());
    }

    #[test]
    fn generator_length_contract() {
        let g = Generator::new(tiny(), 0).unwrap();
        for t in [1, 2, 5, 32] {
            let mel = MelSpectrogram::new(Array2::from_elem((t, 80), -5.0));
            let w = g.generate_waveform(&mel).unwrap();
            assert_eq!(w.len(), t * 256);
            assert!(w.samples.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn discriminators_report_every_sub_discriminator() {
        let d = Discriminators::new(tiny(), 0).unwrap();
        let x = Tensor::zeros((2, 1, 1024), DType::F32, &Device::Cpu).unwrap();
        let v = d.forward(&x).unwrap();
        assert_eq!(v.0.len(), 4);
        assert!(v.0.iter().all(|s| !s.features.is_empty()));
    }

    #[test]
    fn differentiable_mel_matches_front_end() {
        let wave = tone(440.0, 4096);
        let reference = compute_mel(&wave).unwrap();
        let dm = DifferentiableMel::new(MelConfig::default(), DType::F64).unwrap();
        let x = Tensor::from_vec(
            wave.samples.iter().map(|&s| s as f64).collect::<Vec<_>>(),
            (1, 4096),
            &Device::Cpu,
        )
        .unwrap();
        let ours: Vec<Vec<f64>> = dm.forward(&x).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(ours.len(), reference.n_frames());
        for (row, r) in ours.iter().zip(reference.frames.rows()) {
            for (a, b) in row.iter().zip(r.iter()) {
                assert!((a - *b as f64).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn misaligned_pair_is_rejected() {
        let g = Generator::new(tiny(), 0).unwrap();
        let d = Discriminators::new(tiny(), 1).unwrap();
        let mut t = VocoderTrainer::new(&g, &d, MelConfig::default(), 0).unwrap();
        let pair = VocoderPair {
            waveform: Waveform::new(vec![0.0; 1000], SAMPLE_RATE),
            mel: MelSpectrogram::new(Array2::zeros((4, 80))),
        };
        assert!(matches!(
            t.step(&g, &d, &[&pair]),
            Err(Error::MisalignedPair { .. })
        ));
    }

    #[test]
    fn noise_training_stays_finite() {
        let g = Generator::new(tiny(), 0).unwrap();
        let d = Discriminators::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f32> = (0..8 * 256).map(|_| rng.random_range(-0.5..0.5)).collect();
        let waveform = Waveform::new(samples, SAMPLE_RATE);
        let mut mel = compute_mel(&waveform).unwrap();
        mel.frames = mel.frames.slice(ndarray::s![..8, ..]).to_owned();
        let pair = VocoderPair { waveform, mel };
        let report = train_vocoder(&g, &d, &[pair], 10, &MelConfig::default(), 0, &mut |_, _| {}).unwrap();
        assert_eq!(report.steps.len(), 10);
        assert!(report.steps.iter().all(|r| r.is_finite() && r.mel >= 0.0 && r.feature_matching >= 0.0));
    }

    #[test]
    fn adaptation_contracts() {
        let g = Generator::new(tiny(), 0).unwrap();
        let d = Discriminators::new(tiny(), 1).unwrap();
        let cfg = MelConfig::default();
        assert!(matches!(
            adapt_vocoder(&g, &d, &[], 0, &cfg, 0, &mut |_, _| {}),
            Err(Error::EmptyAdaptationSet)
        ));
        let wave = tone(300.0, 8 * 256);
        let mut mel = compute_mel(&wave).unwrap();
        mel.frames = mel.frames.slice(ndarray::s![..8, ..]).to_owned();
        let pair = VocoderPair { waveform: wave, mel };
        let (g2, d2, _) = adapt_vocoder(&g, &d, &[pair], 0, &cfg, 0, &mut |_, _| {}).unwrap();
        assert!(g2.store().bit_identical(g.store()).unwrap());
        assert!(d2.store().bit_identical(d.store()).unwrap());
    }

    #[test]
    fn griffin_lim_contracts() {
        let cfg = MelConfig::default();
        let silence = MelSpectrogram::new(Array2::from_elem((20, 80), cfg.log_floor_value()));
        let (w, _) = griffin_lim(&silence, &cfg, 10).unwrap();
        assert_eq!(w.len(), 20 * 256);
        assert!(w.rms() < 1e-3);

        let mel = compute_mel(&tone(440.0, 8192)).unwrap();
        let (w, trace) = griffin_lim(&mel, &cfg, 30).unwrap();
        assert_eq!(w.len(), mel.n_frames() * 256);
        for pair in trace.magnitude_error.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{pair:?}");
        }
    }
}

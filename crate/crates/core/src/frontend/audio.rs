use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|&s| (s as f64).powi(2)).sum();
        (energy / self.samples.len() as f64).sqrt()
    }

    /// Pads with zeros or truncates to exactly `len` samples.
    pub fn fit_to(&mut self, len: usize) {
        self.samples.resize(len, 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Loudness {
    None,
    /// Scale so the largest absolute sample equals `target`.
    Peak { target: f32 },
    /// Scale to an RMS level in dBFS, then back off if that would clip.
    Rms { target_dbfs: f64 },
}

impl Default for Loudness {
    fn default() -> Self {
        Loudness::Peak { target: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub loudness: Loudness,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            loudness: Loudness::default(),
        }
    }
}

pub fn normalize_loudness(wave: &mut Waveform, loudness: Loudness) {
    let peak = wave.peak();
    if peak == 0.0 {
        return;
    }
    let gain = match loudness {
        Loudness::None => return,
        Loudness::Peak { target } => target / peak,
        Loudness::Rms { target_dbfs } => {
            let target_rms = 10f64.powf(target_dbfs / 20.0);
            let gain = (target_rms / wave.rms()) as f32;
            gain.min(1.0 / peak)
        }
    };
    for s in &mut wave.samples {
        *s = (*s * gain).clamp(-1.0, 1.0);
    }
}

/// Band-limited resampling by windowed-sinc interpolation.
///
/// The output has `round(len * to / from)` samples.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    // cutoff relative to the input Nyquist, slightly below the output Nyquist
    let cutoff = 0.97 * ratio.min(1.0);
    let half_taps = (16.0 / cutoff).ceil() as i64;
    let n = samples.len() as i64;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let center = t.floor() as i64;
            let mut acc = 0.0;
            for k in (center - half_taps + 1)..=(center + half_taps) {
                if k < 0 || k >= n {
                    continue;
                }
                let x = t - k as f64;
                let window = 0.5 + 0.5 * (PI * x / half_taps as f64).cos();
                acc += samples[k as usize] as f64 * cutoff * sinc(cutoff * x) * window;
            }
            acc as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::UnsupportedFormat(e.to_string()))?
        }
    };
    let samples = interleaved
        .chunks(channels.max(1))
        .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Reads a PCM or float WAV, downmixes, resamples to the target rate and normalizes loudness.
pub fn load_audio(path: &Path, config: &AudioConfig) -> Result<Waveform> {
    let raw = read_wav(path)?;
    prepare_waveform(raw, config)
}

pub fn prepare_waveform(raw: Waveform, config: &AudioConfig) -> Result<Waveform> {
    if raw.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let samples = resample(&raw.samples, raw.sample_rate, config.sample_rate);
    let mut wave = Waveform::new(samples, config.sample_rate);
    for s in &mut wave.samples {
        *s = s.clamp(-1.0, 1.0);
    }
    normalize_loudness(&mut wave, config.loudness);
    Ok(wave)
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, n: usize, amp: f32) -> Vec<f32> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn halving_the_rate_halves_the_length() {
        for n in [1000usize, 1001, 44100] {
            let out = resample(&sine(440.0, 44100, n, 0.5), 44100, 22050);
            let expected = (n as f64 / 2.0).round() as i64;
            assert!((out.len() as i64 - expected).abs() <= 1, "{n} -> {}", out.len());
        }
    }

    #[test]
    fn resampling_preserves_a_low_tone() {
        let x = sine(440.0, 44100, 44100, 0.5);
        let y = resample(&x, 44100, 22050);
        let reference = sine(440.0, 22050, y.len(), 0.5);
        // ignore filter edge effects
        let err = y[200..y.len() - 200]
            .iter()
            .zip(&reference[200..reference.len() - 200])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn peak_normalization_hits_target() {
        let raw = Waveform::new(sine(220.0, SAMPLE_RATE, 4000, 0.5), SAMPLE_RATE);
        let wave = prepare_waveform(raw, &AudioConfig::default()).unwrap();
        assert!((wave.peak() - 0.95).abs() < 1e-6);
    }

    #[test]
    fn rms_normalization_never_clips() {
        let mut wave = Waveform::new(sine(220.0, SAMPLE_RATE, 4000, 0.1), SAMPLE_RATE);
        normalize_loudness(&mut wave, Loudness::Rms { target_dbfs: 0.0 });
        assert!(wave.peak() <= 1.0 + 1e-6);
        let mut wave = Waveform::new(sine(220.0, SAMPLE_RATE, 4000, 0.5), SAMPLE_RATE);
        normalize_loudness(&mut wave, Loudness::Rms { target_dbfs: -20.0 });
        assert!((wave.rms() - 0.1).abs() < 1e-3);
    }

    #[test]
    fn empty_audio_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wav");
        write_wav(&path, &Waveform::new(vec![], SAMPLE_RATE)).unwrap();
        assert!(matches!(
            load_audio(&path, &AudioConfig::default()),
            Err(Error::EmptyAudio)
        ));
    }

    #[test]
    fn garbage_file_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"definitely not RIFF").unwrap();
        assert!(matches!(
            load_audio(&path, &AudioConfig::default()),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn wav_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let wave = Waveform::new(sine(300.0, SAMPLE_RATE, 2000, 0.7), SAMPLE_RATE);
        write_wav(&path, &wave).unwrap();
        let cfg = AudioConfig {
            loudness: Loudness::None,
            ..Default::default()
        };
        let back = load_audio(&path, &cfg).unwrap();
        assert_eq!(back.len(), wave.len());
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

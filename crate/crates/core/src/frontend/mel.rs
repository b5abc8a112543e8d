use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audio::{Waveform, SAMPLE_RATE};
use crate::dsp::{mel_filterbank, Padding, Stft};
use crate::error::{Error, Result};

pub const N_MELS: usize = 80;
pub const HOP: usize = 256;
pub const WIN: usize = 1024;

/// Log-mel analysis settings. Frame `t` is centered on sample `t * hop` with reflect
/// padding, so a signal of `N` samples yields `1 + N / hop` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Mel energies are clamped to this before the natural log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: WIN,
            hop: HOP,
            n_mels: N_MELS,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        1 + samples / self.hop
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `T x n_mels` natural-log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub hop: usize,
    pub win: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>) -> Self {
        Self {
            frames,
            hop: HOP,
            win: WIN,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn mean_abs_diff(&self, other: &MelSpectrogram) -> f32 {
        let t = self.n_frames().min(other.n_frames());
        let a = self.frames.slice(ndarray::s![..t, ..]);
        let b = other.frames.slice(ndarray::s![..t, ..]);
        let total: f32 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        total / (t * self.n_mels()).max(1) as f32
    }
}

/// Cached filterbank and FFT plan.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    config: MelConfig,
    stft: Stft,
    bank: Array2<f64>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Self {
        let stft = Stft::new(config.n_fft, config.hop);
        let bank = mel_filterbank(
            config.sample_rate,
            config.n_fft,
            config.n_mels,
            config.fmin,
            config.fmax,
        );
        Self { config, stft, bank }
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.bank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn compute(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::UnsupportedFormat(format!(
                "expected {} Hz audio, got {} Hz",
                self.config.sample_rate, wave.sample_rate
            )));
        }
        let required = self.config.n_fft / 2 + 1;
        if wave.len() < required {
            return Err(Error::AudioTooShort {
                samples: wave.len(),
                required,
            });
        }
        let x: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
        let n_frames = self.config.frames_for(x.len());
        let mags = self.stft.magnitudes(&x, Padding::Reflect, n_frames);
        let mel = mags.dot(&self.bank.t());
        let floor = self.config.log_floor;
        Ok(MelSpectrogram {
            frames: mel.mapv(|e| e.max(floor).ln() as f32),
            hop: self.config.hop,
            win: self.config.n_fft,
        })
    }
}

pub fn compute_mel(wave: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new(MelConfig::default()).compute(wave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn one_second_gives_87_frames() {
        let wave = Waveform::new(vec![0.1; 22050], SAMPLE_RATE);
        let mel = compute_mel(&wave).unwrap();
        assert_eq!(mel.frames.dim(), (87, 80));
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let wave = Waveform::new(vec![0.0; 5000], SAMPLE_RATE);
        let mel = compute_mel(&wave).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_audio_is_rejected() {
        let wave = Waveform::new(vec![0.0; 300], SAMPLE_RATE);
        assert!(matches!(
            compute_mel(&wave),
            Err(Error::AudioTooShort { .. })
        ));
    }

    #[test]
    fn output_is_deterministic() {
        let samples: Vec<f32> = (0..9000)
            .map(|i| ((i as f64 * 0.37).sin() * (i as f64 * 0.0011).cos()) as f32)
            .collect();
        let wave = Waveform::new(samples, SAMPLE_RATE);
        let a = compute_mel(&wave).unwrap();
        let b = compute_mel(&wave).unwrap();
        assert!(a
            .frames
            .iter()
            .zip(b.frames.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let wave = Waveform::new(vec![0.0; 5000], 16000);
        assert!(compute_mel(&wave).is_err());
    }

    #[test]
    fn tone_energy_peaks_in_the_band_around_it() {
        use crate::dsp::{hz_to_mel, mel_to_hz};
        let samples: Vec<f32> = (0..22050)
            .map(|i| (0.5 * (2.0 * PI * 1000.0 * i as f64 / 22050.0).sin()) as f32)
            .collect();
        let mel = compute_mel(&Waveform::new(samples, SAMPLE_RATE)).unwrap();
        let step = hz_to_mel(8000.0) / 81.0;
        for row in mel.frames.rows() {
            let k = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let (lo, hi) = (mel_to_hz(step * k as f64), mel_to_hz(step * (k + 2) as f64));
            assert!(lo < 1000.0 && 1000.0 < hi, "band {k} spans {lo}..{hi}");
        }
    }
}

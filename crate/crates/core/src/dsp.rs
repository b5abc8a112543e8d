//! Short-time Fourier analysis, least-squares resynthesis and mel filterbanks.
//!
//! Frame `t` of a signal of length `N` is centered on sample `t * hop`; the signal
//! is extended by `n_fft / 2` samples on each side before framing.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// How the signal is extended past its ends before framing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge sample (numpy `reflect`).
    Reflect,
    Zero,
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

const MEL_F_SP: f64 = 200.0 / 3.0;
const MEL_MIN_LOG_HZ: f64 = 1000.0;
const MEL_MIN_LOG_MEL: f64 = MEL_MIN_LOG_HZ / MEL_F_SP;

fn mel_log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MEL_MIN_LOG_HZ {
        MEL_MIN_LOG_MEL + (hz / MEL_MIN_LOG_HZ).ln() / mel_log_step()
    } else {
        hz / MEL_F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MEL_MIN_LOG_MEL {
        MEL_MIN_LOG_HZ * (mel_log_step() * (mel - MEL_MIN_LOG_MEL)).exp()
    } else {
        mel * MEL_F_SP
    }
}

/// Triangular mel filters with area normalization, shape `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut bank = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            bank[[m, k]] = w * norm;
        }
    }
    bank
}

/// Reusable STFT/ISTFT with a Hann analysis window of length `n_fft`.
#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann_window(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count produced for a signal of `len` samples with center padding.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    fn pad(&self, x: &[f64], padding: Padding) -> Vec<f64> {
        let pad = self.n_fft / 2;
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        match padding {
            Padding::Zero => {
                out.resize(pad, 0.0);
                out.extend_from_slice(x);
                out.resize(n + 2 * pad, 0.0);
            }
            Padding::Reflect => {
                assert!(n > pad, "reflect padding needs more than {pad} samples");
                out.extend((1..=pad).rev().map(|i| x[i]));
                out.extend_from_slice(x);
                out.extend((1..=pad).map(|i| x[n - 1 - i]));
            }
        }
        out
    }

    /// One-sided spectra, `n_frames x n_bins`.
    pub fn analyze(&self, x: &[f64], padding: Padding, n_frames: usize) -> Array2<Complex64> {
        let padded = self.pad(x, padding);
        let n_bins = self.n_bins();
        let mut out = Array2::<Complex64>::zeros((n_frames, n_bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = padded.get(start + i).copied().unwrap_or(0.0);
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..n_bins {
                out[[t, k]] = buf[k];
            }
        }
        out
    }

    pub fn magnitudes(&self, x: &[f64], padding: Padding, n_frames: usize) -> Array2<f64> {
        self.analyze(x, padding, n_frames).mapv(|c| c.norm())
    }

    /// Least-squares signal estimate whose zero-padded STFT is closest to `spec`.
    pub fn synthesize(&self, spec: &Array2<Complex64>, out_len: usize) -> Vec<f64> {
        let pad = self.n_fft / 2;
        let (n_frames, n_bins) = spec.dim();
        let total = (out_len + 2 * pad).max((n_frames.saturating_sub(1)) * self.hop + self.n_fft);
        let mut acc = vec![0.0; total];
        let mut weight = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..n_frames {
            for k in 0..n_bins {
                buf[k] = spec[[t, k]];
            }
            for k in n_bins..self.n_fft {
                buf[k] = spec[[t, self.n_fft - k]].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                acc[start + i] += w * buf[i].re * scale;
                weight[start + i] += w * w;
            }
        }
        (0..out_len)
            .map(|n| {
                let w = weight[n + pad];
                if w > 1e-10 {
                    acc[n + pad] / w
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Squared distance between one-sided spectra, weighted so that it equals the
    /// full two-sided distance.
    pub fn spectral_distance(&self, a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        let last = self.n_fft / 2;
        let mut total = 0.0;
        for ((t, k), x) in a.indexed_iter() {
            let w = if k == 0 || k == last { 1.0 } else { 2.0 };
            total += w * (x - b[[t, k]]).norm_sqr();
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn filterbank_has_expected_shape_and_support() {
        let bank = mel_filterbank(22050, 1024, 80, 0.0, 8000.0);
        assert_eq!(bank.dim(), (80, 513));
        // nothing above fmax
        let top_bin = (8000.0 * 1024.0 / 22050.0_f64).ceil() as usize + 1;
        for k in top_bin..513 {
            assert!(bank.column(k).iter().all(|&w| w == 0.0));
        }
        for m in 0..80 {
            assert!(bank.row(m).iter().any(|&w| w > 0.0), "empty filter {m}");
        }
    }

    #[test]
    fn synthesis_inverts_analysis() {
        let stft = Stft::new(64, 16);
        let x: Vec<f64> = (0..300).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect();
        let frames = stft.frames_for(x.len());
        let spec = stft.analyze(&x, Padding::Zero, frames);
        let y = stft.synthesize(&spec, x.len());
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reflect_padding_mirrors_edges() {
        let stft = Stft::new(4, 2);
        assert_eq!(
            stft.pad(&[1.0, 2.0, 3.0, 4.0], Padding::Reflect),
            vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]
        );
    }
}

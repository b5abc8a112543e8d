//! Synthetic corpus with exact alignments, for smoke tests and demos.
//!
//! Each phone is rendered as a harmonic series on the speaker's f0 shaped by two
//! phone-specific formants ("s" is shaped noise); pauses are digital silence. Phone
//! boundaries fall on frame boundaries, so the written alignments are exact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frontend::{
    write_wav, AlignmentTier, Interval, Lexicon, Quality, Waveform, HOP, SAMPLE_RATE, SIL, SP,
};

pub const LEXICON_FILE: &str = "lexicon.txt";

const VOWELS: &[(&str, f64, f64)] = &[
    ("a", 800.0, 1200.0),
    ("e", 500.0, 1900.0),
    ("i", 300.0, 2300.0),
    ("o", 500.0, 900.0),
    ("u", 320.0, 800.0),
];
const NASALS: &[(&str, f64, f64)] = &[("m", 250.0, 1100.0), ("n", 250.0, 1600.0)];

#[derive(Debug, Clone)]
pub struct ToySpeaker {
    pub name: String,
    pub f0: f64,
    pub utterances: usize,
    pub quality: Quality,
}

impl ToySpeaker {
    pub fn new(name: &str, f0: f64, utterances: usize) -> Self {
        Self {
            name: name.to_string(),
            f0,
            utterances,
            quality: Quality::High,
        }
    }
}

/// Graphemes `a e i o u m n s` map to themselves; `,` and `.` are pauses.
pub fn toy_lexicon() -> Lexicon {
    let entries: BTreeMap<String, Vec<String>> = ["a", "e", "i", "o", "u", "m", "n", "s"]
        .iter()
        .map(|g| (g.to_string(), vec![g.to_string()]))
        .collect();
    let punctuation: BTreeSet<String> = [",", "."].iter().map(|s| s.to_string()).collect();
    Lexicon::new(entries, punctuation).expect("static lexicon is valid")
}

fn formants(phone: &str) -> Option<(f64, f64, f64)> {
    VOWELS
        .iter()
        .map(|&(p, a, b)| (p, a, b, 1.0))
        .chain(NASALS.iter().map(|&(p, a, b)| (p, a, b, 0.4)))
        .find(|(p, ..)| *p == phone)
        .map(|(_, a, b, gain)| (a, b, gain))
}

/// Renders `frames * HOP` samples of `phone` at fundamental `f0`.
pub fn render_phone(phone: &str, f0: f64, frames: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = frames * HOP;
    let sr = SAMPLE_RATE as f64;
    if phone == SIL || phone == SP {
        return vec![0.0; n];
    }
    let mut out: Vec<f64> = if let Some((f1, f2, gain)) = formants(phone) {
        let harmonics: Vec<(f64, f64)> = (1..)
            .map(|k| k as f64 * f0)
            .take_while(|&f| f < 4000.0)
            .map(|f| {
                let bump = |c: f64| (-((f - c) / 150.0).powi(2)).exp();
                (f, gain * (0.2 + bump(f1) + 0.6 * bump(f2)))
            })
            .collect();
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                harmonics
                    .iter()
                    .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum::<f64>()
            })
            .collect()
    } else {
        // first-difference white noise, a crude fricative
        let mut last = 0.0;
        (0..n)
            .map(|_| {
                let w: f64 = rng.random_range(-1.0..1.0);
                let y = w - last;
                last = w;
                0.8 * y
            })
            .collect()
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let ramp = (0.005 * sr) as usize;
    for (i, v) in out.iter_mut().enumerate() {
        let edge = i.min(n - 1 - i);
        let g = if edge < ramp { edge as f64 / ramp as f64 } else { 1.0 };
        *v = 0.3 * *v / peak * g;
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// One synthetic utterance: text, phones with frame counts, and audio.
#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub text: String,
    pub phones: Vec<(String, usize)>,
    pub waveform: Waveform,
}

impl ToyUtterance {
    pub fn alignment(&self) -> AlignmentTier {
        let period = HOP as f64 / SAMPLE_RATE as f64;
        let mut frame = 0;
        let intervals = self
            .phones
            .iter()
            .map(|(p, d)| {
                let iv = Interval {
                    phone: p.clone(),
                    start: frame as f64 * period,
                    end: (frame + d) as f64 * period,
                };
                frame += d;
                iv
            })
            .collect();
        AlignmentTier::new(intervals).expect("contiguous positive spans")
    }
}

const LETTERS: &[&str] = &["a", "e", "i", "o", "u", "m", "n", "s"];

/// Random text of one or two short words separated by a comma.
pub fn random_text(rng: &mut impl Rng) -> String {
    let word = |rng: &mut dyn rand::RngCore| -> String {
        let len = rng.random_range(2..=4);
        (0..len)
            .map(|_| LETTERS[rng.random_range(0..LETTERS.len())])
            .collect()
    };
    if rng.random_bool(0.5) {
        word(rng)
    } else {
        format!("{}, {}", word(rng), word(rng))
    }
}

pub fn toy_utterance(text: &str, f0: f64, rng: &mut impl Rng) -> Result<ToyUtterance> {
    let phones = crate::frontend::text_to_phones(text, &toy_lexicon(), Default::default())?;
    let mut out = Vec::new();
    let mut samples = Vec::new();
    for p in phones.iter() {
        let d = match p.symbol.as_str() {
            SIL => 4,
            SP => 3,
            _ => rng.random_range(3..=7),
        };
        samples.extend(render_phone(&p.symbol, f0, d, rng));
        out.push((p.symbol.clone(), d));
    }
    Ok(ToyUtterance {
        text: text.to_string(),
        phones: out,
        waveform: Waveform::new(samples, SAMPLE_RATE),
    })
}

/// Writes `<dir>/<speaker>/uNNN.{wav,txt,align}` for every speaker plus `<dir>/lexicon.txt`.
pub fn write_toy_corpus(dir: &Path, speakers: &[ToySpeaker], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(LEXICON_FILE), toy_lexicon().to_text())?;
    for spk in speakers {
        let sdir = dir.join(&spk.name);
        std::fs::create_dir_all(&sdir)?;
        if spk.quality == Quality::Low {
            std::fs::write(sdir.join("quality"), "low\n")?;
        }
        for u in 0..spk.utterances {
            let text = random_text(&mut rng);
            let utt = toy_utterance(&text, spk.f0, &mut rng)?;
            let stem = format!("u{u:03}");
            write_wav(&sdir.join(format!("{stem}.wav")), &utt.waveform)?;
            std::fs::write(sdir.join(format!("{stem}.txt")), format!("{text}\n"))?;
            utt.alignment().save(&sdir.join(format!("{stem}.align")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{build_manifest, parse_alignment_str, text_to_phones};

    #[test]
    fn utterance_matches_its_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let utt = toy_utterance("mano, se", 140.0, &mut rng).unwrap();
        let frames: usize = utt.phones.iter().map(|(_, d)| d).sum();
        assert_eq!(utt.waveform.len(), frames * HOP);
        let tier = parse_alignment_str(&utt.alignment().to_text(), None).unwrap();
        let g2p = text_to_phones(&utt.text, &toy_lexicon(), Default::default()).unwrap();
        assert_eq!(tier.phones(), g2p);
        assert_eq!(g2p.symbols().first(), Some(&SIL));
    }

    #[test]
    fn corpus_is_discoverable() {
        let tmp = tempfile::tempdir().unwrap();
        let spk = [ToySpeaker::new("a", 120.0, 3), ToySpeaker::new("b", 200.0, 2)];
        write_toy_corpus(tmp.path(), &spk, 0).unwrap();
        let (m, skipped) = build_manifest(tmp.path()).unwrap();
        assert_eq!(m.len(), 5);
        assert!(skipped.is_empty());
        assert!(Lexicon::load(&tmp.path().join(LEXICON_FILE)).is_ok());
    }
}

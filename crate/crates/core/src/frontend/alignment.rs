use std::path::Path;

use serde::{Deserialize, Serialize};

use super::phones::{PhoneInventory, PhoneSequence, SIL, SP};
use crate::error::{Error, Result};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub phone: String,
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Phone-level forced alignment: sorted, non-overlapping `(phone, start, end)` spans in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTier {
    intervals: Vec<Interval>,
}

impl AlignmentTier {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::MalformedAlignment {
                line: 0,
                reason: "no intervals".into(),
            });
        }
        for (i, iv) in intervals.iter().enumerate() {
            if !(iv.start.is_finite() && iv.end.is_finite()) || iv.start < 0.0 || iv.start >= iv.end
            {
                return Err(Error::MalformedAlignment {
                    line: i + 1,
                    reason: format!("invalid span {}..{}", iv.start, iv.end),
                });
            }
            if i > 0 && iv.start < intervals[i - 1].end - TIME_EPS {
                return Err(Error::OverlappingIntervals { index: i });
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn phones(&self) -> PhoneSequence {
        PhoneSequence::from_symbols(self.intervals.iter().map(|iv| iv.phone.clone()))
    }

    pub fn end(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.end)
    }

    /// Checks that the tier covers `[0, audio_seconds]` up to one frame period at each end.
    pub fn check_span(&self, audio_seconds: f64, frame_period: f64) -> Result<()> {
        let first = self.intervals[0].start;
        let last = self.end();
        if first > frame_period + TIME_EPS || (last - audio_seconds).abs() > frame_period + TIME_EPS
        {
            return Err(Error::AlignmentSpan {
                aligned: last - first,
                audio: audio_seconds,
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.intervals
            .iter()
            .map(|iv| {
                format!(
                    "{}\t{}\t{}\n",
                    format_seconds(iv.start),
                    format_seconds(iv.end),
                    iv.phone
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Shortest round-tripping decimal, padded to at least four fractional digits.
fn format_seconds(x: f64) -> String {
    let mut s = format!("{x}");
    let decimals = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in decimals..4 {
        s.push('0');
    }
    s
}

fn canonical_symbol(raw: &str) -> &str {
    match raw {
        "sil" | "<sil>" => SIL,
        "sp" | "<sp>" => SP,
        other => other,
    }
}

/// Parses `start<TAB>end<TAB>phone` lines (any whitespace separates fields).
pub fn parse_alignment_str(text: &str, inventory: Option<&PhoneInventory>) -> Result<AlignmentTier> {
    let mut intervals = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedAlignment {
            line: n + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [start, end, phone] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let start: f64 = start
            .parse()
            .map_err(|_| bad(format!("bad start time {start:?}")))?;
        let end: f64 = end.parse().map_err(|_| bad(format!("bad end time {end:?}")))?;
        let phone = canonical_symbol(phone);
        if let Some(inv) = inventory {
            if !inv.contains(phone) {
                return Err(Error::UnknownPhone(phone.to_string()));
            }
        }
        intervals.push(Interval {
            phone: phone.to_string(),
            start,
            end,
        });
    }
    if intervals.is_empty() {
        return Err(Error::MalformedAlignment {
            line: 0,
            reason: "empty alignment".into(),
        });
    }
    AlignmentTier::new(intervals)
}

pub fn parse_alignment(path: &Path, inventory: Option<&PhoneInventory>) -> Result<AlignmentTier> {
    parse_alignment_str(&std::fs::read_to_string(path)?, inventory)
}

/// Per-phone frame counts, each at least one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationFrames {
    counts: Vec<usize>,
}

impl DurationFrames {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if let Some(index) = counts.iter().position(|&c| c == 0) {
            return Err(Error::ZeroDuration { index });
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Frame index to phone index.
    pub fn frame_to_phone(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }
}

/// Converts interval lengths to integer frame counts summing exactly to `target_frames`.
///
/// Each real-valued count `len * sample_rate / hop` is rounded (minimum one frame), then
/// the total is reconciled one frame at a time: frames are added to the phone furthest
/// below its real count, or removed from the phone furthest above it while it keeps at
/// least one frame. Ties go to the lower index.
pub fn durations_to_frames(
    tier: &AlignmentTier,
    hop: usize,
    sample_rate: u32,
    target_frames: usize,
) -> Result<DurationFrames> {
    let n = tier.len();
    if n > target_frames {
        return Err(Error::InfeasibleDurations {
            phones: n,
            frames: target_frames,
        });
    }
    let frames_per_second = sample_rate as f64 / hop as f64;
    let real: Vec<f64> = tier
        .intervals()
        .iter()
        .map(|iv| iv.duration() * frames_per_second)
        .collect();
    let mut counts: Vec<usize> = real.iter().map(|r| (r.round() as usize).max(1)).collect();

    let mut total: usize = counts.iter().sum();
    while total < target_frames {
        let i = argmax_by(n, |i| real[i] - counts[i] as f64, |_| true);
        counts[i] += 1;
        total += 1;
    }
    while total > target_frames {
        let i = argmax_by(n, |i| counts[i] as f64 - real[i], |i| counts[i] > 1);
        counts[i] -= 1;
        total -= 1;
    }
    DurationFrames::new(counts)
}

fn argmax_by(n: usize, key: impl Fn(usize) -> f64, eligible: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for i in (0..n).filter(|&i| eligible(i)) {
        let k = key(i);
        if best.is_none_or(|(_, b)| k > b) {
            best = Some((i, k));
        }
    }
    best.expect("feasibility checked by caller").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(phone: &str, start: f64, end: f64) -> Interval {
        Interval {
            phone: phone.into(),
            start,
            end,
        }
    }

    #[test]
    fn parses_whitespace_separated_lines() {
        let tier = parse_alignment_str("0.00 0.10 SIL\n0.10 0.25 aa\n", None).unwrap();
        assert_eq!(tier.len(), 2);
        assert_eq!(tier.intervals()[1], iv("aa", 0.10, 0.25));
    }

    #[test]
    fn overlap_is_rejected() {
        let err = parse_alignment_str("0.0\t0.2\taa\n0.1\t0.3\tbb\n", None).unwrap_err();
        assert!(matches!(err, Error::OverlappingIntervals { index: 1 }));
    }

    #[test]
    fn empty_file_is_malformed() {
        assert!(matches!(
            parse_alignment_str("", None),
            Err(Error::MalformedAlignment { .. })
        ));
        assert!(matches!(
            parse_alignment_str("0.0 0.1\n", None),
            Err(Error::MalformedAlignment { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_phone_is_rejected_against_inventory() {
        let inv = PhoneInventory::new(["aa"]);
        assert!(parse_alignment_str("0 0.1 aa\n0.1 0.2 sil\n", Some(&inv)).is_ok());
        assert!(matches!(
            parse_alignment_str("0 0.1 zz\n", Some(&inv)),
            Err(Error::UnknownPhone(_))
        ));
    }

    #[test]
    fn seconds_keep_four_decimals() {
        assert_eq!(format_seconds(0.0), "0.0000");
        assert_eq!(format_seconds(1.5), "1.5000");
        assert_eq!(format_seconds(0.123456789), "0.123456789");
    }

    #[test]
    fn single_short_interval_rounds_up() {
        // 0.0232 s * 22050 / 256 = 1.998 frames
        let tier = AlignmentTier::new(vec![iv("aa", 0.0, 0.0232)]).unwrap();
        let d = durations_to_frames(&tier, 256, 22050, 2).unwrap();
        assert_eq!(d.counts(), [2]);
    }

    #[test]
    fn equal_intervals_share_frames_equally() {
        let ivs = (0..4)
            .map(|i| iv("aa", i as f64 * 0.1, (i + 1) as f64 * 0.1))
            .collect();
        let tier = AlignmentTier::new(ivs).unwrap();
        let d = durations_to_frames(&tier, 256, 22050, 36).unwrap();
        assert_eq!(d.counts(), [9, 9, 9, 9]);
    }

    #[test]
    fn too_few_frames_is_infeasible() {
        let ivs = (0..5)
            .map(|i| iv("aa", i as f64 * 0.1, (i + 1) as f64 * 0.1))
            .collect();
        let tier = AlignmentTier::new(ivs).unwrap();
        assert!(matches!(
            durations_to_frames(&tier, 256, 22050, 3),
            Err(Error::InfeasibleDurations {
                phones: 5,
                frames: 3
            })
        ));
    }

    #[test]
    fn span_check_allows_one_frame_slack() {
        let tier = AlignmentTier::new(vec![iv("SIL", 0.005, 0.5), iv("aa", 0.5, 0.99)]).unwrap();
        let period = 256.0 / 22050.0;
        assert!(tier.check_span(1.0, period).is_ok());
        assert!(tier.check_span(1.2, period).is_err());
    }

    #[test]
    fn zero_duration_is_rejected() {
        assert!(matches!(
            DurationFrames::new(vec![2, 0, 1]),
            Err(Error::ZeroDuration { index: 1 })
        ));
    }

    fn arb_tier() -> impl Strategy<Value = AlignmentTier> {
        prop::collection::vec(1e-4f64..0.5, 1..30).prop_map(|lens| {
            let mut t = 0.0;
            let ivs = lens
                .into_iter()
                .map(|l| {
                    let s = t;
                    t += l;
                    iv("aa", s, t)
                })
                .collect();
            AlignmentTier::new(ivs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(tier in arb_tier()) {
            prop_assert_eq!(parse_alignment_str(&tier.to_text(), None).unwrap(), tier);
        }

        #[test]
        fn frames_are_conserved(tier in arb_tier(), slack in -5i64..5) {
            let natural = (tier.end() * 22050.0 / 256.0).round() as i64;
            let target = (natural + slack).max(tier.len() as i64) as usize;
            let d = durations_to_frames(&tier, 256, 22050, target).unwrap();
            prop_assert_eq!(d.total(), target);
            prop_assert!(d.counts().iter().all(|&c| c >= 1));
        }
    }
}

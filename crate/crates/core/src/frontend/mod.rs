//! Text and speech front-end: lexicon G2P, alignment ingestion, audio loading,
//! log-mel extraction and corpus manifests.

pub mod alignment;
pub mod audio;
pub mod features;
pub mod manifest;
pub mod mel;
pub mod phones;

pub use alignment::{
    durations_to_frames, parse_alignment, parse_alignment_str, AlignmentTier, DurationFrames,
    Interval,
};
pub use audio::{load_audio, write_wav, AudioConfig, Loudness, Waveform, SAMPLE_RATE};
pub use features::{FeatureArray, FeaturePipeline, TrainingExample};
pub use manifest::{build_manifest, Manifest, Quality, SkippedUtterance, SpeakerInfo, UtteranceRecord};
pub use mel::{compute_mel, MelConfig, MelExtractor, MelSpectrogram, HOP, N_MELS, WIN};
pub use phones::{text_to_phones, G2pOptions, Lexicon, Phone, PhoneInventory, PhoneSequence, SIL, SP};

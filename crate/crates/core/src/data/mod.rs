//! Feature extraction, manifests and the synthetic corpus.

pub mod dsp;
pub mod manifest;
pub mod mel;
pub mod synthetic;
pub mod variance;

pub use manifest::{load_manifest, write_manifest, Registry, Utterance};
pub use mel::{compute_mel, MelConfig, MelSpectrogram};
pub use synthetic::{generate_synthetic_corpus, CorpusInfo, EmotionModulation, SyntheticCorpusSpec};
pub use variance::{broadcast_by_duration, frame_energy, phone_average};

//! Deterministic synthetic bilingual emotional corpus.
//!
//! Each frame of a generated log-mel is `energy_scale · [pitch ‖ band]`:
//! the first `pitch_bins` bins hold a unit-norm Gaussian bump whose centre
//! encodes log-F0, the rest hold a band pattern keyed to the phoneme symbol
//! plus a small speaker colouring. Because the pitch bump always has the
//! same norm, frame energy scales exactly with the emotion's energy factor.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{write_manifest, Registry, Utterance};
use super::mel::{MelConfig, MelSpectrogram};
use super::variance::{broadcast_by_duration, frame_energy, phone_average};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, Lexicon, PhonemeInventory};
use crate::seed::mix_seeds;
use crate::ssl::synth_stack;
use crate::tensor_io::{atomic_write, FeatureTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionModulation {
    pub name: String,
    pub pitch_offset: f64,
    pub energy_scale: f64,
    pub duration_scale: f64,
}

impl EmotionModulation {
    pub fn new(name: &str, pitch_offset: f64, energy_scale: f64, duration_scale: f64) -> Self {
        Self {
            name: name.into(),
            pitch_offset,
            energy_scale,
            duration_scale,
        }
    }

    pub fn neutral() -> Self {
        Self::new("neutral", 0.0, 1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_speakers_per_language: u32,
    pub phoneme_inventories: Vec<Vec<String>>,
    pub emotion_set: Vec<EmotionModulation>,
    /// Emotions cycle through `emotion_set` across a speaker's utterances.
    pub utterances_per_speaker: usize,
    /// Extra labelled utterances per speaker written to `heldout.jsonl`.
    pub heldout_per_speaker: usize,
    pub seed: u64,
    /// Probability that a training utterance keeps its label, per language.
    pub labeled_fraction: Vec<f64>,
    pub words_per_utterance: [usize; 2],
    pub lexicon_size: usize,
    pub pitch_bins: usize,
    pub ssl_layers: usize,
    pub ssl_dim: usize,
    pub mel: MelConfig,
}

fn symbols(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers_per_language: 2,
            phoneme_inventories: vec![
                symbols(&["a", "e", "i", "o", "u", "p", "t", "k", "m", "n", "s", "l"]),
                symbols(&[
                    "aa_T1", "aa_T3", "ii_T2", "uu_T1", "oo_T4", "ph", "th", "kh", "ng", "ch", "r", "w",
                ]),
            ],
            emotion_set: vec![
                EmotionModulation::neutral(),
                EmotionModulation::new("happiness", 0.15, 1.15, 0.9),
                EmotionModulation::new("anger", 0.3, 1.3, 0.8),
                EmotionModulation::new("sadness", -0.25, 0.8, 1.25),
            ],
            utterances_per_speaker: 100,
            heldout_per_speaker: 8,
            seed: 1234,
            labeled_fraction: vec![1.0, 0.0],
            words_per_utterance: [2, 3],
            lexicon_size: 24,
            pitch_bins: 16,
            ssl_layers: crate::ssl::DEFAULT_LAYERS,
            ssl_dim: crate::ssl::DESK_DIM,
            mel: MelConfig::default(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn n_languages(&self) -> u32 {
        self.phoneme_inventories.len() as u32
    }

    pub fn n_speakers(&self) -> u32 {
        self.n_languages() * self.n_speakers_per_language
    }

    pub fn registry(&self) -> Registry {
        Registry {
            n_languages: self.n_languages(),
            n_speakers: self.n_speakers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.phoneme_inventories.len() != 2 {
            return Err(Error::Config("exactly two phoneme inventories are required".into()));
        }
        let (a, b) = (&self.phoneme_inventories[0], &self.phoneme_inventories[1]);
        if let Some(s) = a.iter().find(|s| b.contains(s)) {
            return Err(Error::Config(format!("phoneme inventories overlap on {s:?}")));
        }
        if self.labeled_fraction.len() != self.phoneme_inventories.len() {
            return Err(Error::Config("one labeled_fraction per language required".into()));
        }
        if self.emotion_set.is_empty() {
            return Err(Error::Config("emotion_set is empty".into()));
        }
        if self.pitch_bins < 2 || self.pitch_bins >= self.mel.n_mels {
            return Err(Error::Config("pitch_bins must leave room for phoneme bands".into()));
        }
        let [lo, hi] = self.words_per_utterance;
        if lo == 0 || lo > hi {
            return Err(Error::Config("words_per_utterance must be 1 <= min <= max".into()));
        }
        if self.n_speakers_per_language == 0 || self.lexicon_size == 0 {
            return Err(Error::Config("need at least one speaker and one word".into()));
        }
        Ok(())
    }

    pub fn speaker_id(&self, language: u32, index: u32) -> u32 {
        language * self.n_speakers_per_language + index
    }

    pub fn speaker_language(&self, speaker: u32) -> u32 {
        speaker / self.n_speakers_per_language
    }

    /// Base log-F0 of a speaker, spread over [4.6, 5.2].
    pub fn speaker_base_pitch(&self, speaker: u32) -> f64 {
        let n = self.n_speakers().max(2) - 1;
        4.6 + 0.6 * speaker.min(n) as f64 / n as f64
    }
}

fn symbol_seed(tag: &str, language: u32, symbol: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(language.to_le_bytes());
    h.update(symbol.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Fixed per-phoneme properties.
#[derive(Debug, Clone)]
struct PhonemeProfile {
    band: Vec<f64>,
    base_duration: usize,
    pitch_shift: f64,
}

fn gaussian(bin: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((bin - centre) / width).powi(2)).exp()
}

fn phoneme_profile(spec: &SyntheticCorpusSpec, language: u32, symbol: &str) -> PhonemeProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(symbol_seed("phoneme", language, symbol));
    let width = spec.mel.n_mels - spec.pitch_bins;
    let mut band = vec![0.2; width];
    for _ in 0..2 {
        let centre = rng.random_range(0.0..width as f64);
        let amp = rng.random_range(1.0..2.0);
        let sigma = rng.random_range(1.5..3.0);
        for (b, v) in band.iter_mut().enumerate() {
            *v += amp * gaussian(b as f64, centre, sigma);
        }
    }
    PhonemeProfile {
        band,
        base_duration: rng.random_range(3..=6),
        pitch_shift: rng.random_range(-0.08..0.08),
    }
}

fn speaker_colour(spec: &SyntheticCorpusSpec, speaker: u32) -> Vec<f64> {
    let width = spec.mel.n_mels - spec.pitch_bins;
    let centre = (speaker as f64 + 0.5) * width as f64 / spec.n_speakers().max(1) as f64;
    (0..width).map(|b| 0.3 * gaussian(b as f64, centre, 4.0)).collect()
}

const PITCH_LO: f64 = 4.0;
const PITCH_HI: f64 = 6.0;
const PITCH_AMPLITUDE: f64 = 2.0;

/// Bin position encoding a log-F0 value.
pub fn pitch_to_bin(log_f0: f64, pitch_bins: usize) -> f64 {
    (log_f0 - PITCH_LO) / (PITCH_HI - PITCH_LO) * (pitch_bins - 1) as f64
}

pub fn bin_to_pitch(bin: f64, pitch_bins: usize) -> f64 {
    PITCH_LO + bin / (pitch_bins - 1) as f64 * (PITCH_HI - PITCH_LO)
}

fn pitch_bump(log_f0: f64, pitch_bins: usize) -> Vec<f64> {
    let centre = pitch_to_bin(log_f0, pitch_bins);
    let raw: Vec<f64> = (0..pitch_bins).map(|b| gaussian(b as f64, centre, 1.2)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| PITCH_AMPLITUDE * v / norm).collect()
}

/// One rendered utterance before it is written to disk.
#[derive(Debug, Clone)]
pub struct RenderedUtterance {
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: Array2<f64>,
}

/// Renders a phoneme sequence for a speaker under an emotion.
pub fn render_utterance(
    spec: &SyntheticCorpusSpec,
    language: u32,
    speaker: u32,
    phonemes: &[String],
    emotion: &EmotionModulation,
) -> RenderedUtterance {
    let base = spec.speaker_base_pitch(speaker);
    let colour = speaker_colour(spec, speaker);
    let mut durations = Vec::with_capacity(phonemes.len());
    let mut frame_pitch = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, sym) in phonemes.iter().enumerate() {
        let prof = phoneme_profile(spec, language, sym);
        let d = ((prof.base_duration as f64 * emotion.duration_scale).round() as usize).max(1);
        let log_f0 = base + prof.pitch_shift - 0.015 * i as f64 + emotion.pitch_offset;
        let mut frame = pitch_bump(log_f0, spec.pitch_bins);
        frame.extend(prof.band.iter().zip(&colour).map(|(b, c)| b + c));
        frame.iter_mut().for_each(|v| *v *= emotion.energy_scale);
        durations.push(d);
        frame_pitch.extend(std::iter::repeat_n(log_f0, d));
        rows.extend(std::iter::repeat_n(frame, d));
    }
    let t_len = rows.len();
    let mel = Array2::from_shape_vec((t_len, spec.mel.n_mels), rows.into_iter().flatten().collect())
        .expect("rows have n_mels columns");
    let pitch = phone_average(&frame_pitch, &durations).expect("aligned by construction");
    let energy = phone_average(&frame_energy(&mel), &durations).expect("aligned by construction");
    RenderedUtterance {
        phonemes: phonemes.to_vec(),
        durations,
        pitch,
        energy,
        mel,
    }
}

fn make_lexicon(spec: &SyntheticCorpusSpec, language: u32, rng: &mut ChaCha8Rng) -> Lexicon {
    let inv = &spec.phoneme_inventories[language as usize];
    let is_vowel = |s: &str| {
        let head = s.chars().next().unwrap_or(' ');
        "aeiou".contains(head)
    };
    let vowels: Vec<&String> = inv.iter().filter(|s| is_vowel(s)).collect();
    let consonants: Vec<&String> = inv.iter().filter(|s| !is_vowel(s)).collect();
    let (vowels, consonants) = if vowels.is_empty() || consonants.is_empty() {
        (inv.iter().collect(), inv.iter().collect())
    } else {
        (vowels, consonants)
    };
    let mut lex = Lexicon::default();
    let mut attempts = 0;
    while lex.entries.len() < spec.lexicon_size && attempts < 100 * spec.lexicon_size {
        attempts += 1;
        let syllables = rng.random_range(1..=2);
        let mut phones = Vec::new();
        for _ in 0..syllables {
            phones.push((*consonants.choose(rng).unwrap()).clone());
            phones.push((*vowels.choose(rng).unwrap()).clone());
            if rng.random_bool(0.3) {
                phones.push((*consonants.choose(rng).unwrap()).clone());
            }
        }
        let word: String = phones.iter().map(|p| p.replace('_', "")).collect();
        lex.entries.entry(word).or_insert(phones);
    }
    lex
}

/// Builds the frontend (inventories and lexicons) described by a spec.
pub fn corpus_frontend(spec: &SyntheticCorpusSpec) -> Result<Frontend> {
    let mut inventories = Vec::new();
    let mut lexicons = Vec::new();
    for l in 0..spec.n_languages() {
        inventories.push(PhonemeInventory::new(l, spec.phoneme_inventories[l as usize].clone())?);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[spec.seed, 0x1E71C0, l as u64]));
        lexicons.push(make_lexicon(spec, l, &mut rng));
    }
    Frontend::new(inventories, lexicons)
}

/// Metadata written next to the manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub spec: SyntheticCorpusSpec,
    pub registry: Registry,
    pub emotions: Vec<String>,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl CorpusInfo {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("corpus.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `manifest.jsonl`, `heldout.jsonl`, `text.tsv`, `corpus.json`, the
/// frontend files and `mel/`, `ssl/` feature files under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: impl AsRef<Path>) -> Result<CorpusInfo> {
    spec.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("mel")).map_err(|e| Error::io(out, e))?;
    fs::create_dir_all(out.join("ssl")).map_err(|e| Error::io(out, e))?;
    let frontend = corpus_frontend(spec)?;
    frontend.save_dir(out)?;

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut texts = String::new();
    let n_emotions = spec.emotion_set.len();
    for l in 0..spec.n_languages() {
        let words: Vec<(&String, &Vec<String>)> = frontend.lexicon(l)?.entries.iter().collect();
        for s in 0..spec.n_speakers_per_language {
            let speaker = spec.speaker_id(l, s);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[spec.seed, l as u64, s as u64]));
            let total = spec.utterances_per_speaker + spec.heldout_per_speaker;
            for k in 0..total {
                let is_heldout = k >= spec.utterances_per_speaker;
                let idx = if is_heldout { k - spec.utterances_per_speaker } else { k };
                let emotion = idx % n_emotions;
                let n_words = rng.random_range(spec.words_per_utterance[0]..=spec.words_per_utterance[1]);
                let chosen: Vec<_> = (0..n_words).map(|_| *words.choose(&mut rng).unwrap()).collect();
                let text = chosen.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ");
                let phonemes: Vec<String> = chosen.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
                let labeled_draw: f64 = rng.random();
                let utt_id = if is_heldout {
                    format!("L{l}_S{speaker:02}_H{idx:04}")
                } else {
                    format!("L{l}_S{speaker:02}_{idx:04}")
                };
                let r = render_utterance(spec, l, speaker, &phonemes, &spec.emotion_set[emotion]);
                let mel_rel = format!("mel/{utt_id}.mel");
                let ssl_rel = format!("ssl/{utt_id}.ssl");
                FeatureTensor::from_matrix(&r.mel).write(out.join(&mel_rel))?;
                let mel = MelSpectrogram::new(r.mel.clone(), spec.mel.clone())?;
                synth_stack(&mel, spec.ssl_layers, spec.ssl_dim, spec.seed)?.save(out.join(&ssl_rel))?;
                let labeled = is_heldout || labeled_draw < spec.labeled_fraction[l as usize];
                let utt = Utterance {
                    utt_id: utt_id.clone(),
                    phonemes: r.phonemes,
                    durations: r.durations,
                    pitch: r.pitch,
                    energy: r.energy,
                    language_id: l,
                    speaker_id: speaker,
                    emotion_label: labeled.then_some(emotion as u32),
                    mel_path: mel_rel,
                    ssl_path: ssl_rel,
                };
                texts.push_str(&format!("{utt_id}\t{text}\n"));
                if is_heldout {
                    heldout.push(utt);
                } else {
                    train.push(utt);
                }
            }
        }
    }
    write_manifest(out.join("manifest.jsonl"), &train)?;
    write_manifest(out.join("heldout.jsonl"), &heldout)?;
    atomic_write(&out.join("text.tsv"), texts.as_bytes())?;
    let info = CorpusInfo {
        spec: spec.clone(),
        registry: spec.registry(),
        emotions: spec.emotion_set.iter().map(|e| e.name.clone()).collect(),
        n_train: train.len(),
        n_heldout: heldout.len(),
    };
    atomic_write(
        &out.join("corpus.json"),
        serde_json::to_string_pretty(&info)?.as_bytes(),
    )?;
    Ok(info)
}

/// Reads `text.tsv` into `(utt_id, text)` pairs.
pub fn load_texts(dir: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = dir.as_ref().join("text.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

/// Helper for tests and reports: per-frame log-F0 track implied by targets.
pub fn frame_pitch(utt: &Utterance) -> Vec<f64> {
    broadcast_by_duration(&utt.pitch, &utt.durations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            utterances_per_speaker: 2,
            heldout_per_speaker: 1,
            n_speakers_per_language: 2,
            ssl_layers: 4,
            ssl_dim: 3,
            ..SyntheticCorpusSpec::default()
        }
    }

    #[test]
    fn counts() {
        let dir = tempfile::tempdir().unwrap();
        let info = generate_synthetic_corpus(&small_spec(), dir.path()).unwrap();
        assert_eq!(info.n_train, 8);
        assert_eq!(info.n_heldout, 4);
        let utts = super::super::load_manifest(dir.path().join("manifest.jsonl"), Some(&info.registry)).unwrap();
        assert_eq!(utts.len(), 8);
    }

    #[test]
    fn overlapping_inventories_fail() {
        let mut spec = small_spec();
        spec.phoneme_inventories[1].push("a".into());
        assert!(matches!(
            generate_synthetic_corpus(&spec, tempfile::tempdir().unwrap().path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn emotion_offsets_are_exact() {
        let spec = SyntheticCorpusSpec::default();
        let phones: Vec<String> = ["p", "a", "t", "i", "k", "o"].iter().map(|s| s.to_string()).collect();
        let neutral = render_utterance(&spec, 0, 1, &phones, &spec.emotion_set[0]);
        let anger = render_utterance(&spec, 0, 1, &phones, &spec.emotion_set[2]);
        assert_eq!(spec.emotion_set[2].name, "anger");
        for (a, n) in anger.pitch.iter().zip(&neutral.pitch) {
            assert!((a - n - 0.3).abs() < 1e-12);
        }
        for (a, n) in anger.energy.iter().zip(&neutral.energy) {
            assert!((a / n - 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn pitch_bin_mapping_inverts() {
        for v in [4.2, 4.9, 5.55] {
            assert!((bin_to_pitch(pitch_to_bin(v, 16), 16) - v).abs() < 1e-12);
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b, c) = (
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
        );
        generate_synthetic_corpus(&small_spec(), a.path()).unwrap();
        generate_synthetic_corpus(&small_spec(), b.path()).unwrap();
        let other = SyntheticCorpusSpec {
            seed: 99,
            ..small_spec()
        };
        generate_synthetic_corpus(&other, c.path()).unwrap();
        let ta = tree(a.path());
        assert!(ta.len() > 20);
        assert_eq!(ta, tree(b.path()));
        assert_ne!(ta, tree(c.path()));
    }
}

//! Line-delimited JSON utterance manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{atomic_write, read_dims};

/// One manifest record. Feature paths may be relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub language_id: u32,
    pub speaker_id: u32,
    #[serde(default)]
    pub emotion_label: Option<u32>,
    pub mel_path: String,
    pub ssl_path: String,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.emotion_label.is_some()
    }

    fn check_lengths(&self) -> std::result::Result<(), String> {
        let n = self.phonemes.len();
        if self.durations.len() != n || self.pitch.len() != n || self.energy.len() != n {
            return Err(format!(
                "length mismatch: {} phonemes, {} durations, {} pitch, {} energy",
                n,
                self.durations.len(),
                self.pitch.len(),
                self.energy.len()
            ));
        }
        Ok(())
    }
}

/// Known language and speaker id ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub n_languages: u32,
    pub n_speakers: u32,
}

pub fn write_manifest(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let mut text = String::new();
    for u in utterances {
        text.push_str(&serde_json::to_string(u)?);
        text.push('\n');
    }
    atomic_write(path.as_ref(), text.as_bytes())
}

fn resolve(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        base.join(path).to_string_lossy().into_owned()
    }
}

/// Loads and validates a manifest. Relative feature paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>, registry: Option<&Registry>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut u: Utterance = serde_json::from_str(line).map_err(|e| Error::Validation {
            line: line_no,
            utt_id: "?".into(),
            reason: format!("unparsable record: {e}"),
        })?;
        let fail = |reason: String| Error::Validation {
            line: line_no,
            utt_id: u.utt_id.clone(),
            reason,
        };
        u.check_lengths().map_err(fail)?;
        if let Some(reg) = registry {
            if u.language_id >= reg.n_languages {
                return Err(Error::Registry(format!(
                    "line {line_no} ({}): language {} not registered (have {})",
                    u.utt_id, u.language_id, reg.n_languages
                )));
            }
            if u.speaker_id >= reg.n_speakers {
                return Err(Error::Registry(format!(
                    "line {line_no} ({}): speaker {} not registered (have {})",
                    u.utt_id, u.speaker_id, reg.n_speakers
                )));
            }
        }
        u.mel_path = resolve(&base, &u.mel_path);
        u.ssl_path = resolve(&base, &u.ssl_path);
        let dims = read_dims(&u.mel_path)?;
        let frames = dims.first().copied().unwrap_or(0);
        if dims.len() != 2 || frames != u.n_frames() {
            return Err(fail(format!(
                "durations sum to {} but mel {} has dims {dims:?}",
                u.n_frames(),
                u.mel_path
            )));
        }
        out.push(u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::FeatureTensor;

    fn utt(id: &str, durations: Vec<usize>, label: Option<u32>) -> Utterance {
        let n = durations.len();
        Utterance {
            utt_id: id.into(),
            phonemes: vec!["a".into(); n],
            durations,
            pitch: vec![5.0; n],
            energy: vec![1.0; n],
            language_id: 0,
            speaker_id: 1,
            emotion_label: label,
            mel_path: format!("mel/{id}.mel"),
            ssl_path: format!("ssl/{id}.ssl"),
        }
    }

    fn write_mel(dir: &Path, id: &str, frames: usize) {
        FeatureTensor::new(vec![frames, 4], vec![0.0; frames * 4])
            .unwrap()
            .write(dir.join(format!("mel/{id}.mel")))
            .unwrap();
    }

    #[test]
    fn roundtrip_preserves_order_and_optional_labels() {
        let dir = tempfile::tempdir().unwrap();
        let utts = vec![
            utt("u0", vec![2, 3], Some(1)),
            utt("u1", vec![1], None),
            utt("u2", vec![4, 0, 1], Some(0)),
        ];
        for u in &utts {
            write_mel(dir.path(), &u.utt_id, u.n_frames());
        }
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &utts).unwrap();
        let reg = Registry {
            n_languages: 2,
            n_speakers: 4,
        };
        let back = load_manifest(&path, Some(&reg)).unwrap();
        assert_eq!(back.len(), 3);
        let ids: Vec<_> = back.iter().map(|u| u.utt_id.as_str()).collect();
        assert_eq!(ids, ["u0", "u1", "u2"]);
        assert_eq!(back[1].emotion_label, None);
        assert!(back[0].mel_path.ends_with("mel/u0.mel"));
    }

    #[test]
    fn missing_label_field_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write_mel(dir.path(), "x", 2);
        let line = r#"{"utt_id":"x","phonemes":["a"],"durations":[2],"pitch":[0.0],"energy":[1.0],"language_id":0,"speaker_id":0,"mel_path":"mel/x.mel","ssl_path":"ssl/x.ssl"}"#;
        let path = dir.path().join("m.jsonl");
        fs::write(&path, format!("{line}\n")).unwrap();
        let back = load_manifest(&path, None).unwrap();
        assert!(!back[0].is_labeled());
    }

    #[test]
    fn duration_mismatch_names_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let good = utt("good", vec![2], None);
        let bad = utt("bad_one", vec![2, 2], None);
        write_mel(dir.path(), "good", 2);
        write_mel(dir.path(), "bad_one", 5);
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[good, bad]).unwrap();
        let err = load_manifest(&path, None).unwrap_err();
        match &err {
            Error::Validation { line, utt_id, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(utt_id, "bad_one");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("bad_one"));
    }

    #[test]
    fn unknown_speaker_is_a_registry_error() {
        let dir = tempfile::tempdir().unwrap();
        let u = utt("u", vec![1], None);
        write_mel(dir.path(), "u", 1);
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[u]).unwrap();
        let reg = Registry {
            n_languages: 1,
            n_speakers: 1,
        };
        assert!(matches!(load_manifest(&path, Some(&reg)), Err(Error::Registry(_))));
    }
}

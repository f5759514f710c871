//! In-memory training data: manifest records with their features, encoded
//! phoneme ids and target columns.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::acoustic::log_duration_target;
use crate::data::synthetic::CorpusInfo;
use crate::data::{load_manifest, MelConfig, Registry, Utterance};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::scalar::Scalar;
use crate::ssl::{load_stack, SslFeatureStack};
use crate::tensor_io::FeatureTensor;

#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub utt: Utterance,
    /// Global phoneme ids.
    pub ids: Vec<usize>,
    pub mel: Array2<F>,
    pub ssl: SslFeatureStack<F>,
    pub pitch: Array2<F>,
    pub energy: Array2<F>,
    pub log_durations: Array2<F>,
}

impl<F: Scalar> Sample<F> {
    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    pub dir: PathBuf,
    pub samples: Vec<Sample<F>>,
    pub frontend: Frontend,
    pub registry: Registry,
    pub emotions: Vec<String>,
    /// Present when the corpus directory carries its generation spec.
    pub mel: Option<MelConfig>,
}

fn column<F: Scalar>(v: impl IntoIterator<Item = f64>) -> Array2<F> {
    let data: Vec<F> = v.into_iter().map(F::lit).collect();
    Array2::from_shape_vec((data.len(), 1), data).expect("column")
}

impl<F: Scalar> Dataset<F> {
    /// Loads a manifest together with the frontend files and, if present,
    /// `corpus.json` from the manifest's directory. Without `corpus.json` the
    /// registry and emotion set are taken from the observed ids and labels.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let info = CorpusInfo::load(&dir).ok();
        let utts = load_manifest(manifest, info.as_ref().map(|i| &i.registry))?;
        if utts.is_empty() {
            return Err(Error::Setup(format!("{} has no utterances", manifest.display())));
        }
        let registry = match &info {
            Some(i) => i.registry,
            None => Registry {
                n_languages: utts.iter().map(|u| u.language_id).max().unwrap_or(0) + 1,
                n_speakers: utts.iter().map(|u| u.speaker_id).max().unwrap_or(0) + 1,
            },
        };
        let emotions = match &info {
            Some(i) => i.emotions.clone(),
            None => {
                let n = utts.iter().filter_map(|u| u.emotion_label).max().map_or(0, |m| m + 1);
                (0..n).map(|k| format!("emotion_{k}")).collect()
            }
        };
        let frame_rate = info.as_ref().map_or(80.0, |i| i.spec.mel.frame_rate_hz());
        let mel = info.as_ref().map(|i| i.spec.mel.clone());
        let frontend = Frontend::load_dir(&dir, registry.n_languages)?;
        let samples = utts
            .into_iter()
            .map(|u| Self::sample(&frontend, u, frame_rate))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir,
            samples,
            frontend,
            registry,
            emotions,
            mel,
        })
    }

    fn sample(frontend: &Frontend, utt: Utterance, frame_rate: f64) -> Result<Sample<F>> {
        let seq = frontend.encode_symbols(&utt.phonemes, utt.language_id)?;
        let ids = frontend.global_ids(&seq)?;
        let mel = FeatureTensor::read(&utt.mel_path)?.into_matrix::<F>()?;
        let ssl = load_stack(&utt.ssl_path, frame_rate)?;
        Ok(Sample {
            ids,
            mel,
            ssl,
            pitch: column(utt.pitch.iter().copied()),
            energy: column(utt.energy.iter().copied()),
            log_durations: column(utt.durations.iter().map(|&d| log_duration_target(d))),
            utt,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_mels(&self) -> usize {
        self.samples[0].mel.ncols()
    }

    pub fn ssl_shape(&self) -> (usize, usize) {
        let s = &self.samples[0].ssl;
        (s.n_layers(), s.dim())
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].utt.is_labeled()).collect()
    }

    /// Means of the log-duration, pitch and energy targets over all phonemes.
    pub fn target_means(&self) -> (f64, f64, f64) {
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        for s in &self.samples {
            for i in 0..s.ids.len() {
                sums.0 += s.log_durations[[i, 0]].as_f64();
                sums.1 += s.pitch[[i, 0]].as_f64();
                sums.2 += s.energy[[i, 0]].as_f64();
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        (sums.0 / n, sums.1 / n, sums.2 / n)
    }
}

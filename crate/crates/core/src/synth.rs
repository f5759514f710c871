//! Inference: zero-shot synthesis from a reference SSL stack, and
//! Griffin-Lim inversion of log-mel frames to a waveform.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{durations_from_log, EmotionEmbeddingPair};
use crate::data::dsp::{hann_window, istft, stft};
use crate::data::MelConfig;
use crate::emotion::extract_hierarchical;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::Model;
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::ssl::SslFeatureStack;
use crate::tensor_io::atomic_write;

pub const GRIFFIN_LIM_ITERS: usize = 60;

#[derive(Debug, Clone)]
pub struct SynthesisOutput<F> {
    /// `[T × n_mels]` log-mel frames with `T` the sum of `durations`.
    pub mel: Array2<F>,
    pub durations: Vec<usize>,
    pub pitch: Vec<F>,
    pub energy: Vec<F>,
    pub emotion: EmotionEmbeddingPair<F>,
}

/// Emotion embeddings of a reference stack with a seeded crop.
pub fn extract_emotion<F: Scalar>(
    model: &Model<F>,
    reference: &SslFeatureStack<F>,
    crop_seed: u64,
) -> Result<EmotionEmbeddingPair<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
    extract_hierarchical(&model.emotion, &model.store, reference, &mut rng)
}

/// Synthesises `text` in `language_id` for `speaker_id` with the emotion of
/// `reference`, which may be in any language. Uses predicted durations,
/// pitch and energy and never touches the NPC module.
pub fn synthesize<F: Scalar>(
    model: &Model<F>,
    frontend: &Frontend,
    text: &str,
    language_id: u32,
    speaker_id: u32,
    reference: &SslFeatureStack<F>,
    crop_seed: u64,
) -> Result<SynthesisOutput<F>> {
    let seq = frontend.grapheme_to_phoneme(text, language_id)?;
    let ids = frontend.global_ids(&seq)?;
    synthesize_ids(model, &ids, language_id, speaker_id, reference, crop_seed)
}

pub fn synthesize_ids<F: Scalar>(
    model: &Model<F>,
    ids: &[usize],
    language_id: u32,
    speaker_id: u32,
    reference: &SslFeatureStack<F>,
    crop_seed: u64,
) -> Result<SynthesisOutput<F>> {
    let emotion = extract_emotion(model, reference, crop_seed)?;
    let g = Graph::eval(&model.store);
    let shallow = g.constant(emotion.shallow.clone().insert_axis(ndarray::Axis(0)));
    let deep = g.constant(emotion.deep.clone().insert_axis(ndarray::Axis(0)));
    let am = &model.acoustic;
    let hidden = am.encode_text(&g, ids, language_id as usize, speaker_id as usize, deep)?;
    let var = am.predict_variances(&g, hidden);
    let adapted = am.add_variance_embeddings(&g, hidden, var.pitch, var.energy);
    let log_d: Vec<F> = g.value(var.log_durations).iter().copied().collect();
    let durations = durations_from_log(&log_d);
    let frames = am.length_regulate(&g, adapted, &durations);
    let cond = g.concat_cols(&[shallow, deep]);
    let mel = g.to_array(am.decode_mel(&g, frames, shallow, cond));
    let column = |v| g.value(v).iter().copied().collect::<Vec<F>>();
    Ok(SynthesisOutput {
        pitch: column(var.pitch),
        energy: column(var.energy),
        mel,
        durations,
        emotion,
    })
}

/// Waveform from log-mel frames: the mel magnitudes are mapped back to
/// linear-frequency magnitudes with the filterbank pseudo-inverse, then the
/// phase is estimated by `n_iters` Griffin-Lim iterations from zero phase.
/// Returns `(T - 1) * hop` samples.
pub fn griffin_lim<F: Scalar>(mel: &Array2<F>, cfg: &MelConfig, n_iters: usize) -> Result<Vec<F>> {
    cfg.validate()?;
    if mel.ncols() != cfg.n_mels || mel.nrows() < 2 {
        return Err(Error::Shape(format!(
            "mel {:?} does not fit {} bins with at least two frames",
            mel.dim(),
            cfg.n_mels
        )));
    }
    let hop = cfg.hop_samples()?;
    let n_fft = cfg.win_samples()?;
    let fb = cfg.filterbank::<f64>()?;
    let fbm = DMatrix::from_fn(fb.nrows(), fb.ncols(), |r, c| fb[[r, c]]);
    let pinv = fbm
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Config(format!("filterbank pseudo-inverse: {e}")))?;
    let (t_len, n_mels) = mel.dim();
    let bins = n_fft / 2 + 1;
    let mut mag = Array2::<F>::zeros((t_len, bins));
    for t in 0..t_len {
        let m: Vec<f64> = mel.row(t).iter().map(|v| v.as_f64().exp()).collect();
        for b in 0..bins {
            let v: f64 = (0..n_mels).map(|k| pinv[(b, k)] * m[k]).sum();
            mag[[t, b]] = F::lit(v.max(0.0));
        }
    }
    let window = hann_window::<F>(n_fft);
    let mut spec = mag.mapv(|m| Complex::new(m, F::zero()));
    let mut signal = istft(&spec, n_fft, hop, &window);
    for _ in 0..n_iters {
        let est = stft(&signal, n_fft, hop, &window);
        for ((s, e), &m) in spec.iter_mut().zip(est.iter()).zip(mag.iter()) {
            let n = e.norm();
            *s = if n > F::lit(1e-12) {
                e * (m / n)
            } else {
                Complex::new(m, F::zero())
            };
        }
        signal = istft(&spec, n_fft, hop, &window);
    }
    Ok(signal)
}

/// 16-bit PCM mono WAV, clipped to [-1, 1].
pub fn write_wav<F: Scalar>(path: impl AsRef<Path>, samples: &[F], sample_rate_hz: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::Format(e.to_string()))?;
        for &s in samples {
            let v = (s.as_f64().clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::Format(e.to_string()))?;
    }
    atomic_write(path, &buf.into_inner())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let rate = r.spec().sample_rate;
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((samples, rate))
}

/// Mean over frames of the cosine between matching rows.
pub fn mean_frame_cosine<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    let t = a.nrows().min(b.nrows());
    let cos = |x: Array1<f64>, y: Array1<f64>| x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt()).max(1e-300);
    (0..t)
        .map(|i| cos(a.row(i).mapv(|v| v.as_f64()), b.row(i).mapv(|v| v.as_f64())))
        .sum::<f64>()
        / t as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_mel;
    use num_rational::Ratio;

    fn small_cfg() -> MelConfig {
        MelConfig {
            sample_rate_hz: 8000,
            n_mels: 40,
            frame_shift_ms: Ratio::from_integer(8),
            frame_length_ms: Ratio::from_integer(32),
            fmin_hz: Ratio::from_integer(0),
            fmax_hz: Ratio::from_integer(4000),
            ..MelConfig::default()
        }
    }

    fn chirp(n: usize, rate: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                0.3 * (2.0 * std::f64::consts::PI * (220.0 * t + 300.0 * t * t)).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * 660.0 * t).sin()
            })
            .collect()
    }

    #[test]
    fn output_length_follows_frames() {
        let cfg = small_cfg();
        let mel = Array2::<f64>::from_elem((10, 40), -3.0);
        let y = griffin_lim(&mel, &cfg, 2).unwrap();
        assert_eq!(y.len(), 9 * cfg.hop_samples().unwrap());
    }

    #[test]
    fn floor_mel_is_silent() {
        let cfg = small_cfg();
        let mel = Array2::<f64>::from_elem((12, 40), cfg.log_floor_value());
        let y = griffin_lim(&mel, &cfg, GRIFFIN_LIM_ITERS).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn roundtrip_keeps_mel_shape() {
        let cfg = small_cfg();
        let x = chirp(8000, 8000.0);
        let m1 = compute_mel(&x, &cfg).unwrap().frames;
        let y = griffin_lim(&m1, &cfg, GRIFFIN_LIM_ITERS).unwrap();
        let m2 = compute_mel(&y, &cfg).unwrap().frames;
        let c = mean_frame_cosine(&m1, &m2);
        assert!(c >= 0.9, "cosine {c}");
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &[0.0f32, 0.5, -1.0, 2.0], 16000).unwrap();
        let (s, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(s.len(), 4);
        assert!((s[1] - 0.5).abs() < 1e-4 && s[2] == -1.0 && s[3] == 1.0);
    }
}

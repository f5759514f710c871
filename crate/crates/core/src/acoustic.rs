//! Non-autoregressive acoustic backbone: conformer text encoder, variance
//! adaptor with length regulator, and a conformer decoder whose norms are
//! conditioned on the emotion embedding pair.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, ConformerBlock, ConformerConfig, Conv1d, Embedding, Graph, LayerNorm, Linear, ParamStore,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub predictor_kernel: usize,
    pub predictor_channels: usize,
    /// Phoneme table size including the padding row 0.
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_languages: usize,
    pub n_mels: usize,
    /// Width of each of the shallow and deep embeddings.
    pub emotion_dim: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            n_heads: 2,
            ff_dim: 256,
            conv_kernel: 7,
            predictor_kernel: 3,
            predictor_channels: 64,
            vocab_size: 1,
            n_speakers: 1,
            n_languages: 1,
            n_mels: 80,
            emotion_dim: 64,
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.n_speakers == 0 || self.n_languages == 0 || self.n_mels == 0 {
            return Err(Error::Config(
                "vocabulary, registry and n_mels must be non-empty".into(),
            ));
        }
        if self.conv_kernel == 0 || self.predictor_kernel == 0 || self.emotion_dim == 0 {
            return Err(Error::Config("kernel sizes and emotion_dim must be positive".into()));
        }
        Ok(())
    }

    fn conformer(&self) -> ConformerConfig {
        ConformerConfig {
            dim: self.hidden_dim,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            conv_kernel: self.conv_kernel,
            dropout: self.dropout,
        }
    }
}

/// Shallow and deep emotion vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbeddingPair<F> {
    pub shallow: Array1<F>,
    pub deep: Array1<F>,
}

impl<F: Scalar> EmotionEmbeddingPair<F> {
    pub fn new(shallow: Array1<F>, deep: Array1<F>) -> Result<Self> {
        if shallow.len() != deep.len() {
            return Err(Error::Shape(format!(
                "shallow has {} dims, deep has {}",
                shallow.len(),
                deep.len()
            )));
        }
        if shallow.iter().chain(deep.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("emotion embedding is not finite".into()));
        }
        Ok(Self { shallow, deep })
    }

    /// `[shallow ‖ deep]`, the conditioning vector of the decoder norms.
    pub fn condition(&self) -> Array1<F> {
        self.shallow.iter().chain(self.deep.iter()).copied().collect()
    }
}

/// Per-phoneme variance predictions, each `[N × 1]`.
#[derive(Debug, Clone, Copy)]
pub struct VariancePrediction {
    pub log_durations: Var,
    pub pitch: Var,
    pub energy: Var,
}

/// Two conv + ReLU + norm layers and a scalar projection.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    out: Linear,
}

impl VariancePredictor {
    fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &BackboneConfig) -> Self {
        let (h, c) = (cfg.hidden_dim, cfg.predictor_channels);
        let offsets = Conv1d::centered_offsets(cfg.predictor_kernel);
        Self {
            conv1: Conv1d::new(store, rng, &format!("{name}.conv1"), h, c, offsets.clone(), true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            conv2: Conv1d::new(store, rng, &format!("{name}.conv2"), c, c, offsets, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            out: Linear::new(store, rng, &format!("{name}.out"), c, 1, true),
        }
    }

    fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, dropout: f64) -> Var {
        let h = self.norm1.forward(g, g.relu(self.conv1.forward(g, x)));
        let h = g.dropout(h, dropout);
        let h = self.norm2.forward(g, g.relu(self.conv2.forward(g, h)));
        let h = g.dropout(h, dropout);
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub cfg: BackboneConfig,
    phoneme_emb: Embedding,
    language_emb: Embedding,
    speaker_lut: Embedding,
    deep_proj: Linear,
    shallow_proj: Linear,
    encoder: Vec<ConformerBlock>,
    duration_head: VariancePredictor,
    pitch_head: VariancePredictor,
    energy_head: VariancePredictor,
    pitch_embed: Linear,
    energy_embed: Linear,
    decoder: Vec<ConformerBlock>,
    mel_out: Linear,
}

impl AcousticModel {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let e = cfg.emotion_dim;
        let std = 1.0 / (h as f64).sqrt();
        let conf = cfg.conformer();
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg: cfg.clone(),
            phoneme_emb: Embedding::new(store, rng, &n("phoneme_emb"), cfg.vocab_size, h, std),
            language_emb: Embedding::new(store, rng, &n("language_emb"), cfg.n_languages, h, std),
            speaker_lut: Embedding::new(store, rng, &n("speaker_lut"), cfg.n_speakers, h, std),
            deep_proj: Linear::new(store, rng, &n("deep_proj"), e, h, true),
            shallow_proj: Linear::new(store, rng, &n("shallow_proj"), e, h, true),
            encoder: (0..cfg.n_encoder_blocks)
                .map(|i| ConformerBlock::new(store, rng, &n(&format!("encoder.{i}")), &conf, None))
                .collect(),
            duration_head: VariancePredictor::new(store, rng, &n("duration"), cfg),
            pitch_head: VariancePredictor::new(store, rng, &n("pitch"), cfg),
            energy_head: VariancePredictor::new(store, rng, &n("energy"), cfg),
            pitch_embed: Linear::new(store, rng, &n("pitch_embed"), 1, h, true),
            energy_embed: Linear::new(store, rng, &n("energy_embed"), 1, h, true),
            decoder: (0..cfg.n_decoder_blocks)
                .map(|i| ConformerBlock::new(store, rng, &n(&format!("decoder.{i}")), &conf, Some(2 * e)))
                .collect(),
            mel_out: Linear::new(store, rng, &n("mel_out"), h, cfg.n_mels, true),
        })
    }

    fn check_registry(&self, language_id: usize, speaker_id: usize) -> Result<()> {
        if language_id >= self.cfg.n_languages {
            return Err(Error::Registry(format!(
                "language {language_id} not in model (have {})",
                self.cfg.n_languages
            )));
        }
        if speaker_id >= self.cfg.n_speakers {
            return Err(Error::Registry(format!(
                "speaker {speaker_id} not in model (have {})",
                self.cfg.n_speakers
            )));
        }
        Ok(())
    }

    /// Phoneme and language embeddings through the encoder blocks, then the
    /// projected deep emotion embedding and the speaker embedding are added
    /// to every row. `ids` are global phoneme ids; `deep` is `[1 × E]`.
    pub fn encode_text<F: Scalar>(
        &self,
        g: &Graph<'_, F>,
        ids: &[usize],
        language_id: usize,
        speaker_id: usize,
        deep: Var,
    ) -> Result<Var> {
        self.check_registry(language_id, speaker_id)?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty phoneme sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i == 0 || i >= self.cfg.vocab_size) {
            return Err(Error::Encoding(format!(
                "phoneme id {bad} outside 1..{}",
                self.cfg.vocab_size
            )));
        }
        let x = self.phoneme_emb.forward(g, ids);
        let x = g.add_row(x, self.language_emb.forward(g, &[language_id]));
        let x = g.add_const(x, &sinusoidal_positions(ids.len(), self.cfg.hidden_dim));
        let mut x = g.dropout(x, self.cfg.dropout);
        for block in &self.encoder {
            x = block.forward(g, x, None);
        }
        let x = g.add_row(x, self.deep_proj.forward(g, deep));
        Ok(g.add_row(x, self.speaker_lut.forward(g, &[speaker_id])))
    }

    pub fn predict_variances<F: Scalar>(&self, g: &Graph<'_, F>, hidden: Var) -> VariancePrediction {
        let p = self.cfg.dropout;
        VariancePrediction {
            log_durations: self.duration_head.forward(g, hidden, p),
            pitch: self.pitch_head.forward(g, hidden, p),
            energy: self.energy_head.forward(g, hidden, p),
        }
    }

    /// Adds the pitch and energy embeddings (`[N × 1]` each) to the hidden
    /// sequence. Training passes ground truth, inference the predictions.
    pub fn add_variance_embeddings<F: Scalar>(&self, g: &Graph<'_, F>, hidden: Var, pitch: Var, energy: Var) -> Var {
        let h = g.add(hidden, self.pitch_embed.forward(g, pitch));
        g.add(h, self.energy_embed.forward(g, energy))
    }

    /// Frame-level expansion inside the graph.
    pub fn length_regulate<F: Scalar>(&self, g: &Graph<'_, F>, hidden: Var, durations: &[usize]) -> Var {
        g.gather(hidden, expansion_index(durations))
    }

    /// Projected shallow embedding added to every frame, decoder blocks with
    /// conditional norms over `cond` (`[1 × 2E]`), then the mel projection.
    pub fn decode_mel<F: Scalar>(&self, g: &Graph<'_, F>, frames: Var, shallow: Var, cond: Var) -> Var {
        let (t_len, _) = g.shape(frames);
        let x = g.add_row(frames, self.shallow_proj.forward(g, shallow));
        let x = g.add_const(x, &sinusoidal_positions(t_len, self.cfg.hidden_dim));
        let mut x = g.dropout(x, self.cfg.dropout);
        for block in &self.decoder {
            x = block.forward(g, x, Some(cond));
        }
        self.mel_out.forward(g, x)
    }

    /// Sets the output biases of the three variance heads, typically to the
    /// corpus means of their targets.
    pub fn init_variance_biases<F: Scalar>(
        &self,
        store: &mut ParamStore<F>,
        log_duration: f64,
        pitch: f64,
        energy: f64,
    ) {
        for (head, v) in [
            (&self.duration_head, log_duration),
            (&self.pitch_head, pitch),
            (&self.energy_head, energy),
        ] {
            if let Some(b) = head.out.b {
                store.get_mut(b).fill(F::lit(v));
            }
        }
    }

    /// Parameter name prefixes of the groups that must all receive gradient.
    pub fn parameter_groups(prefix: &str) -> Vec<String> {
        [
            "phoneme_emb",
            "language_emb",
            "speaker_lut",
            "deep_proj",
            "shallow_proj",
            "encoder",
            "duration",
            "pitch.",
            "energy.",
            "pitch_embed",
            "energy_embed",
            "decoder",
            "mel_out",
        ]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
    }
}

/// Row index for expanding phoneme `i` into `durations[i]` frames.
pub fn expansion_index(durations: &[usize]) -> Vec<Option<usize>> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(Some(i), d))
        .collect()
}

/// Repeats row `i` of `hidden` `durations[i]` times.
pub fn length_regulate<F: Scalar>(hidden: &Array2<F>, durations: &[i64]) -> Result<Array2<F>> {
    if durations.len() != hidden.nrows() {
        return Err(Error::Shape(format!(
            "{} durations for {} rows",
            durations.len(),
            hidden.nrows()
        )));
    }
    if let Some(&d) = durations.iter().find(|&&d| d < 0) {
        return Err(Error::InvalidInput(format!("negative duration {d}")));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let mut out = Array2::zeros((total, hidden.ncols()));
    let mut t = 0;
    for (row, &d) in hidden.rows().into_iter().zip(durations) {
        for _ in 0..d {
            out.row_mut(t).assign(&row);
            t += 1;
        }
    }
    Ok(out)
}

/// Inference durations: `round(exp(log_d))`, at least one frame.
pub fn durations_from_log<F: Scalar>(log_durations: &[F]) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&v| {
            let d = v.as_f64().exp().round();
            if d.is_finite() && d >= 1.0 {
                d.min(1e6) as usize
            } else {
                1
            }
        })
        .collect()
}

/// Duration training target in the log domain.
pub fn log_duration_target(d: usize) -> f64 {
    (d.max(1) as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CondLayerNorm, LN_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            hidden_dim: 16,
            n_heads: 2,
            ff_dim: 32,
            conv_kernel: 3,
            predictor_channels: 8,
            vocab_size: 10,
            n_speakers: 3,
            n_languages: 2,
            n_mels: 6,
            emotion_dim: 4,
            ..BackboneConfig::default()
        }
    }

    fn build() -> (ParamStore<f64>, AcousticModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = AcousticModel::new(&mut store, &mut rng, "am", &tiny_cfg()).unwrap();
        (store, m)
    }

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn encoder_shape_and_speaker_injection() {
        let (store, m) = build();
        let g = Graph::eval(&store);
        let deep = g.constant(row(&[0.1, -0.2, 0.3, 0.0]));
        let a = m.encode_text(&g, &[1, 2, 3, 4, 5], 0, 0, deep).unwrap();
        let b = m.encode_text(&g, &[1, 2, 3, 4, 5], 0, 1, deep).unwrap();
        assert_eq!(g.shape(a), (5, 16));
        assert_ne!(g.to_array(a), g.to_array(b));
        assert!(matches!(m.encode_text(&g, &[1], 0, 3, deep), Err(Error::Registry(_))));
        assert!(matches!(m.encode_text(&g, &[1], 2, 0, deep), Err(Error::Registry(_))));
    }

    #[test]
    fn deep_embedding_shift_is_the_projection() {
        let (store, m) = build();
        let g = Graph::eval(&store);
        let e = [0.5, -1.0, 0.25, 2.0];
        let zero = m.encode_text(&g, &[3, 1, 4], 1, 2, g.constant(row(&[0.0; 4]))).unwrap();
        let some = m.encode_text(&g, &[3, 1, 4], 1, 2, g.constant(row(&e))).unwrap();
        let diff = &g.to_array(some) - &g.to_array(zero);
        let w = store.get(m.deep_proj.w);
        for r in diff.rows() {
            for c in 0..16 {
                let expect: f64 = (0..4).map(|k| e[k] * w[[k, c]]).sum();
                assert!((r[c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_shapes_and_teacher_forcing() {
        let (store, m) = build();
        let g = Graph::new(&store, true, 1);
        let deep = g.constant(row(&[0.0; 4]));
        let h = m.encode_text(&g, &[1, 2, 3], 0, 0, deep).unwrap();
        let v = m.predict_variances(&g, h);
        for x in [v.log_durations, v.pitch, v.energy] {
            assert_eq!(g.shape(x), (3, 1));
        }
        let pitch = g.constant(Array2::from_elem((3, 1), 5.0));
        let energy = g.constant(Array2::from_elem((3, 1), 1.0));
        let h2 = m.add_variance_embeddings(&g, h, pitch, energy);
        let frames = m.length_regulate(&g, h2, &[2, 0, 3]);
        let shallow = g.constant(row(&[0.0; 4]));
        let cond = g.constant(Array2::zeros((1, 8)));
        let mel = m.decode_mel(&g, frames, shallow, cond);
        assert_eq!(g.shape(mel), (5, 6));
        let loss = g.mean_all(mel);
        let grads = g.backward(loss);
        for head in [v.log_durations, v.pitch, v.energy] {
            assert!(grads.wrt(head).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn cln_at_init_is_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let cln = CondLayerNorm::new(&mut store, "c", 6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Array2::from_shape_fn((4, 10), |_| rng.random_range(-3.0..3.0));
            let c = Array2::from_shape_fn((1, 6), |_| rng.random_range(-3.0..3.0));
            let g = Graph::eval(&store);
            let y = g.to_array(cln.forward(&g, g.constant(x.clone()), g.constant(c)));
            for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
                let mean = xr.mean().unwrap();
                let var = xr.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                for (a, b) in xr.iter().zip(yr.iter()) {
                    assert!(((a - mean) / (var + LN_EPS).sqrt() - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cln_constant_rows_output_bias() {
        let mut store = ParamStore::<f64>::new();
        let cln = CondLayerNorm::new(&mut store, "c", 2, 3);
        *store.get_mut(cln.bias.b.unwrap()) = row(&[0.5, -1.0, 2.0]);
        let g = Graph::eval(&store);
        let y = g.to_array(cln.forward(
            &g,
            g.constant(Array2::from_elem((2, 3), 7.0)),
            g.constant(row(&[1.0, 1.0])),
        ));
        assert_eq!(y, ndarray::array![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]]);
    }

    #[test]
    fn regulate_examples() {
        let h = ndarray::array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        let out = length_regulate(&h, &[2, 0, 3]).unwrap();
        assert_eq!(out.nrows(), 5);
        assert_eq!(out.row(1), h.row(0));
        assert_eq!(out.row(2), h.row(2));
        assert!(matches!(length_regulate(&h, &[1, -1, 1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn inference_durations_are_positive() {
        assert_eq!(durations_from_log(&[-5.0f64, 0.0, 1.0986, 3.0]), vec![1, 1, 3, 20]);
        assert_eq!(log_duration_target(0), 0.0);
    }

    proptest! {
        #[test]
        fn regulated_length_is_duration_sum(durs in proptest::collection::vec(0i64..8, 1..20)) {
            let h = Array2::from_shape_fn((durs.len(), 3), |(i, j)| (i * 3 + j) as f64);
            let out = length_regulate(&h, &durs).unwrap();
            prop_assert_eq!(out.nrows() as i64, durs.iter().sum::<i64>());
            let idx = expansion_index(&durs.iter().map(|&d| d as usize).collect::<Vec<_>>());
            for (t, i) in idx.iter().enumerate() {
                prop_assert_eq!(out.row(t), h.row(i.unwrap()));
            }
        }
    }
}

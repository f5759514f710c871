//! Hierarchical emotion encoder over layered SSL features.
//!
//! The first half of the layers feeds the shallow branch, the second half
//! the deep branch. Each branch has its own softmax layer weights, its own
//! reference encoder and its own classifier head.

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::EmotionEmbeddingPair;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssl::{random_crop, SslFeatureStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Shallow,
    Deep,
}

impl LayerGroup {
    /// Zero-based layer range of the group in an `n_layers` stack.
    pub fn range(self, n_layers: usize) -> std::ops::Range<usize> {
        let half = n_layers / 2;
        match self {
            LayerGroup::Shallow => 0..half,
            LayerGroup::Deep => half..n_layers,
        }
    }
}

/// Softmax-normalised per-layer weights of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub logits: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(n: usize) -> Self {
        Self { logits: vec![0.0; n] }
    }

    pub fn weights(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

/// `Σ_ℓ w_ℓ · layers[ℓ]` over the group's layers.
pub fn weighted_layer_sum<F: Scalar>(
    stack: &SslFeatureStack<F>,
    group: LayerGroup,
    weights: &LayerWeights,
) -> Result<Array2<F>> {
    let range = group.range(stack.n_layers());
    if weights.logits.len() != range.len() {
        return Err(Error::Shape(format!(
            "{} layer weights for a group of {} layers",
            weights.logits.len(),
            range.len()
        )));
    }
    let mut out = Array2::zeros((stack.n_frames(), stack.dim()));
    for (w, l) in weights.weights().into_iter().zip(range) {
        out.scaled_add(F::lit(w), &stack.layer(l));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceEncoderConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub n_heads: usize,
    pub emotion_dim: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub crop_frames: usize,
    pub dropout: f64,
}

impl Default for ReferenceEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::ssl::DESK_DIM,
            conv_channels: 128,
            kernel_size: 5,
            n_heads: 2,
            emotion_dim: 64,
            n_layers: crate::ssl::DEFAULT_LAYERS,
            n_classes: 4,
            crop_frames: crate::ssl::DEFAULT_CROP,
            dropout: 0.0,
        }
    }
}

impl ReferenceEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || !self.n_layers.is_multiple_of(2) {
            return Err(Error::Config("n_layers must be even and at least 2".into()));
        }
        if self.n_heads == 0 || !self.conv_channels.is_multiple_of(self.n_heads) {
            return Err(Error::Config("conv_channels must be divisible by n_heads".into()));
        }
        if self.n_classes < 2 || self.crop_frames == 0 || self.emotion_dim == 0 {
            return Err(Error::Config("need >= 2 classes, a crop length and emotion_dim".into()));
        }
        Ok(())
    }
}

/// Spectral FC layers, gated convolution with a residual, self-attention
/// with a residual, an output projection and temporal mean pooling.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    fc1: Linear,
    fc2: Linear,
    conv: Conv1d,
    attn: MultiHeadAttention,
    out: Linear,
    dropout: f64,
}

impl ReferenceEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ReferenceEncoderConfig,
    ) -> Self {
        let c = cfg.conv_channels;
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), cfg.input_dim, c, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), c, c, true),
            conv: Conv1d::new(
                store,
                rng,
                &format!("{name}.conv"),
                c,
                2 * c,
                Conv1d::centered_offsets(cfg.kernel_size),
                true,
            ),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), c, cfg.n_heads),
            out: Linear::new(store, rng, &format!("{name}.out"), c, cfg.emotion_dim, true),
            dropout: cfg.dropout,
        }
    }

    /// `[T × D]` features to a `[1 × emotion_dim]` vector.
    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var) -> Var {
        let h = g.silu(self.fc1.forward(g, x));
        let h = g.dropout(g.silu(self.fc2.forward(g, h)), self.dropout);
        let h = g.add(h, g.dropout(g.glu(self.conv.forward(g, h)), self.dropout));
        let h = g.add(h, g.dropout(self.attn.forward(g, h), self.dropout));
        g.mean_rows(self.out.forward(g, h))
    }
}

#[derive(Debug, Clone)]
pub struct HierarchicalEmotionEncoder {
    pub cfg: ReferenceEncoderConfig,
    shallow_logits: ParamId,
    deep_logits: ParamId,
    shallow: ReferenceEncoder,
    deep: ReferenceEncoder,
    shallow_cls: Linear,
    deep_cls: Linear,
}

/// Branch outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct EmotionVars {
    pub shallow: Var,
    pub deep: Var,
}

impl HierarchicalEmotionEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &ReferenceEncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.n_layers / 2;
        let e = cfg.emotion_dim;
        Ok(Self {
            cfg: cfg.clone(),
            shallow_logits: store.add(format!("{prefix}.shallow_layer_logits"), Array2::zeros((1, half))),
            deep_logits: store.add(format!("{prefix}.deep_layer_logits"), Array2::zeros((1, half))),
            shallow: ReferenceEncoder::new(store, rng, &format!("{prefix}.shallow_encoder"), cfg),
            deep: ReferenceEncoder::new(store, rng, &format!("{prefix}.deep_encoder"), cfg),
            shallow_cls: Linear::new(
                store,
                rng,
                &format!("{prefix}.shallow_classifier"),
                e,
                cfg.n_classes,
                true,
            ),
            deep_cls: Linear::new(store, rng, &format!("{prefix}.deep_classifier"), e, cfg.n_classes, true),
        })
    }

    pub fn layer_weights<F: Scalar>(&self, store: &ParamStore<F>, group: LayerGroup) -> LayerWeights {
        let id = match group {
            LayerGroup::Shallow => self.shallow_logits,
            LayerGroup::Deep => self.deep_logits,
        };
        LayerWeights {
            logits: store.get(id).iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// Embeddings from per-layer `[T × D]` vars (all layers of the stack).
    pub fn encode_layers<F: Scalar>(&self, g: &Graph<'_, F>, layers: &[Var]) -> Result<EmotionVars> {
        if layers.len() != self.cfg.n_layers {
            return Err(Error::Shape(format!(
                "encoder expects {} SSL layers, got {}",
                self.cfg.n_layers,
                layers.len()
            )));
        }
        let (_, d) = g.shape(layers[0]);
        if d != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "SSL dim {d}, encoder expects {}",
                self.cfg.input_dim
            )));
        }
        let half = self.cfg.n_layers / 2;
        let sw = g.softmax_rows(g.p(self.shallow_logits));
        let dw = g.softmax_rows(g.p(self.deep_logits));
        let shallow_in = g.weighted_sum(sw, &layers[..half]);
        let deep_in = g.weighted_sum(dw, &layers[half..]);
        Ok(EmotionVars {
            shallow: self.shallow.forward(g, shallow_in),
            deep: self.deep.forward(g, deep_in),
        })
    }

    /// Embeddings of the first `valid_frames` frames of a (cropped) stack.
    pub fn encode_stack<F: Scalar>(
        &self,
        g: &Graph<'_, F>,
        stack: &SslFeatureStack<F>,
        valid_frames: usize,
    ) -> Result<EmotionVars> {
        let t = valid_frames.min(stack.n_frames()).max(1);
        let layers: Vec<Var> = stack
            .layers
            .axis_iter(Axis(0))
            .map(|l| g.constant(l.slice(s![..t, ..]).to_owned()))
            .collect();
        self.encode_layers(g, &layers)
    }

    /// Crop then encode; zero padding of short crops is left out of the
    /// encoder input.
    pub fn encode_reference<F: Scalar>(
        &self,
        g: &Graph<'_, F>,
        stack: &SslFeatureStack<F>,
        crop_rng: &mut ChaCha8Rng,
    ) -> Result<EmotionVars> {
        let crop = random_crop(stack, self.cfg.crop_frames, crop_rng);
        self.encode_stack(g, &crop.stack, crop.valid_frames)
    }

    /// `(shallow_logits, deep_logits)`, each `[1 × n_classes]`.
    pub fn classify<F: Scalar>(&self, g: &Graph<'_, F>, e: EmotionVars) -> (Var, Var) {
        (self.shallow_cls.forward(g, e.shallow), self.deep_cls.forward(g, e.deep))
    }

    /// Sum of both heads' cross-entropies, or `None` for an unlabeled sample.
    pub fn emotion_loss<F: Scalar>(&self, g: &Graph<'_, F>, e: EmotionVars, label: Option<u32>) -> Result<Option<Var>> {
        let Some(label) = label else {
            return Ok(None);
        };
        let label = label as usize;
        if label >= self.cfg.n_classes {
            return Err(Error::InvalidInput(format!(
                "emotion label {label} outside {} classes",
                self.cfg.n_classes
            )));
        }
        let (ls, ld) = self.classify(g, e);
        Ok(Some(g.add(g.cross_entropy(ls, label), g.cross_entropy(ld, label))))
    }

    pub fn classifier_prefixes(prefix: &str) -> [String; 2] {
        [
            format!("{prefix}.shallow_classifier"),
            format!("{prefix}.deep_classifier"),
        ]
    }
}

/// Evaluation-mode embedding pair for a reference stack with a seeded crop.
pub fn extract_hierarchical<F: Scalar>(
    encoder: &HierarchicalEmotionEncoder,
    store: &ParamStore<F>,
    stack: &SslFeatureStack<F>,
    crop_rng: &mut ChaCha8Rng,
) -> Result<EmotionEmbeddingPair<F>> {
    let g = Graph::eval(store);
    let e = encoder.encode_reference(&g, stack, crop_rng)?;
    let row = |v: Var| -> Array1<F> { g.value(v).row(0).to_owned() };
    EmotionEmbeddingPair::new(row(e.shallow), row(e.deep))
}

/// Cross-entropy of one logit vector, computed in f64.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - logits[label])
}

/// Semi-supervised batch loss: both heads' CE averaged over labeled
/// samples; an all-unlabeled batch gives exactly zero.
pub fn semi_supervised_ce(
    shallow_logits: &[Vec<f64>],
    deep_logits: &[Vec<f64>],
    labels: &[Option<u32>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((s, d), label) in shallow_logits.iter().zip(deep_logits).zip(labels) {
        if let Some(l) = label {
            total += cross_entropy(s, *l as usize)? + cross_entropy(d, *l as usize)?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

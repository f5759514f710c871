//! Layered self-supervised speech representations.
//!
//! Stacks are `[L × T × D]`. Real stacks come from an external extractor via
//! EMTF files (`<utt_id>.ssl`, transformer layers only, embedding output
//! excluded). [`synth_stack`] is a deterministic stand-in whose deeper
//! layers are progressively smoother in time.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::tensor_io::FeatureTensor;

pub const DEFAULT_LAYERS: usize = 24;
pub const DESK_DIM: usize = 16;
pub const DEFAULT_CROP: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SslFeatureStack<F> {
    pub layers: Array3<F>,
    pub frame_rate_hz: f64,
}

impl<F: Scalar> SslFeatureStack<F> {
    pub fn new(layers: Array3<F>, frame_rate_hz: f64) -> Result<Self> {
        let l = layers.dim().0;
        if l < 2 || !l.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "SSL stack needs an even number of layers >= 2, got {l}"
            )));
        }
        if layers.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("SSL stack contains non-finite values".into()));
        }
        Ok(Self { layers, frame_rate_hz })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.layers.dim().1
    }

    pub fn dim(&self) -> usize {
        self.layers.dim().2
    }

    /// Zero-based layer `index`.
    pub fn layer(&self, index: usize) -> ArrayView2<'_, F> {
        self.layers.index_axis(Axis(0), index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        FeatureTensor::from_array3(&self.layers).write(path)
    }
}

pub fn load_stack<F: Scalar>(path: impl AsRef<Path>, frame_rate_hz: f64) -> Result<SslFeatureStack<F>> {
    let t = FeatureTensor::read(path)?;
    if t.rank() != 3 {
        return Err(Error::Format(format!(
            "SSL stack must be rank 3, file has rank {}",
            t.rank()
        )));
    }
    SslFeatureStack::new(t.into_array3()?, frame_rate_hz)
}

/// Box-filter half-width for 1-based layer `layer`.
fn smoothing_half_width(layer: usize) -> usize {
    (layer - 1) / 3
}

/// Deterministic synthetic stack: layer `l` is a fixed random projection of
/// the mel (seeded by `seed` and `l`) followed by a moving average whose
/// width grows with depth.
pub fn synth_stack<F: Scalar>(
    mel: &MelSpectrogram<F>,
    n_layers: usize,
    dim: usize,
    seed: u64,
) -> Result<SslFeatureStack<F>> {
    let (t_len, n_mels) = mel.frames.dim();
    let mut layers = Array3::zeros((n_layers, t_len, dim));
    let std = 1.0 / (n_mels as f64).sqrt();
    for l in 1..=n_layers {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
        let w = Array2::from_shape_fn((n_mels, dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            F::lit(z * std)
        });
        let projected = mel.frames.dot(&w);
        let h = smoothing_half_width(l);
        let mut out = layers.index_axis_mut(Axis(0), l - 1);
        for t in 0..t_len {
            let lo = t.saturating_sub(h);
            let hi = (t + h).min(t_len - 1);
            let window = projected.slice(s![lo..=hi, ..]);
            let mean = window.sum_axis(Axis(0)) / F::lit((hi - lo + 1) as f64);
            out.row_mut(t).assign(&mean);
        }
    }
    SslFeatureStack::new(layers, mel.config.frame_rate_hz())
}

/// A fixed-length crop; frames past `valid_frames` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct CroppedStack<F> {
    pub stack: SslFeatureStack<F>,
    pub start: usize,
    pub valid_frames: usize,
}

/// Contiguous `crop_len`-frame window with a uniform start, or trailing zero
/// padding when the stack is shorter.
pub fn random_crop<F: Scalar, R: Rng + ?Sized>(
    stack: &SslFeatureStack<F>,
    crop_len: usize,
    rng: &mut R,
) -> CroppedStack<F> {
    assert!(crop_len >= 1, "crop length must be positive");
    let (l, t_len, d) = stack.layers.dim();
    if t_len >= crop_len {
        let start = rng.random_range(0..=t_len - crop_len);
        let layers = stack.layers.slice(s![.., start..start + crop_len, ..]).to_owned();
        CroppedStack {
            stack: SslFeatureStack {
                layers,
                frame_rate_hz: stack.frame_rate_hz,
            },
            start,
            valid_frames: crop_len,
        }
    } else {
        let mut layers = Array3::zeros((l, crop_len, d));
        layers.slice_mut(s![.., ..t_len, ..]).assign(&stack.layers);
        CroppedStack {
            stack: SslFeatureStack {
                layers,
                frame_rate_hz: stack.frame_rate_hz,
            },
            start: 0,
            valid_frames: t_len,
        }
    }
}

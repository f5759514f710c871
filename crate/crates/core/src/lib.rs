//! Cross-lingual zero-shot emotional speech synthesis at desk scale.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual choices. Time settings of the feature
//! pipeline are exact rationals.

pub mod acoustic;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod emotion;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod npc;
pub mod repro;
pub mod scalar;
pub mod seed;
pub mod ssl;
pub mod synth;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Millisecond and hertz settings in [`data::MelConfig`].
pub type Rational = num_rational::Ratio<u64>;

pub type Model = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Dataset = dataset::Dataset<f32>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type SslFeatureStack = ssl::SslFeatureStack<f32>;
pub type SslFeatureStack64 = ssl::SslFeatureStack<f64>;
pub type MelSpectrogram = data::MelSpectrogram<f32>;
pub type MelSpectrogram64 = data::MelSpectrogram<f64>;

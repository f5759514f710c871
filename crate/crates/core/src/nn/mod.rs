//! Parameter storage, the forward-pass context and reusable layers.

mod adam;
mod conformer;
mod layers;

pub use adam::{Adam, AdamConfig, GradBuffer};
pub use conformer::{ConformerBlock, ConformerConfig, MultiHeadAttention};
pub use layers::{sinusoidal_positions, CondLayerNorm, Conv1d, Embedding, LayerNorm, Linear, Norm, LN_EPS};

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    values: Vec<Array2<F>>,
    names: Vec<String>,
    trainable: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            names: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.values.len());
        self.values.push(value);
        self.names.push(name);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.values
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (v, n))| (ParamId(i), n.as_str(), v))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (flag, name) in self.trainable.iter_mut().zip(&self.names) {
            if name.starts_with(prefix) {
                *flag = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Array2<F>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if self.values[id.0].dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {:?}, model expects {:?}",
                value.dim(),
                self.values[id.0].dim()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Forward-pass context: a tape, the parameters it reads, the mode and the
/// random stream used by dropout.
pub struct Graph<'a, F: Scalar> {
    tape: Tape<'a, F>,
    params: &'a ParamStore<F>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a, F: Scalar> Deref for Graph<'a, F> {
    type Target = Tape<'a, F>;

    fn deref(&self) -> &Self::Target {
        &self.tape
    }
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(params: &'a ParamStore<F>, train: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(params: &'a ParamStore<F>) -> Self {
        Self::new(params, false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn tape(&self) -> &Tape<'a, F> {
        &self.tape
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.tape.param(id.0, self.params.get(id), self.params.is_trainable(id))
    }

    pub fn dropout(&self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = F::lit(1.0 / keep);
        let mask = {
            let mut rng = self.rng.borrow_mut();
            Array2::from_shape_fn(self.tape.shape(x), |_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
        };
        let m = self.tape.constant(mask);
        self.tape.mul(x, m)
    }
}

/// Glorot-uniform matrix.
pub fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::lit(rng.random_range(-bound..bound)))
}

pub fn normal<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::lit(z * std)
    })
}

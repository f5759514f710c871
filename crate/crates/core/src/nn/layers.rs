use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{normal, xavier, Graph, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self { w, b, in_dim, out_dim }
    }

    /// Zero weights and a constant bias, so the layer initially outputs `bias_value`.
    pub fn constant_init<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Array2::zeros((in_dim, out_dim)));
        let b = store.add(
            format!("{name}.bias"),
            Array2::from_elem((1, out_dim), F::lit(bias_value)),
        );
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var) -> Var {
        let y = g.matmul(x, g.p(self.w));
        match self.b {
            Some(b) => g.add_row(y, g.p(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal(rng, rows, dim, std));
        Self { table, rows }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, ids: &[usize]) -> Var {
        let index = ids
            .iter()
            .map(|&i| {
                assert!(i < self.rows, "embedding index {i} out of range {}", self.rows);
                Some(i)
            })
            .collect();
        g.gather(g.p(self.table), index)
    }
}

/// Layer normalisation with a learned affine transform.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var) -> Var {
        let n = g.normalize_rows(x, F::lit(LN_EPS));
        g.add_row(g.mul_row(n, g.p(self.gamma)), g.p(self.beta))
    }
}

/// Conditional layer normalisation: scale and bias are each produced by one
/// fully connected layer over a conditioning row vector.
#[derive(Debug, Clone)]
pub struct CondLayerNorm {
    pub scale: Linear,
    pub bias: Linear,
}

impl CondLayerNorm {
    /// Starts as plain layer normalisation: scale layer outputs 1, bias layer 0.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cond_dim: usize, dim: usize) -> Self {
        Self {
            scale: Linear::constant_init(store, &format!("{name}.scale"), cond_dim, dim, 1.0),
            bias: Linear::constant_init(store, &format!("{name}.bias"), cond_dim, dim, 0.0),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, cond: Var) -> Var {
        let (rows, cols) = g.shape(cond);
        assert_eq!(rows, 1, "condition must be a single row");
        assert_eq!(cols, self.scale.in_dim, "condition width");
        let gamma = self.scale.forward(g, cond);
        let beta = self.bias.forward(g, cond);
        let n = g.normalize_rows(x, F::lit(LN_EPS));
        g.add_row(g.mul_row(n, gamma), beta)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    Conditional(CondLayerNorm),
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize, cond_dim: Option<usize>) -> Self {
        match cond_dim {
            Some(c) => Norm::Conditional(CondLayerNorm::new(store, name, c, dim)),
            None => Norm::Plain(LayerNorm::new(store, name, dim)),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, cond: Option<Var>) -> Var {
        match self {
            Norm::Plain(ln) => ln.forward(g, x),
            Norm::Conditional(cln) => cln.forward(g, x, cond.expect("conditional norm needs a condition")),
        }
    }
}

/// 1-D convolution over time (rows), expressed as unfold + matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub offsets: Vec<isize>,
}

impl Conv1d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        offsets: Vec<isize>,
        bias: bool,
    ) -> Self {
        let k = offsets.len();
        let w = store.add(format!("{name}.weight"), xavier(rng, k * in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self { w, b, offsets }
    }

    /// Same-padded kernel centred on the output frame.
    pub fn centered_offsets(kernel: usize) -> Vec<isize> {
        let half = (kernel / 2) as isize;
        (0..kernel as isize).map(|k| k - half).collect()
    }

    /// Kernel covering the current frame and `kernel - 1` past frames.
    pub fn causal_offsets(kernel: usize) -> Vec<isize> {
        (0..kernel as isize).map(|k| k - (kernel as isize - 1)).collect()
    }

    /// Kernel covering the current frame and `kernel - 1` future frames.
    pub fn anticausal_offsets(kernel: usize) -> Vec<isize> {
        (0..kernel as isize).collect()
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var) -> Var {
        let u = g.unfold(x, self.offsets.clone());
        let y = g.matmul(u, g.p(self.w));
        match self.b {
            Some(b) => g.add_row(y, g.p(b)),
            None => y,
        }
    }
}

/// Sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, dim: usize) -> Array2<F> {
    Array2::from_shape_fn((len, dim), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_offsets() {
        assert_eq!(Conv1d::centered_offsets(5), vec![-2, -1, 0, 1, 2]);
        assert_eq!(Conv1d::causal_offsets(3), vec![-2, -1, 0]);
        assert_eq!(Conv1d::anticausal_offsets(3), vec![0, 1, 2]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::new(&mut store, &mut rng, "c", 2, 3, Conv1d::centered_offsets(3), false);
        let x = normal::<f64>(&mut rng, 5, 2, 1.0);
        let g = Graph::eval(&store);
        let y = g.to_array(conv.forward(&g, g.constant(x.clone())));
        let w = store.get(conv.w);
        for t in 0..5 {
            for o in 0..3 {
                let mut expect = 0.0;
                for (k, off) in [-1isize, 0, 1].iter().enumerate() {
                    let src = t as isize + off;
                    if (0..5).contains(&src) {
                        for c in 0..2 {
                            expect += x[[src as usize, c]] * w[[k * 2 + c, o]];
                        }
                    }
                }
                assert!((y[[t, o]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions::<f32>(50, 8);
        assert!(p.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 1.0);
    }
}

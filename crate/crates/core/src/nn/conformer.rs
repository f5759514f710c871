use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{xavier, Graph, Linear, Norm, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(dim % n_heads, 0, "dim must be divisible by n_heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            n_heads,
        }
    }

    /// Self-attention over the rows of `x`.
    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var) -> Var {
        let dim = self.q.out_dim;
        let head = dim / self.n_heads;
        let scale = F::lit(1.0 / (head as f64).sqrt());
        let (q, k, v) = (self.q.forward(g, x), self.k.forward(g, x), self.v.forward(g, x));
        let heads: Vec<Var> = (0..self.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * head, head);
                let kh = g.slice_cols(k, h * head, head);
                let vh = g.slice_cols(v, h * head, head);
                let scores = g.scale(g.matmul(qh, g.transpose(kh)), scale);
                g.matmul(g.softmax_rows(scores), vh)
            })
            .collect();
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, joined)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, dropout: f64) -> Var {
        let h = g.silu(self.up.forward(g, x));
        let h = g.dropout(h, dropout);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    offsets: Vec<isize>,
    norm: Norm,
    pointwise_out: Linear,
}

impl ConvModule {
    fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, cond: Option<Var>) -> Var {
        let h = g.glu(self.pointwise_in.forward(g, x));
        let h = g.depthwise_conv(h, g.p(self.depthwise), self.offsets.clone());
        let h = g.add_row(h, g.p(self.depthwise_bias));
        let h = g.silu(self.norm.forward(g, h, cond));
        self.pointwise_out.forward(g, h)
    }
}

/// Macaron conformer block (half-step FFN, self-attention, convolution,
/// half-step FFN, output norm). Pre-norm residual layout.
///
/// With `cond_dim` set, every normalisation inside the block is a
/// conditional layer norm driven by the same condition vector.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ff1: FeedForward,
    ff1_norm: Norm,
    attn: MultiHeadAttention,
    attn_norm: Norm,
    conv: ConvModule,
    conv_norm: Norm,
    ff2: FeedForward,
    ff2_norm: Norm,
    out_norm: Norm,
    dropout: f64,
}

impl ConformerBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ConformerConfig,
        cond_dim: Option<usize>,
    ) -> Self {
        let d = cfg.dim;
        let ff = |store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, n: &str| FeedForward {
            up: Linear::new(store, rng, &format!("{name}.{n}.up"), d, cfg.ff_dim, true),
            down: Linear::new(store, rng, &format!("{name}.{n}.down"), cfg.ff_dim, d, true),
        };
        let ff1 = ff(store, rng, "ff1");
        let ff1_norm = Norm::new(store, &format!("{name}.ff1_norm"), d, cond_dim);
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, cfg.n_heads);
        let attn_norm = Norm::new(store, &format!("{name}.attn_norm"), d, cond_dim);
        let conv = ConvModule {
            pointwise_in: Linear::new(store, rng, &format!("{name}.conv.pw_in"), d, 2 * d, true),
            depthwise: store.add(format!("{name}.conv.dw.weight"), xavier(rng, cfg.conv_kernel, d)),
            depthwise_bias: store.add(format!("{name}.conv.dw.bias"), Array2::zeros((1, d))),
            offsets: super::Conv1d::centered_offsets(cfg.conv_kernel),
            norm: Norm::new(store, &format!("{name}.conv.norm"), d, cond_dim),
            pointwise_out: Linear::new(store, rng, &format!("{name}.conv.pw_out"), d, d, true),
        };
        let conv_norm = Norm::new(store, &format!("{name}.conv_norm"), d, cond_dim);
        let ff2 = ff(store, rng, "ff2");
        let ff2_norm = Norm::new(store, &format!("{name}.ff2_norm"), d, cond_dim);
        let out_norm = Norm::new(store, &format!("{name}.out_norm"), d, cond_dim);
        Self {
            ff1,
            ff1_norm,
            attn,
            attn_norm,
            conv,
            conv_norm,
            ff2,
            ff2_norm,
            out_norm,
            dropout: cfg.dropout,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, cond: Option<Var>) -> Var {
        let half = F::lit(0.5);
        let p = self.dropout;

        let h = self.ff1.forward(g, self.ff1_norm.forward(g, x, cond), p);
        let x = g.add(x, g.scale(g.dropout(h, p), half));

        let h = self.attn.forward(g, self.attn_norm.forward(g, x, cond));
        let x = g.add(x, g.dropout(h, p));

        let h = self.conv.forward(g, self.conv_norm.forward(g, x, cond), cond);
        let x = g.add(x, g.dropout(h, p));

        let h = self.ff2.forward(g, self.ff2_norm.forward(g, x, cond), p);
        let x = g.add(x, g.scale(g.dropout(h, p), half));

        self.out_norm.forward(g, x, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ConformerConfig {
        ConformerConfig {
            dim: 8,
            n_heads: 2,
            ff_dim: 16,
            conv_kernel: 3,
            dropout: 0.0,
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConformerBlock::new(&mut store, &mut rng, "b", &cfg(), Some(4));
        let g = Graph::eval(&store);
        let x = g.constant(super::super::normal(&mut rng, 7, 8, 1.0));
        let c = g.constant(super::super::normal(&mut rng, 1, 4, 1.0));
        let y = block.forward(&g, x, Some(c));
        assert_eq!(g.shape(y), (7, 8));
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_rows_are_permutation_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2);
        let x = super::super::normal::<f64>(&mut rng, 5, 8, 1.0);
        let g = Graph::eval(&store);
        let y = g.to_array(attn.forward(&g, g.constant(x.clone())));
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Array2::from_shape_fn((5, 8), |(r, c)| x[[perm[r], c]]);
        let g2 = Graph::eval(&store);
        let yp = g2.to_array(attn.forward(&g2, g2.constant(xp)));
        for r in 0..5 {
            for c in 0..8 {
                assert!((yp[[r, c]] - y[[perm[r], c]]).abs() < 1e-12);
            }
        }
    }
}

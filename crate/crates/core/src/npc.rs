//! Non-autoregressive predictive coding over the frame-level hidden
//! sequence: masked convolutional context, vector quantisation and a linear
//! reconstruction head. Used only during training.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, Linear, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpcInput {
    /// Frame-level output of the variance adaptor.
    Hidden,
    /// Ground-truth mel frames; the backbone then gets no NPC gradient.
    Mel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpcConfig {
    pub n_blocks: usize,
    pub mask_size: usize,
    pub kernel_size: usize,
    pub channels: usize,
    pub vq_groups: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    /// Codebook rows whose EMA usage count drops below this are re-seeded
    /// from the current batch; 0 disables restarts.
    pub dead_code_threshold: f64,
    pub input: NpcInput,
}

impl Default for NpcConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            mask_size: 5,
            kernel_size: 3,
            channels: 64,
            vq_groups: 1,
            codebook_size: 64,
            code_dim: 32,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            dead_code_threshold: 1.0,
            input: NpcInput::Hidden,
        }
    }
}

impl NpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_size.is_multiple_of(2) {
            return Err(Error::Config(format!("mask_size {} must be odd", self.mask_size)));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.vq_groups == 0 || !self.code_dim.is_multiple_of(self.vq_groups) {
            return Err(Error::Config("code_dim must split evenly into vq_groups".into()));
        }
        if self.n_blocks == 0 || self.kernel_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "n_blocks, kernel_size and channels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Frames on each side of `t` that never influence `context[t]`.
    pub fn half_mask(&self) -> usize {
        self.mask_size / 2
    }
}

/// EMA codebook for one quantisation group.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    pub vectors: Array2<F>,
    pub cluster_size: Array1<F>,
    pub embed_sum: Array2<F>,
}

impl<F: Scalar> Codebook<F> {
    pub fn new(vectors: Array2<F>) -> Self {
        let k = vectors.nrows();
        Self {
            embed_sum: vectors.clone(),
            cluster_size: Array1::ones(k),
            vectors,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, size: usize, dim: usize) -> Self {
        Self::new(crate::nn::normal(rng, size, dim, 1.0 / (dim as f64).sqrt()))
    }

    /// Re-seeds the rows from distinct sample rows plus a small jitter so no
    /// two rows coincide.
    pub fn init_from_samples(&mut self, samples: &Array2<F>, rng: &mut ChaCha8Rng) {
        let k = self.vectors.nrows();
        let n = samples.nrows();
        if n == 0 {
            return;
        }
        let picks: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|i| i % n).collect()
        };
        for (r, &i) in picks.iter().enumerate() {
            let mut row = self.vectors.row_mut(r);
            row.assign(&samples.row(i));
            row.mapv_inplace(|v| v + F::lit(rng.random_range(-1e-3..1e-3)));
        }
        self.embed_sum = self.vectors.clone();
        self.cluster_size = Array1::ones(k);
    }

    pub fn nearest(&self, h: ArrayView1<'_, F>) -> usize {
        let mut best = (0, F::infinity());
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let d = row
                .iter()
                .zip(h.iter())
                .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Exponential moving average of the inputs assigned to each row, with
    /// Laplace smoothing of the counts.
    pub fn ema_update(&mut self, inputs: &Array2<F>, indices: &[usize], decay: f64) {
        let (k, d) = self.vectors.dim();
        let mut counts = Array1::<F>::zeros(k);
        let mut sums = Array2::<F>::zeros((k, d));
        for (row, &i) in inputs.rows().into_iter().zip(indices) {
            counts[i] += F::one();
            let mut s = sums.row_mut(i);
            s += &row;
        }
        let decay = F::lit(decay);
        let keep = F::one() - decay;
        self.cluster_size = &self.cluster_size * decay + &counts * keep;
        self.embed_sum = &self.embed_sum * decay + &sums * keep;
        let total = self.cluster_size.sum();
        let eps = F::lit(1e-5);
        let kf = F::lit(k as f64);
        for i in 0..k {
            let smoothed = (self.cluster_size[i] + eps) / (total + kf * eps) * total;
            let row = self.embed_sum.row(i).mapv(|v| v / smoothed);
            self.vectors.row_mut(i).assign(&row);
        }
    }
}

impl<F: Scalar> Codebook<F> {
    /// Moves rows whose EMA count fell below `threshold` onto randomly chosen
    /// input rows. Returns the number of rows moved.
    pub fn restart_dead(&mut self, inputs: &Array2<F>, threshold: f64, rng: &mut ChaCha8Rng) -> usize {
        let n = inputs.nrows();
        if n == 0 || threshold <= 0.0 {
            return 0;
        }
        let dead: Vec<usize> = (0..self.vectors.nrows())
            .filter(|&i| self.cluster_size[i].as_f64() < threshold)
            .collect();
        for &i in &dead {
            let src = rng.random_range(0..n);
            let mut row = self.vectors.row_mut(i);
            row.assign(&inputs.row(src));
            row.mapv_inplace(|v| v + F::lit(rng.random_range(-1e-3..1e-3)));
            self.embed_sum.row_mut(i).assign(&self.vectors.row(i));
            self.cluster_size[i] = F::one();
        }
        dead.len()
    }
}

/// Nearest-row quantisation: `(q, indices)`, each `q` row an exact codebook row.
pub fn vq_quantize<F: Scalar>(h: &Array2<F>, codebook: &Codebook<F>) -> Result<(Array2<F>, Vec<usize>)> {
    if h.ncols() != codebook.vectors.ncols() {
        return Err(Error::Shape(format!(
            "inputs have {} dims, codebook {}",
            h.ncols(),
            codebook.vectors.ncols()
        )));
    }
    let indices: Vec<usize> = h.rows().into_iter().map(|r| codebook.nearest(r)).collect();
    let mut q = Array2::zeros(h.dim());
    for (t, &i) in indices.iter().enumerate() {
        q.row_mut(t).assign(&codebook.vectors.row(i));
    }
    Ok((q, indices))
}

/// Shannon entropy (nats) of code usage counts.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * (1.0 / p).ln()
        })
        .sum()
}

/// Mean absolute error; the reference against which the graph loss is tested.
pub fn l1_loss<F: Scalar>(predicted: &Array2<F>, target: &Array2<F>) -> Result<f64> {
    if predicted.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    let n = predicted.len().max(1) as f64;
    Ok(predicted
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

/// Quantiser output inside a graph.
#[derive(Debug, Clone)]
pub struct VqOutput<F> {
    pub quantized: Var,
    pub commitment: Var,
    /// Per group: the pre-quantisation rows and their code indices.
    pub assignments: Vec<(Array2<F>, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct NpcOutput<F> {
    pub loss: Var,
    pub l1: Var,
    pub commitment: Var,
    pub prediction: Var,
    pub assignments: Vec<(Array2<F>, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Npc {
    pub cfg: NpcConfig,
    pub input_dim: usize,
    pub n_mels: usize,
    causal: Vec<Conv1d>,
    anticausal: Vec<Conv1d>,
    to_code: Linear,
    head: Linear,
}

impl Npc {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &NpcConfig,
        input_dim: usize,
        n_mels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut stack = |dir: &str, offsets: Vec<isize>, rng: &mut ChaCha8Rng| -> Vec<Conv1d> {
            (0..cfg.n_blocks)
                .map(|i| {
                    let cin = if i == 0 { input_dim } else { cfg.channels };
                    let name = format!("{prefix}.{dir}.{i}");
                    Conv1d::new(store, rng, &name, cin, cfg.channels, offsets.clone(), true)
                })
                .collect()
        };
        let causal = stack("causal", Conv1d::causal_offsets(k), rng);
        let anticausal = stack("anticausal", Conv1d::anticausal_offsets(k), rng);
        let to_code = Linear::new(
            store,
            rng,
            &format!("{prefix}.to_code"),
            cfg.channels,
            cfg.code_dim,
            true,
        );
        let head = Linear::new(store, rng, &format!("{prefix}.head"), cfg.code_dim, n_mels, true);
        Ok(Self {
            cfg: cfg.clone(),
            input_dim,
            n_mels,
            causal,
            anticausal,
            to_code,
            head,
        })
    }

    pub fn new_codebooks<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> Vec<Codebook<F>> {
        let d = self.cfg.code_dim / self.cfg.vq_groups;
        (0..self.cfg.vq_groups)
            .map(|_| Codebook::random(rng, self.cfg.codebook_size, d))
            .collect()
    }

    fn shift<F: Scalar>(g: &Graph<'_, F>, x: Var, by: isize) -> Var {
        let (t_len, _) = g.shape(x);
        let index = (0..t_len as isize)
            .map(|t| {
                let src = t - by;
                (src >= 0 && src < t_len as isize).then_some(src as usize)
            })
            .collect();
        g.gather(x, index)
    }

    /// Context features whose row `t` depends only on input rows `τ` with
    /// `|τ − t| > mask_size / 2`: per-layer outputs of a causal stack shifted
    /// forward and an anticausal stack shifted back, all summed.
    pub fn masked_context<F: Scalar>(&self, g: &Graph<'_, F>, hidden: Var) -> Result<Var> {
        let (t_len, dim) = g.shape(hidden);
        if t_len <= self.cfg.mask_size {
            return Err(Error::InputTooShort {
                len: t_len,
                required: self.cfg.mask_size + 1,
            });
        }
        if dim != self.input_dim {
            return Err(Error::Shape(format!(
                "NPC input has {dim} dims, expected {}",
                self.input_dim
            )));
        }
        let m = (self.cfg.half_mask() + 1) as isize;
        let mut parts = Vec::with_capacity(2 * self.cfg.n_blocks);
        for (convs, shift) in [(&self.causal, m), (&self.anticausal, -m)] {
            let mut x = hidden;
            for conv in convs {
                x = g.relu(conv.forward(g, x));
                parts.push(Self::shift(g, x, shift));
            }
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        Ok(acc)
    }

    /// Straight-through quantisation of `h` (`[T × code_dim]`) per group.
    pub fn quantize<F: Scalar>(&self, g: &Graph<'_, F>, h: Var, books: &[Codebook<F>]) -> Result<VqOutput<F>> {
        let groups = self.cfg.vq_groups;
        if books.len() != groups {
            return Err(Error::Shape(format!("{} codebooks for {groups} groups", books.len())));
        }
        let d = self.cfg.code_dim / groups;
        let mut assignments = Vec::with_capacity(groups);
        let mut q_full = Array2::zeros(g.shape(h));
        {
            let hv = g.value(h);
            for (gi, book) in books.iter().enumerate() {
                let part = hv.slice(s![.., gi * d..(gi + 1) * d]).to_owned();
                let (q, idx) = vq_quantize(&part, book)?;
                q_full.slice_mut(s![.., gi * d..(gi + 1) * d]).assign(&q);
                assignments.push((part, idx));
            }
        }
        let commitment = g.mean_all(g.square(g.add_const(h, &q_full.mapv(|v| -v))));
        let quantized = g.straight_through(h, q_full);
        Ok(VqOutput {
            quantized,
            commitment,
            assignments,
        })
    }

    /// Masked context, quantisation and the linear head, scored by L1 against
    /// `target_mel` plus the weighted commitment term.
    pub fn forward<F: Scalar>(
        &self,
        g: &Graph<'_, F>,
        input: Var,
        target_mel: &Array2<F>,
        books: &[Codebook<F>],
    ) -> Result<NpcOutput<F>> {
        let (t_len, _) = g.shape(input);
        if target_mel.dim() != (t_len, self.n_mels) {
            return Err(Error::Shape(format!(
                "NPC input has {t_len} frames, target mel is {:?}",
                target_mel.dim()
            )));
        }
        let ctx = self.masked_context(g, input)?;
        let h = self.to_code.forward(g, ctx);
        let vq = self.quantize(g, h, books)?;
        let prediction = self.head.forward(g, vq.quantized);
        let l1 = npc_l1(g, prediction, target_mel);
        let loss = g.add(l1, g.scale(vq.commitment, F::lit(self.cfg.commitment_weight)));
        Ok(NpcOutput {
            loss,
            l1,
            commitment: vq.commitment,
            prediction,
            assignments: vq.assignments,
        })
    }

    /// Applies the EMA update for one batch of assignments, in order.
    pub fn update_codebooks<F: Scalar>(
        &self,
        books: &mut [Codebook<F>],
        batch: &[Vec<(Array2<F>, Vec<usize>)>],
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let mut restarted = 0;
        for (gi, book) in books.iter_mut().enumerate() {
            let rows: Vec<_> = batch.iter().map(|a| a[gi].0.view()).collect();
            if rows.is_empty() {
                continue;
            }
            let inputs = ndarray::concatenate(Axis(0), &rows).expect("equal code widths");
            let indices: Vec<usize> = batch.iter().flat_map(|a| a[gi].1.iter().copied()).collect();
            book.ema_update(&inputs, &indices, self.cfg.ema_decay);
            restarted += book.restart_dead(&inputs, self.cfg.dead_code_threshold, rng);
        }
        restarted
    }
}

/// Mean absolute error inside the graph.
pub fn npc_l1<F: Scalar>(g: &Graph<'_, F>, prediction: Var, target: &Array2<F>) -> Var {
    g.mean_all(g.abs(g.add_const(prediction, &target.mapv(|v| -v))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn setup(mask: usize, h: usize, n_mels: usize) -> (ParamStore<f64>, Npc, Vec<Codebook<f64>>) {
        let cfg = NpcConfig {
            mask_size: mask,
            channels: 8,
            code_dim: 6,
            codebook_size: 8,
            ..NpcConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let npc = Npc::new(&mut store, &mut rng, "npc", &cfg, h, n_mels).unwrap();
        let books = npc.new_codebooks(&mut rng);
        (store, npc, books)
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        crate::nn::normal(rng, r, c, 1.0)
    }

    #[test]
    fn full_jacobian_excludes_masked_band() {
        for mask in [3usize, 5] {
            let (t_len, h, n_mels) = (14, 4, 3);
            let (store, npc, books) = setup(mask, h, n_mels);
            let mut rng = ChaCha8Rng::seed_from_u64(mask as u64);
            let x = randn(&mut rng, t_len, h);
            let target = randn(&mut rng, t_len, n_mels);
            let k = mask / 2;
            for t in 0..t_len {
                for c in 0..n_mels {
                    let g = Graph::eval(&store);
                    let input = g.input(x.clone());
                    let out = npc.forward(&g, input, &target, &books).unwrap();
                    let mut seed = Array2::zeros((t_len, n_mels));
                    seed[[t, c]] = 1.0;
                    let grads = g.backward_with(out.prediction, seed);
                    let jac = grads.wrt(input).unwrap();
                    for tau in t.saturating_sub(k)..=(t + k).min(t_len - 1) {
                        assert!(jac.row(tau).iter().all(|&v| v == 0.0), "mask {mask} t {t} tau {tau}");
                    }
                }
            }
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let (store, npc, _) = setup(5, 4, 3);
        let g = Graph::eval(&store);
        let x = g.input(Array2::zeros((5, 4)));
        assert!(matches!(
            npc.masked_context(&g, x),
            Err(Error::InputTooShort { len: 5, required: 6 })
        ));
    }

    #[test]
    fn zero_input_gives_zero_context() {
        let (store, npc, _) = setup(5, 4, 3);
        let g = Graph::eval(&store);
        let ctx = npc.masked_context(&g, g.input(Array2::zeros((10, 4)))).unwrap();
        assert!(g.value(ctx).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_interior_context_is_shift_invariant() {
        let (store, npc, _) = setup(5, 4, 3);
        let g = Graph::eval(&store);
        let x = Array2::from_shape_fn((60, 4), |(_, c)| c as f64 - 1.5);
        let ctx = g.to_array(npc.masked_context(&g, g.input(x)).unwrap());
        // receptive field per side: 4 blocks of kernel 3 plus the shift of 3
        let reach = 4 * 2 + 3;
        for t in reach..60 - reach {
            assert_eq!(ctx.row(t), ctx.row(reach));
        }
    }

    #[test]
    fn nearest_row_examples() {
        let book = Codebook::new(array![[0.0, 0.0], [1.0, 1.0]]);
        let (q, idx) = vq_quantize(&array![[0.9, 1.2]], &book).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q, array![[1.0, 1.0]]);
        let (q, _) = vq_quantize(&array![[0.0, 0.0]], &book).unwrap();
        assert_eq!(q, array![[0.0, 0.0]]);
        assert!(vq_quantize(&array![[0.0, 0.0, 0.0]], &book).is_err());
    }

    #[test]
    fn commitment_is_zero_on_codebook_rows() {
        let (store, npc, mut books) = setup(3, 4, 3);
        books[0].vectors = Array2::from_shape_fn((8, 6), |(i, j)| (i * 6 + j) as f64 * 0.1);
        let g = Graph::eval(&store);
        let h = g.input(books[0].vectors.slice(s![2..5, ..]).to_owned());
        let out = npc.quantize(&g, h, &books).unwrap();
        assert_eq!(g.scalar(out.commitment), 0.0);
        assert_eq!(out.assignments[0].1, vec![2, 3, 4]);
    }

    #[test]
    fn straight_through_matches_finite_difference() {
        // objective f(q) = Σ c ⊙ q², differentiated through q = ST(h)
        let book = Codebook::new(array![[0.0, 0.0], [1.0, 1.0], [-1.0, 0.5]]);
        let h0 = array![[0.8, 1.1]];
        let c = array![[0.7, -0.3]];
        let cfg = NpcConfig {
            code_dim: 2,
            codebook_size: 3,
            ..NpcConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let npc = Npc::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "n", &cfg, 2, 2).unwrap();
        let g = Graph::eval(&store);
        let h = g.input(h0.clone());
        let out = npc.quantize(&g, h, std::slice::from_ref(&book)).unwrap();
        let f = g.sum_all(g.mul(g.square(out.quantized), g.constant(c.clone())));
        let grad_h = g.backward(f).wrt(h).unwrap().clone();
        let q = g.to_array(out.quantized);
        let obj = |q: &Array2<f64>| (q.mapv(|v| v * v) * &c).sum();
        let eps = 1e-6;
        for j in 0..2 {
            let mut up = q.clone();
            up[[0, j]] += eps;
            let mut dn = q.clone();
            dn[[0, j]] -= eps;
            let fd = (obj(&up) - obj(&dn)) / (2.0 * eps);
            assert!((fd - grad_h[[0, j]]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn l1_examples() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&(&a + 1.0), &a).unwrap(), 1.0);
        assert!(l1_loss(&a, &array![[1.0]]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = randn(&mut rng, 7, 5);
        let t = randn(&mut rng, 7, 5);
        let mut oracle = 0.0f64;
        for i in 0..7 {
            for j in 0..5 {
                oracle += (p[[i, j]] - t[[i, j]]).abs();
            }
        }
        oracle /= 35.0;
        let store = ParamStore::<f64>::new();
        let g = Graph::eval(&store);
        let v = g.scalar(npc_l1(&g, g.input(p.clone()), &t));
        assert!((v - oracle).abs() < 1e-12);
        assert!((l1_loss(&p, &t).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dead_rows_restart_onto_inputs() {
        let mut book = Codebook::<f64>::new(array![[0.0, 0.0], [5.0, 5.0], [9.0, 9.0]]);
        let inputs = array![[1.0, 1.0], [1.2, 0.8]];
        book.ema_update(&inputs, &[0, 0], 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(book.restart_dead(&inputs, 1.0, &mut rng), 2);
        for r in 1..3 {
            let row = book.vectors.row(r);
            let near = inputs
                .rows()
                .into_iter()
                .any(|x| (&x - &row).iter().all(|d| d.abs() < 1e-3));
            assert!(near);
            assert_eq!(book.cluster_size[r], 1.0);
        }
        assert_eq!(book.restart_dead(&inputs, 0.0, &mut rng), 0);
    }

    #[test]
    fn ema_moves_rows_toward_assigned_inputs() {
        let mut book = Codebook::<f64>::new(array![[0.0, 0.0], [5.0, 5.0]]);
        let inputs = array![[1.0, 1.0], [1.0, 1.0]];
        for _ in 0..200 {
            book.ema_update(&inputs, &[0, 0], 0.9);
        }
        assert!((book.vectors[[0, 0]] - 1.0).abs() < 1e-3);
        assert!(usage_entropy(&[5, 5]) > 0.69 && usage_entropy(&[4, 0]) == 0.0);
    }

    #[test]
    fn detached_input_passes_no_gradient() {
        let (store, npc, books) = setup(5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new(&store, true, 0);
        let x = g.constant(randn(&mut rng, 12, 4));
        let out = npc.forward(&g, x, &randn(&mut rng, 12, 3), &books).unwrap();
        assert!(g.scalar(out.loss).is_finite() && g.scalar(out.loss) > 0.0);
        assert!(g.backward(out.loss).wrt(x).is_none());
    }
}

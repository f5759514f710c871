//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every value on the tape is a matrix; vectors are `1 × n` rows and scalars
//! are `1 × 1`. Parameters are borrowed rather than copied, so a tape lives
//! no longer than the parameter store it reads from.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<F>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Unfold {
        x: Var,
        offsets: Vec<isize>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        offsets: Vec<isize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Array2<F>,
    },
    Glu(Var),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Array2<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
pub struct Tape<'a, F: Scalar> {
    nodes: RefCell<Vec<Node<'a, F>>>,
    params: RefCell<HashMap<usize, Var>>,
}

impl<'a, F: Scalar> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(512)),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'a, Array2<F>>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn derived(&self, value: Array2<F>, op: Op<F>, parents: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Cow::Owned(value), op, rg)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array2<F>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-sensitivity probes).
    pub fn input(&self, value: Array2<F>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrowed parameter `id`; repeated calls return the same node.
    pub fn param(&self, id: usize, value: &'a Array2<F>, trainable: bool) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Param, trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<F>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn to_array(&self, v: Var) -> Array2<F> {
        self.value(v).to_owned()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.ncols(), y.nrows(), "matmul inner dimensions");
            x.dot(&*y)
        };
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.derived(out, Op::Transpose(a), &[a])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "add shapes");
            &*x + &*y
        };
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "sub shapes");
            &*x - &*y
        };
        self.derived(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "mul shapes");
            &*x * &*y
        };
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!(r.dim(), (1, x.ncols()), "add_row shapes");
            &*x + &*r
        };
        self.derived(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!(r.dim(), (1, x.ncols()), "mul_row shapes");
            &*x * &*r
        };
        self.derived(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant array `c`.
    pub fn add_const(&self, a: Var, c: &Array2<F>) -> Var {
        let out = {
            let x = self.value(a);
            assert_eq!(x.dim(), c.dim(), "add_const shapes");
            &*x + c
        };
        self.derived(out, Op::AddConst(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(F::zero()));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * sigmoid(v));
        self.derived(out, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.tanh());
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.exp());
        self.derived(out, Op::Exp(a), &[a])
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.abs());
        self.derived(out, Op::Abs(a), &[a])
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * v);
        self.derived(out, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut out = self.to_array(a);
        for mut row in out.rows_mut() {
            let m = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.derived(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row zero-mean, unit-variance normalisation (`eps` added to the variance).
    pub fn normalize_rows(&self, a: Var, eps: F) -> Var {
        let mut out = self.to_array(a);
        let n = F::lit(out.ncols() as f64);
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(F::zero(), |acc, &v| acc + v * v) / n;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.derived(out, Op::NormalizeRows { x: a, inv_std }, &[a])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.derived(Array2::from_elem((1, 1), s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let m = {
            let x = self.value(a);
            x.sum() / F::lit(x.len() as f64)
        };
        self.derived(Array2::from_elem((1, 1), m), Op::MeanAll(a), &[a])
    }

    /// Mean over rows: `[T × m] -> [1 × m]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let n = F::lit(x.nrows() as f64);
            x.sum_axis(Axis(0)).mapv(|v| v / n).insert_axis(Axis(0))
        };
        self.derived(out, Op::MeanRows(a), &[a])
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather(&self, a: Var, index: Vec<Option<usize>>) -> Var {
        let out = {
            let x = self.value(a);
            let mut out = Array2::zeros((index.len(), x.ncols()));
            for (r, idx) in index.iter().enumerate() {
                if let Some(i) = *idx {
                    out.row_mut(r).assign(&x.row(i));
                }
            }
            out
        };
        self.derived(out, Op::Gather { x: a, index }, &[a])
    }

    /// Time-unfolding for convolutions: row `t` of the output is the
    /// concatenation of input rows `t + offset` (zero outside the sequence).
    pub fn unfold(&self, a: Var, offsets: Vec<isize>) -> Var {
        let out = {
            let x = self.value(a);
            let (t_len, c) = x.dim();
            let mut out = Array2::zeros((t_len, c * offsets.len()));
            for t in 0..t_len {
                for (k, &off) in offsets.iter().enumerate() {
                    let src = t as isize + off;
                    if src >= 0 && (src as usize) < t_len {
                        out.slice_mut(s![t, k * c..(k + 1) * c]).assign(&x.row(src as usize));
                    }
                }
            }
            out
        };
        self.derived(out, Op::Unfold { x: a, offsets }, &[a])
    }

    /// Per-channel convolution; `w` is `[offsets.len() × C]`.
    pub fn depthwise_conv(&self, a: Var, w: Var, offsets: Vec<isize>) -> Var {
        let out = {
            let (x, wv) = (self.value(a), self.value(w));
            let (t_len, c) = x.dim();
            assert_eq!(wv.dim(), (offsets.len(), c), "depthwise kernel shape");
            let mut out = Array2::zeros((t_len, c));
            for t in 0..t_len {
                let mut orow = out.row_mut(t);
                for (k, &off) in offsets.iter().enumerate() {
                    let src = t as isize + off;
                    if src >= 0 && (src as usize) < t_len {
                        Zip::from(&mut orow)
                            .and(x.row(src as usize))
                            .and(wv.row(k))
                            .for_each(|o, &xv, &wk| *o += xv * wk);
                    }
                }
            }
            out
        };
        self.derived(out, Op::DepthwiseConv { x: a, w, offsets }, &[a, w])
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.derived(out, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts")
        };
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts")
        };
        self.derived(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Forward value `quantized`, backward identity into `h`.
    pub fn straight_through(&self, h: Var, quantized: Array2<F>) -> Var {
        assert_eq!(self.shape(h), quantized.dim(), "straight_through shapes");
        self.derived(quantized, Op::StraightThrough(h), &[h])
    }

    /// Cross-entropy of a `[1 × C]` logit row against `label`.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Var {
        let (loss, probs) = {
            let x = self.value(logits);
            assert_eq!(x.nrows(), 1, "cross_entropy expects one row");
            assert!(label < x.ncols(), "label out of range");
            let m = x.fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = x.fold(F::zero(), |acc, &v| acc + (v - m).exp()).ln() + m;
            let probs = x.mapv(|v| (v - lse).exp());
            (lse - x[[0, label]], probs)
        };
        self.derived(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, label, probs },
            &[logits],
        )
    }

    /// Gated linear unit over the column halves of `a`.
    pub fn glu(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let c = x.ncols() / 2;
            assert_eq!(c * 2, x.ncols(), "glu needs an even width");
            let (lhs, rhs) = (x.slice(s![.., ..c]), x.slice(s![.., c..]));
            Zip::from(&lhs).and(&rhs).map_collect(|&p, &q| p * sigmoid(q))
        };
        self.derived(out, Op::Glu(a), &[a])
    }

    /// `Σ_i weights[0, i] · inputs[i]`.
    pub fn weighted_sum(&self, weights: Var, inputs: &[Var]) -> Var {
        let out = {
            let w = self.value(weights);
            assert_eq!(w.dim(), (1, inputs.len()), "weighted_sum weights");
            let mut acc = Array2::zeros(self.value(inputs[0]).dim());
            for (i, &x) in inputs.iter().enumerate() {
                acc.scaled_add(w[[0, i]], &*self.value(x));
            }
            acc
        };
        let mut parents = inputs.to_vec();
        parents.push(weights);
        self.derived(
            out,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            &parents,
        )
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let seed = Array2::from_elem(self.shape(loss), F::one());
        self.backward_with(loss, seed)
    }

    /// Back-propagates `seed` (same shape as `out`) through the tape.
    pub fn backward_with(&self, out: Var, seed: Array2<F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.dim(), seed.dim(), "seed shape");
        let mut grads: Vec<Option<Array2<F>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let val = |v: Var| nodes[v.0].value.as_ref();
            let mut acc = |v: Var, delta: Array2<F>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            let y = node.value.as_ref();
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    if nodes[row.0].requires_grad {
                        acc(*row, (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, &g * val(*row));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.mapv(|v| v * c));
                }
                Op::AddConst(a) | Op::StraightThrough(a) => acc(*a, g),
                Op::Relu(a) => {
                    let d = Zip::from(&g)
                        .and(y)
                        .map_collect(|&gv, &yv| if yv > F::zero() { gv } else { F::zero() });
                    acc(*a, d);
                }
                Op::Silu(a) => {
                    let d = Zip::from(&g).and(val(*a)).map_collect(|&gv, &xv| {
                        let s = sigmoid(xv);
                        gv * s * (F::one() + xv * (F::one() - s))
                    });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * yv * (F::one() - yv));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * (F::one() - yv * yv));
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * y),
                Op::Abs(a) => {
                    let d = Zip::from(&g).and(val(*a)).map_collect(|&gv, &xv| {
                        if xv > F::zero() {
                            gv
                        } else if xv < F::zero() {
                            -gv
                        } else {
                            F::zero()
                        }
                    });
                    acc(*a, d);
                }
                Op::Square(a) => {
                    let two = F::lit(2.0);
                    let d = Zip::from(&g).and(val(*a)).map_collect(|&gv, &xv| two * gv * xv);
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= dot * yv);
                    }
                    acc(*a, d);
                }
                Op::NormalizeRows { x, inv_std } => {
                    let n = F::lit(y.ncols() as f64);
                    let mut d = g;
                    for ((mut drow, yrow), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow
                            .iter()
                            .zip(yrow.iter())
                            .fold(F::zero(), |s, (&gv, &yv)| s + gv * yv)
                            / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = inv * (*gv - mean_g - yv * mean_gy));
                    }
                    acc(*x, d);
                }
                Op::SumAll(a) => {
                    let gv = g[[0, 0]];
                    acc(*a, Array2::from_elem(val(*a).dim(), gv));
                }
                Op::MeanAll(a) => {
                    let shape = val(*a).dim();
                    let gv = g[[0, 0]] / F::lit((shape.0 * shape.1) as f64);
                    acc(*a, Array2::from_elem(shape, gv));
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = val(*a).dim();
                    let n = F::lit(rows as f64);
                    let row = g.mapv(|v| v / n);
                    acc(*a, row.broadcast((rows, cols)).unwrap().to_owned());
                }
                Op::Gather { x, index } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            let mut target = d.row_mut(i);
                            target += &g.row(r);
                        }
                    }
                    acc(*x, d);
                }
                Op::Unfold { x, offsets } => {
                    let (t_len, c) = val(*x).dim();
                    let mut d = Array2::zeros((t_len, c));
                    for t in 0..t_len {
                        for (k, &off) in offsets.iter().enumerate() {
                            let src = t as isize + off;
                            if src >= 0 && (src as usize) < t_len {
                                let mut target = d.row_mut(src as usize);
                                target += &g.slice(s![t, k * c..(k + 1) * c]);
                            }
                        }
                    }
                    acc(*x, d);
                }
                Op::DepthwiseConv { x, w, offsets } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (t_len, c) = xv.dim();
                    let mut dx = Array2::zeros((t_len, c));
                    let mut dw = Array2::zeros(wv.dim());
                    for t in 0..t_len {
                        for (k, &off) in offsets.iter().enumerate() {
                            let src = t as isize + off;
                            if src >= 0 && (src as usize) < t_len {
                                let src = src as usize;
                                Zip::from(dx.row_mut(src))
                                    .and(g.row(t))
                                    .and(wv.row(k))
                                    .for_each(|d, &gv, &wk| *d += gv * wk);
                                Zip::from(dw.row_mut(k))
                                    .and(g.row(t))
                                    .and(xv.row(src))
                                    .for_each(|d, &gv, &xs| *d += gv * xs);
                            }
                        }
                    }
                    acc(*w, dw);
                    acc(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let mut d = probs.clone();
                    d[[0, *label]] -= F::one();
                    let gv = g[[0, 0]];
                    d.mapv_inplace(|v| v * gv);
                    acc(*logits, d);
                }
                Op::Glu(a) => {
                    let x = val(*a);
                    let c = x.ncols() / 2;
                    let mut d = Array2::zeros(x.dim());
                    {
                        let (lhs, rhs) = (x.slice(s![.., ..c]), x.slice(s![.., c..]));
                        let (mut dl, mut dr) = d.view_mut().split_at(Axis(1), c);
                        Zip::from(&mut dl).and(&mut dr).and(&g).and(&lhs).and(&rhs).for_each(
                            |dlv, drv, &gv, &p, &q| {
                                let sq = sigmoid(q);
                                *dlv = gv * sq;
                                *drv = gv * p * sq * (F::one() - sq);
                            },
                        );
                    }
                    acc(*a, d);
                }
                Op::WeightedSum { weights, inputs } => {
                    let w = val(*weights).to_owned();
                    if nodes[weights.0].requires_grad {
                        let mut dw = Array2::zeros(w.dim());
                        for (j, &x) in inputs.iter().enumerate() {
                            dw[[0, j]] = Zip::from(&g).and(val(x)).fold(F::zero(), |s, &gv, &xv| s + gv * xv);
                        }
                        acc(*weights, dw);
                    }
                    for (j, &x) in inputs.iter().enumerate() {
                        if nodes[x.0].requires_grad {
                            let wj = w[[0, j]];
                            acc(x, g.mapv(|v| v * wj));
                        }
                    }
                }
            }
        }

        let params = self.params.borrow().iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    params: Vec<(usize, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to a leaf (`None` if it did not influence the output).
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(param id, gradient)` pairs for every parameter that received one.
    pub fn into_params(mut self) -> Vec<(usize, Array2<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads.get_mut(v.0).and_then(|g| g.take()).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at every entry of every input.
    fn check_grad(inputs: Vec<Array2<f64>>, f: impl Fn(&Tape<f64>, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == k {
                                m.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.constant(m)
                        })
                        .collect();
                    let o = f(&t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (numeric - a).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "input {k} entry {idx}: numeric {numeric} analytic {a}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let r = rand_matrix(&mut rng, 1, 2);
        check_grad(vec![a, b, r], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.mul_row(t.silu(m), v[2]);
            let m = t.add(t.tanh(m), t.sigmoid(m));
            let m = t.mul(m, t.exp(t.scale(m, 0.3)));
            t.sum_all(t.square(t.transpose(m)))
        });
    }

    #[test]
    fn normalization_softmax_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 4, 5);
        let w = rand_matrix(&mut rng, 5, 5);
        check_grad(vec![a, w], |t, v| {
            let n = t.normalize_rows(v[0], 1e-5);
            let p = t.softmax_rows(t.matmul(n, v[1]));
            let m = t.mean_rows(t.mul(p, n));
            t.mean_all(t.abs(t.sub(m, t.slice_cols(t.concat_cols(&[m, m]), 1, 5))))
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 6, 4);
        let kw = rand_matrix(&mut rng, 3, 4);
        let lw = rand_matrix(&mut rng, 1, 3);
        check_grad(vec![x, kw, lw], |t, v| {
            let u = t.unfold(v[0], vec![-2, 0, 1]);
            let proj = t.slice_cols(u, 2, 8);
            let glu = t.glu(proj);
            let dw = t.depthwise_conv(v[0], v[1], vec![-1, 0, 1]);
            let g = t.gather(glu, vec![Some(0), None, Some(5), Some(5), Some(2), Some(1)]);
            let stacked = t.concat_rows(&[g, t.slice_cols(dw, 0, 4)]);
            let parts = [
                t.slice_cols(stacked, 0, 4),
                t.relu(t.slice_cols(stacked, 0, 4)),
                t.slice_cols(stacked, 0, 4),
            ];
            let ws = t.weighted_sum(v[2], &parts);
            t.sum_all(t.square(ws))
        });
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let tape = Tape::<f64>::new();
        let logits = tape.input(array![[0.2, -1.0, 3.0]]);
        let ce = tape.cross_entropy(logits, 2);
        let lse = (0.2f64.exp() + (-1.0f64).exp() + 3.0f64.exp()).ln();
        assert!((tape.scalar(ce) - (lse - 3.0)).abs() < 1e-12);
        check_grad(vec![array![[0.2, -1.0, 3.0]]], |t, v| t.cross_entropy(v[0], 1));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let tape = Tape::<f64>::new();
        let h = tape.input(array![[0.9, 1.2]]);
        let q = tape.straight_through(h, array![[1.0, 1.0]]);
        assert_eq!(tape.to_array(q), array![[1.0, 1.0]]);
        let w = tape.constant(array![[2.0, -3.0]]);
        let out = tape.sum_all(tape.mul(q, w));
        let g = tape.backward(out);
        assert_eq!(g.wrt(h).unwrap(), &array![[2.0, -3.0]]);
    }

    #[test]
    fn params_are_shared_and_reported() {
        let p = array![[1.0f64, 2.0]];
        let tape = Tape::new();
        let a = tape.param(7, &p, true);
        let b = tape.param(7, &p, true);
        assert_eq!(a, b);
        let out = tape.sum_all(tape.mul(a, b));
        let grads = tape.backward(out).into_params();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, 7);
        assert_eq!(grads[0].1, array![[2.0, 4.0]]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let p = array![[1.0f64, 2.0]];
        let tape = Tape::new();
        let a = tape.param(0, &p, false);
        let x = tape.input(array![[3.0, 4.0]]);
        let out = tape.sum_all(tape.mul(a, x));
        let grads = tape.backward(out);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &array![[1.0, 2.0]]);
    }
}

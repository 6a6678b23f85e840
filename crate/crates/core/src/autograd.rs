//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and produces gradients for
//! every node, from which parameter gradients are collected with
//! [`Gradients::param_grads`]. All values are 2-D; scalars are `1 x 1`.
//!
//! The op set is exactly what the encoders and objectives need: dense
//! products, broadcasts, gate nonlinearities, masked softmax, batch
//! normalization, row normalization and the two loss reductions.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Adds a matrix that is stored and checkpointed but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let id = self.add(name, value);
        self.frozen[id.0] = true;
        id
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Batch statistics captured by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Mean(Var),
    MaskedSoftmax(Var),
    L2NormalizeRows(Var, Array1<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Array1<f64>,
        batch_mode: bool,
    },
    Gather(Var, Vec<(usize, usize)>),
    WeightedBce {
        probs: Var,
        labels: Matrix,
        weights: Vec<f64>,
    },
    EmbedRows(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Matrix {
    Matrix::from_elem((1, 1), x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Input that gradients are still reported for (e.g. embeddings under a
    /// gradient check) but that maps to no parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                x,
                batch_mode: true,
                ..
            } => {
                let xv = &self.nodes[x.0].value;
                let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
                let var = xv.var_axis(Axis(0), 0.0);
                Some(BatchStats { mean, var })
            }
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every column of `a` by an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut v = self.value(xs[0]).clone();
        for x in &xs[1..] {
            v += self.value(*x);
        }
        self.push(v, Op::AddN(xs.to_vec()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|x| self.value(*x).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(xs.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).mean().unwrap_or(0.0));
        self.push(v, Op::Mean(a))
    }

    /// Row-wise softmax restricted to positions where `mask` is nonzero.
    /// Masked positions get exactly zero weight.
    ///
    /// Panics when a row has no unmasked position.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Matrix) -> Var {
        let x = self.value(scores);
        assert_eq!(x.dim(), mask.dim(), "mask shape");
        let mut out = Matrix::zeros(x.dim());
        for (r, (xrow, mrow)) in x.rows().into_iter().zip(mask.rows()).enumerate() {
            let max = xrow
                .iter()
                .zip(mrow.iter())
                .filter(|(_, m)| **m != 0.0)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "masked softmax row {r} has no live position");
            let mut total = 0.0;
            for (c, (v, m)) in xrow.iter().zip(mrow.iter()).enumerate() {
                if *m != 0.0 {
                    let e = (v - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|e| e / total);
        }
        self.push(out, Op::MaskedSoftmax(scores))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let v = x / &norms.view().insert_axis(Axis(1));
        self.push(v, Op::L2NormalizeRows(a, norms))
    }

    /// Batch normalization over rows. With `running = None` the batch's own
    /// statistics are used (training); otherwise the given mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (mean, var, batch_mode) = match running {
            None => (
                xv.mean_axis(Axis(0)).expect("non-empty batch"),
                xv.var_axis(Axis(0), 0.0),
                true,
            ),
            Some((m, v)) => (m.clone(), v.clone(), false),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mode,
            },
        )
    }

    /// Picks individual entries into an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let v = Matrix::from_shape_fn((idx.len(), 1), |(i, _)| x[idx[i]]);
        self.push(v, Op::Gather(a, idx))
    }

    /// Class-weighted binary cross-entropy, summed over columns and averaged
    /// over rows. `probs` must already be clamped away from 0 and 1.
    pub fn weighted_bce(&mut self, probs: Var, labels: Matrix, weights: Vec<f64>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), labels.dim(), "bce shape");
        assert_eq!(p.ncols(), weights.len(), "bce weights");
        let n = p.nrows().max(1) as f64;
        let mut total = 0.0;
        for ((r, c), x) in p.indexed_iter() {
            let y = labels[[r, c]];
            total -= weights[c] * (y * x.ln() + (1.0 - y) * (1.0 - x).ln());
        }
        self.push(
            scalar(total / n),
            Op::WeightedBce {
                probs,
                labels,
                weights,
            },
        )
    }

    /// Looks up rows of an embedding table.
    pub fn embed_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros((ids.len(), t.ncols()));
        for (r, id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(*id));
        }
        self.push(v, Op::EmbedRows(table, ids))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let ga = &g * self.value(*col);
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::AddN(xs) => {
                    for x in xs {
                        acc(&mut grads, *x, g.clone());
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mask = x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let mask = x.mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let w = self.value(*x).ncols();
                        acc(&mut grads, *x, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let n = x.len().max(1) as f64;
                    acc(&mut grads, *a, Matrix::from_elem(x.dim(), g[[0, 0]] / n));
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (&g - &(y * &dot)) / &norms.view().insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_mode,
                } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let gx = if *batch_mode {
                        let n = dxhat.nrows() as f64;
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        let inner = &(&dxhat * n - &sum_d) - &(xhat * &sum_dx);
                        inner * inv_std / n
                    } else {
                        dxhat * inv_std
                    };
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Matrix::zeros(self.value(*a).dim());
                    for (k, pos) in idx.iter().enumerate() {
                        ga[*pos] += g[[k, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedBce {
                    probs,
                    labels,
                    weights,
                } => {
                    let p = self.value(*probs);
                    let n = p.nrows().max(1) as f64;
                    let scale = g[[0, 0]] / n;
                    let ga = Matrix::from_shape_fn(p.dim(), |(r, c)| {
                        let x = p[[r, c]];
                        let y = labels[[r, c]];
                        -scale * weights[c] * (y / x - (1.0 - y) / (1.0 - x))
                    });
                    acc(&mut grads, *probs, ga);
                }
                Op::EmbedRows(table, ids) => {
                    let mut gt = Matrix::zeros(self.value(*table).dim());
                    for (r, id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(*id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn param_of(&self, v: usize) -> Option<ParamId> {
        match self.nodes[v].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-filled when `v` did not influence
    /// the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(tape.value(v).dim()))
    }

    /// Sums gradients of every parameter leaf into per-parameter matrices.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store.ids().map(|id| Matrix::zeros(store.get(id).dim())).collect();
        for (i, g) in self.grads.iter().enumerate() {
            if let (Some(g), Some(id)) = (g, tape.param_of(i)) {
                out[id.0] += g;
            }
        }
        out
    }
}

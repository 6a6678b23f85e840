//! Image and text towers projecting into the shared latent space.
//!
//! The text tower runs word vectors through an optional bidirectional
//! recurrent layer, pools the per-token states (learned attention or a plain
//! mean) and maps the pooled state through batch normalization and a linear
//! layer. The image tower applies the same normalization + linear bottleneck
//! to backbone features.

use std::io::Cursor;

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::dataset::{EmbeddingTable, ImageRef, TokenSequence};
use crate::error::{Error, Result};

/// Source of image features fed to the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageBackbone {
    /// Features precomputed by a pretrained CNN and attached to each pair as
    /// a number array.
    PretrainedCnn,
    /// Frozen colour-grid pooling over the decoded, resized image.
    PixelPool,
    /// Synthetic pseudo-image vectors used as-is.
    ToyMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextRnn {
    #[serde(rename = "bilstm-1-layer")]
    BiLstm,
    #[serde(rename = "bigru-1-layer")]
    BiGru,
    /// No recurrence: word vectors are pooled directly.
    ToyMeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Attention,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub backbone: ImageBackbone,
    pub text_rnn: TextRnn,
    pub pooling: Pooling,
    pub shared_dim: usize,
    pub image_size: usize,
    /// Width of backbone features (pseudo-image length for `toy-mlp`).
    pub image_feature_dim: usize,
    pub word_dim: usize,
    /// Hidden units per direction of the recurrent layer.
    pub rnn_hidden: usize,
    pub fine_tune_embeddings: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Side length of the colour grid used by the pixel-pool backbone.
pub const PIXEL_GRID: usize = 8;

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            backbone: ImageBackbone::PixelPool,
            text_rnn: TextRnn::BiLstm,
            pooling: Pooling::Attention,
            shared_dim: 1024,
            image_size: 224,
            image_feature_dim: 3 * PIXEL_GRID * PIXEL_GRID,
            word_dim: 300,
            rnn_hidden: 256,
            fine_tune_embeddings: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderParams {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 {
            return Err(Error::Parameter("shared dimension must be at least 1".into()));
        }
        if self.word_dim == 0 || self.image_feature_dim == 0 {
            return Err(Error::Parameter("word and image feature dimensions must be positive".into()));
        }
        if self.text_rnn != TextRnn::ToyMeanPool && self.rnn_hidden == 0 {
            return Err(Error::Parameter("recurrent layer needs hidden units".into()));
        }
        if self.backbone == ImageBackbone::PixelPool && self.image_feature_dim != 3 * PIXEL_GRID * PIXEL_GRID {
            return Err(Error::Parameter(format!(
                "pixel-pool backbone yields {} features, configured {}",
                3 * PIXEL_GRID * PIXEL_GRID,
                self.image_feature_dim
            )));
        }
        Ok(())
    }

    /// Width of the pooled per-token state.
    pub fn pooled_dim(&self) -> usize {
        match self.text_rnn {
            TextRnn::ToyMeanPool => self.word_dim,
            TextRnn::BiLstm | TextRnn::BiGru => 2 * self.rnn_hidden,
        }
    }
}

/// A vector in the shared latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEmbedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SharedEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            values: self.values.iter().map(|x| x / n).collect(),
            normalized: true,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Attention over token positions, zero on padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
}

impl AttentionWeights {
    /// Nonnegative, exactly zero on masked positions, summing to one over
    /// live positions.
    pub fn check(&self, mask: &[bool]) -> Result<()> {
        if self.weights.len() != mask.len() {
            return Err(Error::Invariant("attention length differs from mask".into()));
        }
        let mut total = 0.0;
        for (w, live) in self.weights.iter().zip(mask) {
            if *w < 0.0 || !w.is_finite() {
                return Err(Error::Invariant(format!("attention weight {w}")));
            }
            if !live && *w != 0.0 {
                return Err(Error::Invariant("attention on a padded position".into()));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Invariant(format!("attention sums to {total}")));
        }
        Ok(())
    }
}

/// Softmax over the unmasked entries of `scores`; masked entries get zero.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!("{} scores, {} mask entries", scores.len(), mask.len())));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::EmptySequence);
    }
    let exps: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(s, m)| if *m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Attention pooling with a single learned scoring vector:
/// `score_i = state_i · scorer`, weights are the masked softmax of the
/// scores and the pooled state is the weighted sum of states.
pub fn attention_pool(hidden: &Matrix, mask: &[bool], scorer: &[f64]) -> Result<(Vec<f64>, AttentionWeights)> {
    if hidden.nrows() != mask.len() {
        return Err(Error::Shape(format!("{} states, {} mask entries", hidden.nrows(), mask.len())));
    }
    if hidden.ncols() != scorer.len() {
        return Err(Error::Shape(format!("state width {}, scorer {}", hidden.ncols(), scorer.len())));
    }
    let scorer = Array1::from(scorer.to_vec());
    let scores = hidden.dot(&scorer).to_vec();
    let weights = masked_softmax(&scores, mask)?;
    let pooled = hidden.t().dot(&Array1::from(weights.clone())).to_vec();
    Ok((pooled, AttentionWeights { weights }))
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Linear layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), uniform(rng, input, output, bound)),
            b: store.add(format!("{name}.b"), uniform(rng, 1, output, bound)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Matrix::zeros((1, dim))),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        if train {
            tape.batch_norm(x, g, b, None, self.eps)
        } else {
            tape.batch_norm(x, g, b, Some((&self.running_mean, &self.running_var)), self.eps)
        }
    }

    /// Folds the batch statistics of a training-mode node into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, tape: &Tape, node: Var) {
        if let Some(stats) = tape.batch_stats(node) {
            let n = tape.value(node).nrows() as f64;
            let unbiased = if n > 1.0 { &stats.var * (n / (n - 1.0)) } else { stats.var };
            let m = self.momentum;
            self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
            self.running_var = &self.running_var * (1.0 - m) + &unbiased * m;
        }
    }
}

/// Packed-gate recurrent weights for one direction.
#[derive(Clone, Copy, Debug)]
struct RnnDirection {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl RnnDirection {
    fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize, gates: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = uniform(rng, 1, gates * hidden, bound);
        if gates == 4 {
            // forget-gate bias starts at one
            b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        }
        Self {
            w_x: store.add(format!("{name}.w_x"), uniform(rng, input, gates * hidden, bound)),
            w_h: store.add(format!("{name}.w_h"), uniform(rng, hidden, gates * hidden, bound)),
            b: store.add(format!("{name}.b"), b),
        }
    }
}

/// Inputs for one text batch, laid out time-major.
pub struct TextBatch {
    pub batch: usize,
    pub steps: usize,
    /// `steps * batch` word ids; row `t * batch + i` is token `t` of item `i`.
    pub ids: Vec<usize>,
    /// `batch x steps`, one where a real token sits.
    pub mask: Matrix,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(seqs: &[&TokenSequence], vocab_size: usize) -> Result<Self> {
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Input("empty text batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.length).collect();
        if lengths.contains(&0) {
            return Err(Error::EmptySequence);
        }
        let steps = *lengths.iter().max().expect("non-empty");
        let mut ids = vec![crate::dataset::PAD_ID; steps * batch];
        let mut mask = Matrix::zeros((batch, steps));
        for (i, s) in seqs.iter().enumerate() {
            for (t, &id) in s.real_ids().iter().enumerate() {
                if id >= vocab_size {
                    return Err(Error::Input(format!(
                        "token id {id} outside embedding table of {vocab_size} rows"
                    )));
                }
                ids[t * batch + i] = id;
                mask[[i, t]] = 1.0;
            }
        }
        Ok(Self {
            batch,
            steps,
            ids,
            mask,
            lengths,
        })
    }

    fn step_mask(&self, t: usize) -> Matrix {
        self.mask.slice(ndarray::s![.., t..t + 1]).to_owned()
    }
}

/// Output of the text tower on a tape.
pub struct TextForward {
    pub embedding: Var,
    /// `batch x steps` attention weights.
    pub attention: Var,
    pub bn_node: Var,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub params: EncoderParams,
    pub embeddings: ParamId,
    fwd: Option<RnnDirection>,
    bwd: Option<RnnDirection>,
    attention: Option<ParamId>,
    pub bn: BatchNorm,
    pub proj: Linear,
}

impl TextTower {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, params: &EncoderParams, table: &EmbeddingTable) -> Result<Self> {
        if table.dim != params.word_dim {
            return Err(Error::Parameter(format!(
                "embedding table has dim {}, encoder expects {}",
                table.dim, params.word_dim
            )));
        }
        let embeddings = if params.fine_tune_embeddings {
            store.add("text.embeddings", table.vectors.clone())
        } else {
            store.add_frozen("text.embeddings", table.vectors.clone())
        };
        let gates = match params.text_rnn {
            TextRnn::BiLstm => 4,
            TextRnn::BiGru => 3,
            TextRnn::ToyMeanPool => 0,
        };
        let (fwd, bwd) = if gates > 0 {
            (
                Some(RnnDirection::init(store, rng, "text.rnn.fwd", params.word_dim, params.rnn_hidden, gates)),
                Some(RnnDirection::init(store, rng, "text.rnn.bwd", params.word_dim, params.rnn_hidden, gates)),
            )
        } else {
            (None, None)
        };
        let pooled = params.pooled_dim();
        let attention = match params.pooling {
            Pooling::Attention => {
                let bound = 1.0 / (pooled as f64).sqrt();
                Some(store.add("text.attention.w", uniform(rng, pooled, 1, bound)))
            }
            Pooling::Mean => None,
        };
        let bn = BatchNorm::init(store, "text.bn", pooled, params.bn_eps, params.bn_momentum);
        let proj = Linear::init(store, rng, "text.proj", pooled, params.shared_dim);
        Ok(Self {
            params: params.clone(),
            embeddings,
            fwd,
            bwd,
            attention,
            bn,
            proj,
        })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.embeddings).nrows()
    }

    fn inputs(&self, tape: &mut Tape, store: &ParamStore, batch: &TextBatch) -> Var {
        if store.is_frozen(self.embeddings) {
            let table = store.get(self.embeddings);
            let mut x = Matrix::zeros((batch.ids.len(), table.ncols()));
            for (r, id) in batch.ids.iter().enumerate() {
                x.row_mut(r).assign(&table.row(*id));
            }
            tape.constant(x)
        } else {
            let table = tape.param(store, self.embeddings);
            tape.embed_rows(table, batch.ids.clone())
        }
    }

    /// Runs one direction and returns the hidden state at every step. State
    /// only advances on real tokens, so padding never leaks into it.
    fn run_direction(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dir: RnnDirection,
        projected: Var,
        batch: &TextBatch,
        reverse: bool,
    ) -> Vec<Var> {
        let h_dim = self.params.rnn_hidden;
        let b = batch.batch;
        let w_h = tape.param(store, dir.w_h);
        let bias = tape.param(store, dir.b);
        let mut h = tape.constant(Matrix::zeros((b, h_dim)));
        let mut c = tape.constant(Matrix::zeros((b, h_dim)));
        let mut out = vec![h; batch.steps];
        let order: Vec<usize> = if reverse {
            (0..batch.steps).rev().collect()
        } else {
            (0..batch.steps).collect()
        };
        for t in order {
            let x_t = tape.slice_rows(projected, t * b, b);
            let m = batch.step_mask(t);
            let keep = m.mapv(|v| 1.0 - v);
            let m = tape.constant(m);
            let keep = tape.constant(keep);
            match self.params.text_rnn {
                TextRnn::BiLstm => {
                    let rec = tape.matmul(h, w_h);
                    let gates = tape.add(x_t, rec);
                    let gates = tape.add_row(gates, bias);
                    let i = tape.slice_cols(gates, 0, h_dim);
                    let i = tape.sigmoid(i);
                    let f = tape.slice_cols(gates, h_dim, h_dim);
                    let f = tape.sigmoid(f);
                    let g = tape.slice_cols(gates, 2 * h_dim, h_dim);
                    let g = tape.tanh(g);
                    let o = tape.slice_cols(gates, 3 * h_dim, h_dim);
                    let o = tape.sigmoid(o);
                    let fc = tape.mul(f, c);
                    let ig = tape.mul(i, g);
                    let c_new = tape.add(fc, ig);
                    let tc = tape.tanh(c_new);
                    let h_new = tape.mul(o, tc);
                    c = blend(tape, c_new, c, m, keep);
                    h = blend(tape, h_new, h, m, keep);
                }
                TextRnn::BiGru => {
                    let rec = tape.matmul(h, w_h);
                    let rec_b = tape.add_row(rec, bias);
                    let xz = tape.slice_cols(x_t, 0, h_dim);
                    let hz = tape.slice_cols(rec_b, 0, h_dim);
                    let z = tape.add(xz, hz);
                    let z = tape.sigmoid(z);
                    let xr = tape.slice_cols(x_t, h_dim, h_dim);
                    let hr = tape.slice_cols(rec_b, h_dim, h_dim);
                    let r = tape.add(xr, hr);
                    let r = tape.sigmoid(r);
                    let xn = tape.slice_cols(x_t, 2 * h_dim, h_dim);
                    let hn = tape.slice_cols(rec_b, 2 * h_dim, h_dim);
                    let rhn = tape.mul(r, hn);
                    let n = tape.add(xn, rhn);
                    let n = tape.tanh(n);
                    let one_minus_z = tape.one_minus(z);
                    let a = tape.mul(one_minus_z, n);
                    let bz = tape.mul(z, h);
                    let h_new = tape.add(a, bz);
                    h = blend(tape, h_new, h, m, keep);
                }
                TextRnn::ToyMeanPool => unreachable!("no recurrence"),
            }
            out[t] = h;
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &TextBatch, train: bool) -> TextForward {
        let x = self.inputs(tape, store, batch);
        let states: Vec<Var> = match (self.fwd, self.bwd) {
            (Some(fwd), Some(bwd)) => {
                let wf = tape.param(store, fwd.w_x);
                let wb = tape.param(store, bwd.w_x);
                let pf = tape.matmul(x, wf);
                let pb = tape.matmul(x, wb);
                let hf = self.run_direction(tape, store, fwd, pf, batch, false);
                let hb = self.run_direction(tape, store, bwd, pb, batch, true);
                hf.into_iter().zip(hb).map(|(f, b)| tape.concat_cols(&[f, b])).collect()
            }
            _ => (0..batch.steps)
                .map(|t| tape.slice_rows(x, t * batch.batch, batch.batch))
                .collect(),
        };
        let attention = match self.attention {
            Some(w) => {
                let w = tape.param(store, w);
                let scores: Vec<Var> = states.iter().map(|s| tape.matmul(*s, w)).collect();
                let scores = tape.concat_cols(&scores);
                tape.masked_softmax(scores, &batch.mask)
            }
            None => {
                let mut weights = batch.mask.clone();
                for (mut row, len) in weights.rows_mut().into_iter().zip(&batch.lengths) {
                    row.mapv_inplace(|v| v / *len as f64);
                }
                tape.constant(weights)
            }
        };
        let weighted: Vec<Var> = states
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let w_t = tape.slice_cols(attention, t, 1);
                tape.mul_col(*s, w_t)
            })
            .collect();
        let pooled = tape.add_n(&weighted);
        let bn_node = self.bn.forward(tape, store, pooled, train);
        let embedding = self.proj.forward(tape, store, bn_node);
        TextForward {
            embedding,
            attention,
            bn_node,
        }
    }
}

/// `m * new + (1 - m) * old`, row-wise.
fn blend(tape: &mut Tape, new: Var, old: Var, m: Var, keep: Var) -> Var {
    let a = tape.mul_col(new, m);
    let b = tape.mul_col(old, keep);
    tape.add(a, b)
}

pub struct ImageForward {
    pub embedding: Var,
    pub bn_node: Var,
}

#[derive(Clone, Debug)]
pub struct ImageTower {
    pub params: EncoderParams,
    pub bn: BatchNorm,
    pub proj: Linear,
}

impl ImageTower {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, params: &EncoderParams) -> Self {
        let f = params.image_feature_dim;
        Self {
            params: params.clone(),
            bn: BatchNorm::init(store, "image.bn", f, params.bn_eps, params.bn_momentum),
            proj: Linear::init(store, rng, "image.proj", f, params.shared_dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Matrix, train: bool) -> ImageForward {
        let x = tape.constant(features);
        let bn_node = self.bn.forward(tape, store, x, train);
        let embedding = self.proj.forward(tape, store, bn_node);
        ImageForward { embedding, bn_node }
    }
}

/// Backbone features for one image.
pub fn image_features(image: &ImageRef, params: &EncoderParams, pair_id: &str) -> Result<Vec<f64>> {
    match (params.backbone, image) {
        (ImageBackbone::ToyMlp | ImageBackbone::PretrainedCnn, ImageRef::Vector(v)) => {
            if v.len() != params.image_feature_dim {
                return Err(Error::Parameter(format!(
                    "pair {pair_id}: image vector has {} entries, backbone expects {}",
                    v.len(),
                    params.image_feature_dim
                )));
            }
            Ok(v.clone())
        }
        (ImageBackbone::ToyMlp, _) => Err(Error::Input(format!(
            "pair {pair_id}: toy backbone needs a pseudo-image vector"
        ))),
        (ImageBackbone::PretrainedCnn, _) => Err(Error::Input(format!(
            "pair {pair_id}: pretrained-cnn backbone needs precomputed feature vectors; attach them at ingest"
        ))),
        (ImageBackbone::PixelPool, ImageRef::Vector(_)) => Err(Error::Input(format!(
            "pair {pair_id}: pixel-pool backbone needs an encoded image, got a vector"
        ))),
        (ImageBackbone::PixelPool, ImageRef::Path(p)) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            pixel_pool(&bytes, params.image_size, pair_id)
        }
        (ImageBackbone::PixelPool, ImageRef::Encoded(bytes)) => pixel_pool(bytes, params.image_size, pair_id),
    }
}

/// Decodes, resizes to `size x size` and averages each channel over a
/// `PIXEL_GRID x PIXEL_GRID` grid of cells, scaled to `[0, 1]`.
pub fn pixel_pool(bytes: &[u8], size: usize, pair_id: &str) -> Result<Vec<f64>> {
    let img = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Input(format!("pair {pair_id}: undecodable image: {e}")))?
        .decode()
        .map_err(|e| Error::Input(format!("pair {pair_id}: undecodable image: {e}")))?;
    let size = size.max(PIXEL_GRID) as u32;
    let rgb = img
        .resize_exact(size, size, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let cell = size as usize / PIXEL_GRID;
    let mut out = vec![0.0; 3 * PIXEL_GRID * PIXEL_GRID];
    for gy in 0..PIXEL_GRID {
        for gx in 0..PIXEL_GRID {
            let mut sums = [0.0f64; 3];
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    let p = rgb.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        sums[ch] += f64::from(p[ch]);
                    }
                }
            }
            let n = (cell * cell) as f64 * 255.0;
            for ch in 0..3 {
                out[ch * PIXEL_GRID * PIXEL_GRID + gy * PIXEL_GRID + gx] = sums[ch] / n;
            }
        }
    }
    Ok(out)
}

/// Mask vector of a token sequence.
pub fn sequence_mask(seq: &TokenSequence) -> Vec<bool> {
    (0..seq.max_len).map(|i| i < seq.length).collect()
}

/// Row-normalizes a matrix, failing on zero rows.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| *n == 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(m / &norms.insert_axis(Axis(1)))
}

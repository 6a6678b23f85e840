//! Loss functions: cosine similarity, bidirectional triplet loss with
//! in-batch hardest negatives, the coherence head, class-weighted binary
//! cross-entropy and their combination.
//!
//! Every loss exists twice: as a plain function over matrices (the reference
//! used by tests and tools) and as a tape construction used for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamStore, Tape, Var};
use crate::encoders::{Linear, SharedEmbedding};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Which coherence relations the auxiliary head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "relation")]
pub enum HeadMode {
    AllRelations,
    SingleRelation(usize),
    /// No head at all.
    Agnostic,
}

impl HeadMode {
    /// Output width for a vocabulary of `n_relations`, `None` when agnostic.
    pub fn width(&self, n_relations: usize) -> Option<usize> {
        match self {
            HeadMode::AllRelations => Some(n_relations),
            HeadMode::SingleRelation(_) => Some(1),
            HeadMode::Agnostic => None,
        }
    }

    /// Vocabulary indices of the predicted relations, in output order.
    pub fn relations(&self, n_relations: usize) -> Vec<usize> {
        match self {
            HeadMode::AllRelations => (0..n_relations).collect(),
            HeadMode::SingleRelation(c) => vec![*c],
            HeadMode::Agnostic => Vec::new(),
        }
    }
}

/// How the two normalized embeddings are combined before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    #[default]
    Concat,
    Product,
}

impl HeadInput {
    pub fn width(&self, shared_dim: usize) -> usize {
        match self {
            HeadInput::Concat => 2 * shared_dim,
            HeadInput::Product => shared_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_cls: f64,
    pub mode: HeadMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            lambda_cls: 0.1,
            mode: HeadMode::AllRelations,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Parameter(format!("margin {} must be nonnegative", self.margin)));
        }
        if !(self.lambda_cls >= 0.0) {
            return Err(Error::Parameter(format!("lambda_cls {} must be nonnegative", self.lambda_cls)));
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarities between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("widths {} and {}", a.ncols(), b.ncols())));
    }
    let an = crate::encoders::normalize_rows(a)?;
    let bn = crate::encoders::normalize_rows(b)?;
    Ok(an.dot(&bn.t()).mapv(|x| x.clamp(-1.0, 1.0)))
}

/// Text and image embeddings of one batch, aligned by row.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub text: Matrix,
    pub image: Matrix,
}

impl BatchEmbeddings {
    pub fn new(text: Matrix, image: Matrix) -> Result<Self> {
        if text.nrows() != image.nrows() {
            return Err(Error::Shape(format!("{} texts, {} images", text.nrows(), image.nrows())));
        }
        Ok(Self { text, image })
    }

    pub fn len(&self) -> usize {
        self.text.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.text.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    /// Per text anchor, the hardest non-matching image.
    pub image_for_text: Vec<usize>,
    /// Per image anchor, the hardest non-matching text.
    pub text_for_image: Vec<usize>,
}

/// Hardest negatives from a text x image similarity matrix. Ties go to the
/// lowest index.
pub fn mine_from_similarity(sim: &Matrix) -> Result<HardNegatives> {
    let b = sim.nrows();
    if b < 2 || sim.ncols() != b {
        return Err(Error::Input(format!(
            "hard-negative mining needs a square batch of at least 2, got {}x{}",
            b,
            sim.ncols()
        )));
    }
    let argmax_excluding = |get: &dyn Fn(usize) -> f64, skip: usize| {
        let mut best = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..b {
            if j != skip && (best == usize::MAX || get(j) > best_val) {
                best = j;
                best_val = get(j);
            }
        }
        best
    };
    let image_for_text = (0..b).map(|i| argmax_excluding(&|j| sim[[i, j]], i)).collect();
    let text_for_image = (0..b).map(|j| argmax_excluding(&|i| sim[[i, j]], j)).collect();
    Ok(HardNegatives {
        image_for_text,
        text_for_image,
    })
}

pub fn mine_hard_negatives(batch: &BatchEmbeddings) -> Result<HardNegatives> {
    if batch.len() < 2 {
        return Err(Error::Input("hard-negative mining needs a batch of at least 2".into()));
    }
    mine_from_similarity(&cosine_matrix(&batch.text, &batch.image)?)
}

/// One direction of the hinge: `max(0, margin - s(a,p) + s(a,n))`.
pub fn triplet_term(pos: f64, neg: f64, margin: f64) -> f64 {
    (margin - pos + neg).max(0.0)
}

/// Mean over the batch of both hinge directions with hardest negatives.
pub fn triplet_retrieval_loss(batch: &BatchEmbeddings, margin: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Input("triplet loss needs a batch of at least 2".into()));
    }
    let sim = cosine_matrix(&batch.text, &batch.image)?;
    let neg = mine_from_similarity(&sim)?;
    let b = batch.len();
    let total: f64 = (0..b)
        .map(|i| {
            triplet_term(sim[[i, i]], sim[[i, neg.image_for_text[i]]], margin)
                + triplet_term(sim[[i, i]], sim[[neg.text_for_image[i], i]], margin)
        })
        .sum();
    Ok(total / b as f64)
}

/// Linear + sigmoid head over the combined normalized embeddings.
#[derive(Clone, Copy, Debug)]
pub struct CoherenceHead {
    pub linear: Linear,
    pub input: HeadInput,
    pub width: usize,
}

impl CoherenceHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        shared_dim: usize,
        input: HeadInput,
        width: usize,
    ) -> Self {
        Self {
            linear: Linear::init(store, rng, "head", input.width(shared_dim), width),
            input,
            width,
        }
    }

    /// Probabilities for aligned rows of `text` and `image`. When `detach`
    /// is set no gradient reaches the towers.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, text: Var, image: Var, detach: bool) -> Var {
        let (mut t, mut v) = (tape.l2_normalize_rows(text), tape.l2_normalize_rows(image));
        if detach {
            t = tape.constant(tape.value(t).clone());
            v = tape.constant(tape.value(v).clone());
        }
        let x = match self.input {
            HeadInput::Concat => tape.concat_cols(&[t, v]),
            HeadInput::Product => tape.mul(t, v),
        };
        let logits = self.linear.forward(tape, store, x);
        let p = tape.sigmoid(logits);
        tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Probabilities for every (text row, image row) combination, one
    /// `texts x images` matrix per output column. Inputs must already be
    /// row-normalized. The head is linear in its input, so the logits split
    /// into a text part and an image part.
    pub fn all_pairs(&self, store: &ParamStore, text: &Matrix, image: &Matrix) -> Vec<Matrix> {
        let w = store.get(self.linear.w);
        let b = store.get(self.linear.b);
        let d = text.ncols();
        (0..self.width)
            .map(|c| {
                let logits = match self.input {
                    HeadInput::Concat => {
                        let wt = w.slice(ndarray::s![..d, c]);
                        let wv = w.slice(ndarray::s![d.., c]);
                        let lt = text.dot(&wt);
                        let lv = image.dot(&wv);
                        Matrix::from_shape_fn((text.nrows(), image.nrows()), |(i, j)| lt[i] + lv[j] + b[[0, c]])
                    }
                    HeadInput::Product => {
                        let wc = w.column(c);
                        let scaled = text * &wc.insert_axis(ndarray::Axis(0));
                        scaled.dot(&image.t()) + b[[0, c]]
                    }
                };
                logits.mapv(|z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
            })
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Reference head evaluation for one pair. `weights` is `input width x
/// output width`, `bias` has one entry per output.
pub fn coherence_head(
    text: &SharedEmbedding,
    image: &SharedEmbedding,
    weights: &Matrix,
    bias: &[f64],
    input: HeadInput,
    mode: HeadMode,
) -> Result<Vec<f64>> {
    if mode == HeadMode::Agnostic {
        return Err(Error::NoCoherenceHead);
    }
    let t = text.normalized()?;
    let v = image.normalized()?;
    if t.values.len() != v.values.len() {
        return Err(Error::Shape("text and image embeddings differ in width".into()));
    }
    let x: Vec<f64> = match input {
        HeadInput::Concat => t.values.iter().chain(&v.values).copied().collect(),
        HeadInput::Product => t.values.iter().zip(&v.values).map(|(a, b)| a * b).collect(),
    };
    if weights.nrows() != x.len() || weights.ncols() != bias.len() {
        return Err(Error::Shape(format!(
            "head weights {}x{} with bias {} for input {}",
            weights.nrows(),
            weights.ncols(),
            bias.len(),
            x.len()
        )));
    }
    if matches!(mode, HeadMode::SingleRelation(_)) && bias.len() != 1 {
        return Err(Error::Shape("single-relation head must have one output".into()));
    }
    Ok((0..bias.len())
        .map(|c| {
            let z: f64 = x.iter().enumerate().map(|(k, xk)| xk * weights[[k, c]]).sum::<f64>() + bias[c];
            sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights {
    pub weights: Vec<f64>,
}

/// `w_c = 1 / rate_c`; rates must lie strictly inside (0, 1).
pub fn relation_weights(rates: &[(String, f64)]) -> Result<RelationWeights> {
    let weights = rates
        .iter()
        .map(|(name, r)| {
            if *r > 0.0 && *r < 1.0 {
                Ok(1.0 / r)
            } else {
                Err(Error::DegenerateRelation {
                    relation: name.clone(),
                    rate: *r,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelationWeights { weights })
}

/// Weighted binary cross-entropy summed over relations and averaged over
/// pairs. Nonnegative.
pub fn weighted_bce(probs: &Matrix, labels: &Matrix, weights: &RelationWeights) -> Result<f64> {
    if probs.dim() != labels.dim() || probs.ncols() != weights.weights.len() {
        return Err(Error::Shape(format!(
            "probs {:?}, labels {:?}, {} weights",
            probs.dim(),
            labels.dim(),
            weights.weights.len()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::Input("no pairs".into()));
    }
    let mut total = 0.0;
    for ((r, c), p) in probs.indexed_iter() {
        let y = labels[[r, c]];
        total -= weights.weights[c] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(total / probs.nrows() as f64)
}

/// `ret + lambda_cls * cls`, or `ret` alone when there is no head.
pub fn total_loss(ret: f64, cls: Option<f64>, lambda_cls: f64) -> f64 {
    match cls {
        Some(cls) => ret + lambda_cls * cls,
        None => ret,
    }
}

/// Tape version of [`triplet_retrieval_loss`]; returns the loss node and the
/// mined negatives.
pub fn triplet_loss_on_tape(tape: &mut Tape, text: Var, image: Var, margin: f64) -> Result<(Var, HardNegatives)> {
    let tn = tape.l2_normalize_rows(text);
    let vn = tape.l2_normalize_rows(image);
    let sim = tape.matmul_t(tn, vn);
    let neg = mine_from_similarity(tape.value(sim))?;
    let b = neg.image_for_text.len();
    let pos = tape.gather(sim, (0..b).map(|i| (i, i)).collect());
    let neg_t = tape.gather(sim, (0..b).map(|i| (i, neg.image_for_text[i])).collect());
    let neg_v = tape.gather(sim, (0..b).map(|j| (neg.text_for_image[j], j)).collect());
    let d_t = tape.sub(neg_t, pos);
    let d_t = tape.add_scalar(d_t, margin);
    let d_t = tape.relu(d_t);
    let d_v = tape.sub(neg_v, pos);
    let d_v = tape.add_scalar(d_v, margin);
    let d_v = tape.relu(d_v);
    let both = tape.add(d_t, d_v);
    Ok((tape.mean(both), neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamId;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_hand_cases() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&[3.0, -2.0], &[3.0, -2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&[3.0, -2.0], &[-3.0, 2.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let s1 = cosine_similarity(&a, &b).unwrap();
            let s2 = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-6);
            prop_assert!((s1 - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn scaling_images_keeps_negatives(seed in 0u64..1000, b in 2usize..10, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = BatchEmbeddings::new(random(&mut rng, b, 5), random(&mut rng, b, 5)).unwrap();
            let scaled = BatchEmbeddings::new(batch.text.clone(), &batch.image * c).unwrap();
            prop_assert_eq!(mine_hard_negatives(&batch).unwrap(), mine_hard_negatives(&scaled).unwrap());
        }

        #[test]
        fn triplet_loss_nonnegative_and_zero_iff_margins_hold(seed in 0u64..1000, b in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = BatchEmbeddings::new(random(&mut rng, b, 4), random(&mut rng, b, 4)).unwrap();
            let loss = triplet_retrieval_loss(&batch, 0.3).unwrap();
            prop_assert!(loss >= 0.0);
            let sim = cosine_matrix(&batch.text, &batch.image).unwrap();
            let neg = mine_hard_negatives(&batch).unwrap();
            let all_hold = (0..b).all(|i| {
                sim[[i, i]] - sim[[i, neg.image_for_text[i]]] >= 0.3
                    && sim[[i, i]] - sim[[neg.text_for_image[i], i]] >= 0.3
            });
            prop_assert_eq!(loss == 0.0, all_hold);
        }

        #[test]
        fn bce_decreases_as_positive_probability_rises(p in 0.01f64..0.98, dp in 0.001f64..0.01) {
            let w = RelationWeights { weights: vec![1.3] };
            let y = array![[1.0]];
            let lo = weighted_bce(&array![[p]], &y, &w).unwrap();
            let hi = weighted_bce(&array![[p + dp]], &y, &w).unwrap();
            prop_assert!(hi < lo);
            prop_assert!(hi >= 0.0);
        }
    }

    #[test]
    fn parallel_image_is_hardest_negative() {
        let text = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let image = array![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.01, 0.0]];
        let neg = mine_hard_negatives(&BatchEmbeddings::new(text, image).unwrap()).unwrap();
        assert_eq!(neg.image_for_text[0], 2);
    }

    #[test]
    fn two_row_batch_and_ties() {
        let sim = array![[0.9, 0.1], [0.2, 0.8]];
        let neg = mine_from_similarity(&sim).unwrap();
        assert_eq!(neg.image_for_text, vec![1, 0]);
        assert_eq!(neg.text_for_image, vec![1, 0]);
        let tied = array![[1.0, 0.5, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(mine_from_similarity(&tied).unwrap().image_for_text[0], 1);
        assert!(mine_from_similarity(&array![[1.0]]).is_err());
    }

    #[test]
    fn hinge_hand_cases() {
        assert_abs_diff_eq!(triplet_term(0.9, 0.5, 0.3), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(triplet_term(0.6, 0.5, 0.3), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(triplet_term(0.4, 0.4, 0.3), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn relation_weight_reciprocals() {
        let w = relation_weights(&[("Visible".into(), 0.674), ("ImageNeeded".into(), 0.115), ("x".into(), 0.5)]).unwrap();
        assert_abs_diff_eq!(w.weights[0], 1.0 / 0.674, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[0], 1.4837, epsilon = 1e-4);
        assert_abs_diff_eq!(w.weights[1], 8.6957, epsilon = 1e-4);
        assert_eq!(w.weights[2], 2.0);
        for bad in [0.0, 1.0, 1.2] {
            assert!(matches!(
                relation_weights(&[("r".into(), bad)]),
                Err(Error::DegenerateRelation { .. })
            ));
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn bce_hand_cases() {
        let one = RelationWeights { weights: vec![1.0] };
        let two = RelationWeights { weights: vec![2.0] };
        assert_abs_diff_eq!(weighted_bce(&array![[0.5]], &array![[1.0]], &one).unwrap(), 0.6931, epsilon = 1e-4);
        assert_abs_diff_eq!(weighted_bce(&array![[0.9]], &array![[0.0]], &two).unwrap(), 4.6052, epsilon = 1e-4);
        let near = weighted_bce(&array![[1.0 - PROB_EPS]], &array![[1.0]], &one).unwrap();
        assert!(near < 1e-6);
        assert!(weighted_bce(&array![[0.5, 0.5]], &array![[1.0]], &one).is_err());
    }

    #[test]
    fn total_loss_combination() {
        assert_abs_diff_eq!(total_loss(0.2, Some(1.0), 0.1), 0.3, epsilon = 1e-12);
        assert_eq!(total_loss(0.2, Some(5.0), 0.0), 0.2);
        assert_eq!(total_loss(0.2, None, 0.1), 0.2);
    }

    #[test]
    fn head_zero_weights_give_half() {
        let t = SharedEmbedding::new(vec![1.0, 2.0]);
        let v = SharedEmbedding::new(vec![-1.0, 0.5]);
        let p = coherence_head(&t, &v, &Matrix::zeros((4, 3)), &[0.0; 3], HeadInput::Concat, HeadMode::AllRelations).unwrap();
        assert_eq!(p, vec![0.5; 3]);
        let single =
            coherence_head(&t, &v, &Matrix::zeros((4, 1)), &[0.0], HeadInput::Concat, HeadMode::SingleRelation(2)).unwrap();
        assert_eq!(single.len(), 1);
        let extreme =
            coherence_head(&t, &v, &Matrix::from_elem((4, 1), 1e4), &[0.0], HeadInput::Concat, HeadMode::AllRelations)
                .unwrap();
        assert!(extreme[0] < 1.0 && extreme[0] > 0.0);
        assert!(matches!(
            coherence_head(&t, &v, &Matrix::zeros((4, 1)), &[0.0], HeadInput::Concat, HeadMode::Agnostic),
            Err(Error::NoCoherenceHead)
        ));
    }

    fn head_fixture(input: HeadInput, seed: u64) -> (ParamStore, CoherenceHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = CoherenceHead::init(&mut store, &mut rng, 3, input, 2);
        (store, head)
    }

    #[test]
    fn tape_head_matches_reference_and_all_pairs() {
        for input in [HeadInput::Concat, HeadInput::Product] {
            let (store, head) = head_fixture(input, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let text = random(&mut rng, 4, 3);
            let image = random(&mut rng, 4, 3);
            let mut tape = Tape::new();
            let t = tape.constant(text.clone());
            let v = tape.constant(image.clone());
            let probs = head.forward(&mut tape, &store, t, v, false);
            let pairs = head.all_pairs(
                &store,
                &crate::encoders::normalize_rows(&text).unwrap(),
                &crate::encoders::normalize_rows(&image).unwrap(),
            );
            let w = store.get(head.linear.w);
            let b: Vec<f64> = store.get(head.linear.b).row(0).to_vec();
            for i in 0..4 {
                let reference = coherence_head(
                    &SharedEmbedding::new(text.row(i).to_vec()),
                    &SharedEmbedding::new(image.row(i).to_vec()),
                    w,
                    &b,
                    input,
                    HeadMode::AllRelations,
                )
                .unwrap();
                for c in 0..2 {
                    assert_abs_diff_eq!(tape.value(probs)[[i, c]], reference[c], epsilon = 1e-12);
                    assert_abs_diff_eq!(pairs[c][[i, i]], reference[c], epsilon = 1e-12);
                }
            }
            // off-diagonal entry against the reference
            let r = coherence_head(
                &SharedEmbedding::new(text.row(1).to_vec()),
                &SharedEmbedding::new(image.row(3).to_vec()),
                w,
                &b,
                input,
                HeadMode::AllRelations,
            )
            .unwrap();
            assert_abs_diff_eq!(pairs[1][[1, 3]], r[1], epsilon = 1e-12);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(analytic: &Matrix, numeric: &Matrix) {
        for (a, n) in analytic.iter().zip(numeric) {
            assert!(rel_err(*a, *n) < 1e-4 || (a - n).abs() < 1e-8, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.random_range(2..6);
            let text = random(&mut rng, b, 4);
            let image = random(&mut rng, b, 4);
            let mut tape = Tape::new();
            let t = tape.leaf(text.clone());
            let v = tape.leaf(image.clone());
            let (loss, _) = triplet_loss_on_tape(&mut tape, t, v, 0.3).unwrap();
            let reference = triplet_retrieval_loss(&BatchEmbeddings::new(text.clone(), image.clone()).unwrap(), 0.3).unwrap();
            assert_abs_diff_eq!(tape.scalar_value(loss), reference, epsilon = 1e-12);
            let grads = tape.backward(loss);
            let num_t = numeric_grad(&text, &|x| {
                triplet_retrieval_loss(&BatchEmbeddings::new(x.clone(), image.clone()).unwrap(), 0.3).unwrap()
            });
            let num_v = numeric_grad(&image, &|x| {
                triplet_retrieval_loss(&BatchEmbeddings::new(text.clone(), x.clone()).unwrap(), 0.3).unwrap()
            });
            assert_grad_close(&grads.wrt(&tape, t), &num_t);
            assert_grad_close(&grads.wrt(&tape, v), &num_v);
        }
    }

    #[test]
    fn bce_head_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (store, head) = head_fixture(HeadInput::Concat, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let text = random(&mut rng, 3, 3);
            let image = random(&mut rng, 3, 3);
            let labels = Matrix::from_shape_fn((3, 2), |_| f64::from(u8::from(rng.random_bool(0.5))));
            let weights = RelationWeights { weights: vec![1.5, 3.0] };
            let reference = |store: &ParamStore, text: &Matrix| {
                let w = store.get(head.linear.w);
                let b: Vec<f64> = store.get(head.linear.b).row(0).to_vec();
                let probs = Matrix::from_shape_vec(
                    (3, 2),
                    (0..3)
                        .flat_map(|i| {
                            coherence_head(
                                &SharedEmbedding::new(text.row(i).to_vec()),
                                &SharedEmbedding::new(image.row(i).to_vec()),
                                w,
                                &b,
                                HeadInput::Concat,
                                HeadMode::AllRelations,
                            )
                            .unwrap()
                        })
                        .collect(),
                )
                .unwrap();
                weighted_bce(&probs, &labels, &weights).unwrap()
            };
            let mut tape = Tape::new();
            let t = tape.leaf(text.clone());
            let v = tape.constant(image.clone());
            let probs = head.forward(&mut tape, &store, t, v, false);
            let loss = tape.weighted_bce(probs, labels.clone(), weights.weights.clone());
            assert_abs_diff_eq!(tape.scalar_value(loss), reference(&store, &text), epsilon = 1e-10);
            let grads = tape.backward(loss);
            assert_grad_close(&grads.wrt(&tape, t), &numeric_grad(&text, &|x| reference(&store, x)));
            let pgrads = grads.param_grads(&tape, &store);
            let w_id: ParamId = head.linear.w;
            let num_w = numeric_grad(store.get(w_id), &|x| {
                let mut s = store.clone();
                *s.get_mut(w_id) = x.clone();
                reference(&s, &text)
            });
            assert_grad_close(&pgrads[w_id.0], &num_w);
        }
    }

    #[test]
    fn detached_head_sends_no_gradient_to_embeddings() {
        let (store, head) = head_fixture(HeadInput::Concat, 1);
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::from_elem((2, 3), 0.5));
        let v = tape.leaf(Matrix::from_elem((2, 3), -0.2));
        let probs = head.forward(&mut tape, &store, t, v, true);
        let loss = tape.weighted_bce(probs, Matrix::ones((2, 2)), vec![1.0, 1.0]);
        let grads = tape.backward(loss);
        assert!(grads.wrt(&tape, t).iter().all(|g| *g == 0.0));
    }
}

//! Skip-gram word embeddings trained with negative sampling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocab, PAD_ID, UNK_ID};
use crate::error::{Error, Result};

/// One vector per vocabulary id; the pad and unknown rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn zeros(ids: usize, dim: usize) -> Self {
        Self {
            dim,
            vectors: Array2::zeros((ids, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn vector(&self, id: usize) -> Option<ndarray::ArrayView1<'_, f64>> {
        (id < self.len()).then(|| self.vectors.row(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            window: 10,
            negative: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains skip-gram vectors for every token of `vocab` on `texts`.
/// Deterministic for a given seed; runs on the calling thread only.
pub fn train_word_embeddings<S: AsRef<str>>(texts: &[S], vocab: &Vocab, config: &Word2VecConfig) -> Result<EmbeddingTable> {
    if config.dim == 0 {
        return Err(Error::Parameter("embedding dimension must be positive".into()));
    }
    if config.window == 0 {
        return Err(Error::Parameter("window must be positive".into()));
    }
    let dim = config.dim;
    let n_ids = vocab.id_count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let sentences: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            tokenize(t.as_ref())
                .iter()
                .filter_map(|tok| vocab.id(tok))
                .filter(|&id| id != UNK_ID && id != PAD_ID)
                .collect()
        })
        .collect();
    let total_words: usize = sentences.iter().map(Vec::len).sum();

    // Unigram^0.75 sampling distribution over real tokens.
    let mut cumulative = Vec::with_capacity(n_ids);
    let mut acc = 0.0;
    for id in 0..n_ids {
        if id != PAD_ID && id != UNK_ID {
            acc += (vocab.count(id) as f64).powf(0.75);
        }
        cumulative.push(acc);
    }

    let mut input = Array2::from_shape_fn((n_ids, dim), |_| (rng.random::<f64>() - 0.5) / dim as f64);
    let mut output = Array2::<f64>::zeros((n_ids, dim));
    let mut hidden_err = vec![0.0; dim];

    if total_words > 0 && acc > 0.0 {
        let total_steps = (total_words * config.epochs).max(1) as f64;
        let mut processed = 0usize;
        for _ in 0..config.epochs {
            for sent in &sentences {
                for (i, &center) in sent.iter().enumerate() {
                    let alpha = config.learning_rate * (1.0 - processed as f64 / total_steps).max(1e-4);
                    processed += 1;
                    let reduced = rng.random_range(0..config.window);
                    let span = config.window - reduced;
                    let lo = i.saturating_sub(span);
                    let hi = (i + span + 1).min(sent.len());
                    for (j, &context) in sent.iter().enumerate().take(hi).skip(lo) {
                        if j == i {
                            continue;
                        }
                        hidden_err.iter_mut().for_each(|e| *e = 0.0);
                        for k in 0..=config.negative {
                            let (target, label) = if k == 0 {
                                (center, 1.0)
                            } else {
                                let u = rng.random::<f64>() * acc;
                                let t = cumulative.partition_point(|c| *c <= u).min(n_ids - 1);
                                if t == center {
                                    continue;
                                }
                                (t, 0.0)
                            };
                            let dot: f64 = input.row(context).dot(&output.row(target));
                            let g = (label - sigmoid(dot)) * alpha;
                            for d in 0..dim {
                                hidden_err[d] += g * output[[target, d]];
                                output[[target, d]] += g * input[[context, d]];
                            }
                        }
                        for d in 0..dim {
                            input[[context, d]] += hidden_err[d];
                        }
                    }
                }
            }
        }
    }

    input.row_mut(PAD_ID).fill(0.0);
    input.row_mut(UNK_ID).fill(0.0);
    Ok(EmbeddingTable { dim, vectors: input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::vocab::build_vocab;

    fn cos(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    #[test]
    fn every_vector_has_configured_dim_and_pad_is_zero() {
        let texts = ["add two cups of water", "fantastic view of the water"];
        let vocab = build_vocab(&texts, 1).unwrap();
        let table = train_word_embeddings(&texts, &vocab, &Word2VecConfig::default()).unwrap();
        assert_eq!(table.dim, 300);
        assert_eq!(table.len(), vocab.id_count());
        assert!(table.vectors.rows().into_iter().all(|r| r.len() == 300));
        assert!(table.vector(PAD_ID).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_dim_is_rejected() {
        let vocab = build_vocab(&["a"], 1).unwrap();
        let cfg = Word2VecConfig {
            dim: 0,
            ..Default::default()
        };
        assert!(matches!(train_word_embeddings(&["a"], &vocab, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let texts = ["a b c d", "b c d e", "e f a"];
        let vocab = build_vocab(&texts, 1).unwrap();
        let cfg = Word2VecConfig {
            dim: 16,
            ..Default::default()
        };
        let a = train_word_embeddings(&texts, &vocab, &cfg).unwrap();
        let b = train_word_embeddings(&texts, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exclusive_co_occurrence_beats_mean_similarity() {
        // "alpha" and "beta" only ever appear next to each other; every other
        // sentence draws from one of six word groups.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut texts = Vec::new();
        for i in 0..400 {
            let words: Vec<String> = if i % 4 == 0 {
                vec!["alpha".into(), "beta".into(), "alpha".into(), "beta".into()]
            } else {
                let group = rng.random_range(0..6);
                (0..8).map(|_| format!("g{group}w{}", rng.random_range(0..5))).collect()
            };
            texts.push(words.join(" "));
        }
        let vocab = build_vocab(&texts, 1).unwrap();
        let cfg = Word2VecConfig {
            dim: 32,
            window: 3,
            ..Default::default()
        };
        let table = train_word_embeddings(&texts, &vocab, &cfg).unwrap();
        let a = table.vector(vocab.id("alpha").unwrap()).unwrap();
        let b = table.vector(vocab.id("beta").unwrap()).unwrap();
        let pair = cos(a, b);

        let ids: Vec<usize> = (2..vocab.id_count()).collect();
        let mut total = 0.0;
        let mut n = 0.0;
        for (x, &i) in ids.iter().enumerate() {
            for &j in &ids[x + 1..] {
                total += cos(table.vector(i).unwrap(), table.vector(j).unwrap());
                n += 1.0;
            }
        }
        let mean = total / n;
        assert!(pair > mean, "pair similarity {pair} vs mean {mean}");
    }
}

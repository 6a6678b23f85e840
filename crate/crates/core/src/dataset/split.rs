use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, SplitTag};
use crate::error::{Error, Result};

/// Partition fractions. Test takes `round(test_fraction * n)` pairs; the
/// validation set is carved out of the remaining training portion as
/// `round(val_fraction * train)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Partition sizes `(train, val, test)` for a corpus of `n` pairs.
pub fn split_sizes(n: usize, config: SplitConfig) -> Result<(usize, usize, usize)> {
    if !(0.0..1.0).contains(&config.test_fraction) || !(0.0..1.0).contains(&config.val_fraction) {
        return Err(Error::Parameter("split fractions must lie in [0, 1)".into()));
    }
    let test = (config.test_fraction * n as f64).round() as usize;
    let train_portion = n.saturating_sub(test);
    let val = (config.val_fraction * train_portion as f64).round() as usize;
    let train = train_portion.saturating_sub(val);
    if test == 0 || val == 0 || train == 0 {
        return Err(Error::Parameter(format!(
            "split of {n} pairs would leave an empty partition (train {train}, val {val}, test {test})"
        )));
    }
    Ok((train, val, test))
}

pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<Splits> {
    split_corpus_with(corpus, seed, SplitConfig::default())
}

/// Seeded shuffle, test carve-out, then a second shuffle of the training
/// portion before the validation carve-out.
pub fn split_corpus_with(corpus: &Corpus, seed: u64, config: SplitConfig) -> Result<Splits> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (_, val, test) = split_sizes(corpus.len(), config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let (test_idx, rest) = order.split_at(test);
    let mut rest = rest.to_vec();
    rest.shuffle(&mut rng);
    let (val_idx, train_idx) = rest.split_at(val);
    Ok(Splits {
        train: corpus.subset(train_idx, SplitTag::Train)?,
        val: corpus.subset(val_idx, SplitTag::Val)?,
        test: corpus.subset(test_idx, SplitTag::Test)?,
    })
}

//! Desk-scale synthetic corpora with a controllable coherence signal.
//!
//! Every pair draws a few latent topics with random weights. The pseudo-text
//! samples words from the active topics' vocabularies plus shared filler
//! words; the pseudo-image is the weighted sum of topic prototypes plus
//! Gaussian noise. Relation labels are assigned with exact per-relation
//! counts. With `signal_strength = s`, a positive relation `c` shifts the
//! image along a fixed direction by `s * relation_shift`, and the text carries
//! the cue word `cue{c}` with probability `0.5 (1 - s) + s * y_c`. At `s = 0`
//! labels are independent of content.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusPair, ImageRef, RelationVocab, Schema, SplitTag};
use crate::error::{Error, Result};

const DEFAULT_RATES: [f64; 6] = [0.5, 0.3, 0.4, 0.25, 0.35, 0.45];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub n_relations: usize,
    pub signal_strength: f64,
    pub seed: u64,
    pub image_dim: usize,
    pub n_topics: usize,
    pub topics_per_pair: usize,
    pub words_per_topic: usize,
    pub topic_words_per_text: usize,
    pub filler_vocab: usize,
    pub filler_words_per_text: usize,
    pub image_noise: f64,
    pub relation_shift: f64,
    /// Target positive rate per relation; defaults cycle through a fixed list.
    pub positive_rates: Option<Vec<f64>>,
}

impl SyntheticConfig {
    pub fn new(n_pairs: usize, n_relations: usize, signal_strength: f64, seed: u64) -> Self {
        Self {
            n_pairs,
            n_relations,
            signal_strength,
            seed,
            image_dim: 32,
            n_topics: 16,
            topics_per_pair: 2,
            words_per_topic: 6,
            topic_words_per_text: 8,
            filler_vocab: 20,
            filler_words_per_text: 4,
            image_noise: 0.35,
            relation_shift: 2.5,
            positive_rates: None,
        }
    }

    pub fn target_rates(&self) -> Vec<f64> {
        match &self.positive_rates {
            Some(r) => r.clone(),
            None => (0..self.n_relations).map(|c| DEFAULT_RATES[c % DEFAULT_RATES.len()]).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.n_pairs < 10 {
            return bad("synthetic corpora need at least 10 pairs");
        }
        if self.n_relations < 1 {
            return bad("synthetic corpora need at least one relation");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        if self.image_dim == 0 || self.n_topics == 0 || self.words_per_topic == 0 {
            return bad("image_dim, n_topics and words_per_topic must be positive");
        }
        if self.topics_per_pair == 0 || self.topics_per_pair > self.n_topics {
            return bad("topics_per_pair must lie in 1..=n_topics");
        }
        if self.topic_words_per_text == 0 {
            return bad("topic_words_per_text must be positive");
        }
        if self.filler_words_per_text > 0 && self.filler_vocab == 0 {
            return bad("filler words requested but filler_vocab is 0");
        }
        let rates = self.target_rates();
        if rates.len() != self.n_relations || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("positive_rates must give one rate in [0, 1] per relation");
        }
        Ok(())
    }
}

/// Generator internals exposed for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    /// Unit direction along which relation `c` shifts the pseudo-image.
    pub relation_directions: Vec<Vec<f64>>,
    /// Active topics of each pair.
    pub pair_topics: Vec<Vec<usize>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

pub fn relation_name(c: usize) -> String {
    format!("rel{c}")
}

pub fn cue_word(c: usize) -> String {
    format!("cue{c}")
}

pub fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<Corpus> {
    generate_synthetic(config).map(|(c, _)| c)
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Corpus, SyntheticTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.image_dim;
    let s = config.signal_strength;

    let prototypes: Vec<Vec<f64>> = (0..config.n_topics).map(|_| unit_gaussian(&mut rng, dim)).collect();
    let directions: Vec<Vec<f64>> = (0..config.n_relations).map(|_| unit_gaussian(&mut rng, dim)).collect();

    let mut labels = vec![vec![false; config.n_relations]; config.n_pairs];
    for (c, rate) in config.target_rates().iter().enumerate() {
        let k = (rate * config.n_pairs as f64).round() as usize;
        let mut order: Vec<usize> = (0..config.n_pairs).collect();
        order.shuffle(&mut rng);
        for &i in &order[..k] {
            labels[i][c] = true;
        }
    }

    let topics: Vec<usize> = (0..config.n_topics).collect();
    let mut pairs = Vec::with_capacity(config.n_pairs);
    let mut pair_topics = Vec::with_capacity(config.n_pairs);
    for (i, y) in labels.into_iter().enumerate() {
        let active: Vec<usize> = topics
            .choose_multiple(&mut rng, config.topics_per_pair)
            .copied()
            .collect();
        let weights: Vec<f64> = active.iter().map(|_| rng.random_range(0.5..1.5)).collect();
        let total_w: f64 = weights.iter().sum();

        let mut words = Vec::new();
        for _ in 0..config.topic_words_per_text {
            let mut u = rng.random::<f64>() * total_w;
            let mut pick = active[active.len() - 1];
            for (t, w) in active.iter().zip(&weights) {
                if u < *w {
                    pick = *t;
                    break;
                }
                u -= w;
            }
            words.push(topic_word(pick, rng.random_range(0..config.words_per_topic)));
        }
        for _ in 0..config.filler_words_per_text {
            words.push(format!("f{}", rng.random_range(0..config.filler_vocab)));
        }
        for (c, present) in y.iter().enumerate() {
            let p_cue = 0.5 * (1.0 - s) + s * f64::from(u8::from(*present));
            if rng.random::<f64>() < p_cue {
                words.push(cue_word(c));
            }
        }
        words.shuffle(&mut rng);

        let mut image = vec![0.0; dim];
        for (t, w) in active.iter().zip(&weights) {
            for (x, p) in image.iter_mut().zip(&prototypes[*t]) {
                *x += w * p;
            }
        }
        for (c, present) in y.iter().enumerate() {
            if *present {
                for (x, d) in image.iter_mut().zip(&directions[c]) {
                    *x += s * config.relation_shift * d;
                }
            }
        }
        for x in image.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += config.image_noise * n;
        }
        // Fixed precision keeps serialized corpora byte-stable.
        let image = image.into_iter().map(|x| (x * 1e6).round() / 1e6).collect();

        pairs.push(CorpusPair {
            pair_id: format!("syn{i:05}"),
            text: words.join(" "),
            image: ImageRef::Vector(image),
            labels: y,
        });
        pair_topics.push(active);
    }

    let names = (0..config.n_relations).map(relation_name).collect();
    let vocab = RelationVocab::new(names)?;
    let mut corpus = Corpus::new(Schema::Synthetic, pairs, vocab, SplitTag::Full)?;
    let rates = super::corpus::positive_rate_vector(&corpus);
    corpus.vocab = corpus.vocab.with_positive_rates(rates)?;
    Ok((
        corpus,
        SyntheticTruth {
            relation_directions: directions,
            pair_topics,
        },
    ))
}

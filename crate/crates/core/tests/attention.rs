use cmcm::dataset::{build_vocab, Corpus, CorpusPair, EmbeddingTable, ImageRef, RelationVocab, Schema, SplitTag};
use cmcm::encoders::{EncoderParams, ImageBackbone, Pooling, TextRnn};
use cmcm::model::{CoherenceModel, ModelConfig};
use cmcm::objectives::{HeadInput, HeadMode};
use cmcm::trainer::{train_model, TrainConfig, Variant};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const CLASSES: usize = 40;
const FILLERS: usize = 30;
const DIM: usize = 16;

/// Each text holds one class key among shared filler words; the image is the
/// class centre plus noise. Only the key tells images apart.
fn key_corpus(n: usize, seed: u64, split: SplitTag) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centre_rng = ChaCha8Rng::seed_from_u64(1234);
    let centres: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| (0..DIM).map(|_| StandardNormal.sample(&mut centre_rng)).collect())
        .collect();
    let pairs = (0..n)
        .map(|i| {
            let class = rng.random_range(0..CLASSES);
            let mut words: Vec<String> = (0..6).map(|_| format!("filler{}", rng.random_range(0..FILLERS))).collect();
            words.push(format!("key{class}"));
            words.shuffle(&mut rng);
            let image = centres[class]
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + 0.3 * z
                })
                .collect();
            CorpusPair {
                pair_id: format!("{seed}-{i}"),
                text: words.join(" "),
                image: ImageRef::Vector(image),
                labels: vec![rng.random_bool(0.5)],
            }
        })
        .collect();
    let vocab = RelationVocab::new(vec!["rel0".into()]).unwrap();
    Corpus::new(Schema::Synthetic, pairs, vocab, split).unwrap()
}

#[test]
fn discriminative_token_gets_most_attention() {
    let train = key_corpus(480, 1, SplitTag::Train);
    let val = key_corpus(60, 2, SplitTag::Val);
    let test = key_corpus(120, 3, SplitTag::Test);
    let vocab = build_vocab(&train.texts(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = EmbeddingTable {
        dim: DIM,
        vectors: Array2::from_shape_fn((vocab.id_count(), DIM), |(i, _)| {
            if i < 2 {
                0.0
            } else {
                StandardNormal.sample(&mut rng)
            }
        }),
    };
    let config = ModelConfig {
        encoder: EncoderParams {
            backbone: ImageBackbone::ToyMlp,
            text_rnn: TextRnn::BiLstm,
            pooling: Pooling::Attention,
            shared_dim: 32,
            image_feature_dim: DIM,
            word_dim: DIM,
            rnn_hidden: 16,
            ..Default::default()
        },
        head: HeadMode::Agnostic,
        head_input: HeadInput::Concat,
        max_len: 16,
        seed: 7,
    };
    let model = CoherenceModel::new(config, vocab, &table, train.vocab.clone()).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        epochs: 20,
        batch_size: 32,
        seed: 7,
        variant: Variant::Cmca,
        val_pool: 60,
        ..Default::default()
    };
    let trained = train_model(&tc, model, &train, &val).unwrap().into_best();
    let report = trained.attention_report(&test).unwrap();
    let hits = report
        .iter()
        .filter(|e| {
            let top = e.tokens.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            top.0.starts_with("key")
        })
        .count();
    let share = hits as f64 / report.len() as f64;
    println!("key token has the largest weight in {hits}/{} test pairs", report.len());
    assert!(share >= 0.7, "share {share}");
}

//! The full retrieval model: both towers, the optional coherence head and the
//! vocabularies needed to feed it, plus checkpoint IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamStore, Tape, Var};
use crate::dataset::{tokenize, tokenize_and_pad, Corpus, EmbeddingTable, RelationVocab, TokenSequence, Vocab};
use crate::encoders::{
    image_features, normalize_rows, AttentionWeights, EncoderParams, ImageTower, SharedEmbedding, TextBatch, TextTower,
};
use crate::error::{Error, Result};
use crate::objectives::{triplet_loss_on_tape, CoherenceHead, HeadInput, HeadMode, RelationWeights};

/// Rows per forward pass at inference time.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderParams,
    pub head: HeadMode,
    pub head_input: HeadInput,
    pub max_len: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self, n_relations: usize) -> Result<()> {
        self.encoder.validate()?;
        if self.max_len == 0 {
            return Err(Error::Parameter("max_len must be at least 1".into()));
        }
        if let HeadMode::SingleRelation(c) = self.head {
            if c >= n_relations {
                return Err(Error::Parameter(format!(
                    "relation index {c} outside vocabulary of {n_relations}"
                )));
            }
        }
        Ok(())
    }
}

/// Model inputs derived from a corpus split.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub ids: Vec<String>,
    pub tokens: Vec<TokenSequence>,
    pub features: Matrix,
    /// `pairs x relations`, all relations of the vocabulary.
    pub labels: Matrix,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select_features(&self, idx: &[usize]) -> Matrix {
        self.features.select(ndarray::Axis(0), idx)
    }
}

/// Loss nodes of one training batch.
pub struct BatchLoss {
    pub total: Var,
    pub retrieval: Var,
    pub classification: Option<Var>,
    pub text_embedding: Var,
    pub image_embedding: Var,
    pub text_bn: Var,
    pub image_bn: Var,
}

#[derive(Clone, Debug)]
pub struct CoherenceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextTower,
    pub image: ImageTower,
    pub head: Option<CoherenceHead>,
    pub vocab: Vocab,
    pub relations: RelationVocab,
}

impl CoherenceModel {
    /// Initializes text tower, image tower and head in that order from one
    /// seeded stream, so models differing only in head mode share tower
    /// initialization.
    pub fn new(config: ModelConfig, vocab: Vocab, table: &EmbeddingTable, relations: RelationVocab) -> Result<Self> {
        config.validate(relations.len())?;
        if table.len() != vocab.id_count() {
            return Err(Error::Parameter(format!(
                "embedding table has {} rows for {} vocabulary ids",
                table.len(),
                vocab.id_count()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let text = TextTower::init(&mut store, &mut rng, &config.encoder, table)?;
        let image = ImageTower::init(&mut store, &mut rng, &config.encoder);
        let head = config.head.width(relations.len()).map(|w| {
            CoherenceHead::init(&mut store, &mut rng, config.encoder.shared_dim, config.head_input, w)
        });
        Ok(Self {
            config,
            store,
            text,
            image,
            head,
            vocab,
            relations,
        })
    }

    pub fn prepare(&self, corpus: &Corpus) -> Result<PreparedSplit> {
        if corpus.vocab.names() != self.relations.names() {
            return Err(Error::Schema(format!(
                "corpus relations {:?} differ from model relations {:?}",
                corpus.vocab.names(),
                self.relations.names()
            )));
        }
        let n = corpus.len();
        let f = self.config.encoder.image_feature_dim;
        let mut features = Matrix::zeros((n, f));
        let mut tokens = Vec::with_capacity(n);
        let mut labels = Matrix::zeros((n, self.relations.len()));
        for (i, pair) in corpus.pairs.iter().enumerate() {
            let row = image_features(&pair.image, &self.config.encoder, &pair.pair_id)?;
            features.row_mut(i).assign(&Array1::from(row));
            tokens.push(tokenize_and_pad(&pair.text, &self.vocab, self.config.max_len)?);
            for (c, y) in pair.labels.iter().enumerate() {
                labels[[i, c]] = f64::from(u8::from(*y));
            }
        }
        Ok(PreparedSplit {
            ids: corpus.pairs.iter().map(|p| p.pair_id.clone()).collect(),
            tokens,
            features,
            labels,
        })
    }

    /// Label columns the head predicts, in head output order.
    pub fn head_labels(&self, labels: &Matrix) -> Matrix {
        let cols = self.config.head.relations(self.relations.len());
        labels.select(ndarray::Axis(1), &cols)
    }

    /// Class weights for the head outputs from per-relation positive rates.
    pub fn head_weights(&self, rates: &[f64]) -> Result<RelationWeights> {
        let named: Vec<(String, f64)> = self
            .config
            .head
            .relations(self.relations.len())
            .into_iter()
            .map(|c| (self.relations.names()[c].clone(), rates[c]))
            .collect();
        crate::objectives::relation_weights(&named)
    }

    /// Text embeddings (unnormalized) and attention weights, inference mode.
    pub fn encode_texts(&self, tokens: &[TokenSequence]) -> Result<(Matrix, Vec<AttentionWeights>)> {
        let d = self.config.encoder.shared_dim;
        let mut out = Matrix::zeros((tokens.len(), d));
        let mut attention = Vec::with_capacity(tokens.len());
        let vocab_size = self.text.vocab_size(&self.store);
        for start in (0..tokens.len()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(tokens.len());
            let seqs: Vec<&TokenSequence> = tokens[start..end].iter().collect();
            let batch = TextBatch::new(&seqs, vocab_size)?;
            let mut tape = Tape::new();
            let fwd = self.text.forward(&mut tape, &self.store, &batch, false);
            out.slice_mut(ndarray::s![start..end, ..]).assign(tape.value(fwd.embedding));
            let att = tape.value(fwd.attention);
            for (i, seq) in seqs.iter().enumerate() {
                let mut weights = vec![0.0; seq.max_len];
                for t in 0..batch.steps.min(seq.max_len) {
                    weights[t] = att[[i, t]];
                }
                let w = AttentionWeights { weights };
                let mask: Vec<bool> = (0..seq.max_len).map(|t| t < seq.length).collect();
                w.check(&mask)?;
                attention.push(w);
            }
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Invariant("non-finite text embedding".into()));
        }
        Ok((out, attention))
    }

    /// Image embeddings (unnormalized), inference mode.
    pub fn encode_images(&self, features: &Matrix) -> Result<Matrix> {
        if features.ncols() != self.config.encoder.image_feature_dim {
            return Err(Error::Parameter(format!(
                "image features have width {}, model expects {}",
                features.ncols(),
                self.config.encoder.image_feature_dim
            )));
        }
        let d = self.config.encoder.shared_dim;
        let mut out = Matrix::zeros((features.nrows(), d));
        for start in (0..features.nrows()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(features.nrows());
            let mut tape = Tape::new();
            let chunk = features.slice(ndarray::s![start..end, ..]).to_owned();
            let fwd = self.image.forward(&mut tape, &self.store, chunk, false);
            out.slice_mut(ndarray::s![start..end, ..]).assign(tape.value(fwd.embedding));
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Invariant("non-finite image embedding".into()));
        }
        Ok(out)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<(SharedEmbedding, AttentionWeights)> {
        let (m, mut att) = self.encode_texts(std::slice::from_ref(tokens))?;
        Ok((SharedEmbedding::new(m.row(0).to_vec()), att.remove(0)))
    }

    pub fn encode_image(&self, features: &[f64]) -> Result<SharedEmbedding> {
        let m = Matrix::from_shape_vec((1, features.len()), features.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(SharedEmbedding::new(self.encode_images(&m)?.row(0).to_vec()))
    }

    /// Head probabilities for every (query text, candidate image)
    /// combination, one matrix per head output.
    pub fn coherence_all_pairs(&self, text: &Matrix, image: &Matrix) -> Result<Vec<Matrix>> {
        let head = self.head.as_ref().ok_or(Error::NoCoherenceHead)?;
        Ok(head.all_pairs(&self.store, &normalize_rows(text)?, &normalize_rows(image)?))
    }

    /// Head probabilities for aligned pairs (`pairs x outputs`).
    pub fn coherence_aligned(&self, text: &Matrix, image: &Matrix) -> Result<Matrix> {
        let head = self.head.as_ref().ok_or(Error::NoCoherenceHead)?;
        let mut tape = Tape::new();
        let t = tape.constant(text.clone());
        let v = tape.constant(image.clone());
        let p = head.forward(&mut tape, &self.store, t, v, true);
        Ok(tape.value(p).clone())
    }

    /// Builds the multi-task loss for the rows `idx` of `data`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        data: &PreparedSplit,
        idx: &[usize],
        margin: f64,
        lambda_cls: f64,
        weights: Option<&RelationWeights>,
        detach_head: bool,
        train: bool,
    ) -> Result<BatchLoss> {
        let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &data.tokens[i]).collect();
        let batch = TextBatch::new(&seqs, self.text.vocab_size(&self.store))?;
        let text = self.text.forward(tape, &self.store, &batch, train);
        let image = self.image.forward(tape, &self.store, data.select_features(idx), train);
        let (retrieval, _) = triplet_loss_on_tape(tape, text.embedding, image.embedding, margin)?;
        let (total, classification) = match &self.head {
            Some(head) => {
                let weights = weights.ok_or_else(|| Error::Parameter("coherence head needs relation weights".into()))?;
                let probs = head.forward(tape, &self.store, text.embedding, image.embedding, detach_head);
                let labels = self.head_labels(&data.labels.select(ndarray::Axis(0), idx));
                let cls = tape.weighted_bce(probs, labels, weights.weights.clone());
                let scaled = tape.scale(cls, lambda_cls);
                (tape.add(retrieval, scaled), Some(cls))
            }
            None => (retrieval, None),
        };
        Ok(BatchLoss {
            total,
            retrieval,
            classification,
            text_embedding: text.embedding,
            image_embedding: image.embedding,
            text_bn: text.bn_node,
            image_bn: image.bn_node,
        })
    }

    /// Per-pair attention listing over the real tokens of each text.
    pub fn attention_report(&self, corpus: &Corpus) -> Result<Vec<AttentionEntry>> {
        let tokens: Vec<TokenSequence> = corpus
            .pairs
            .iter()
            .map(|p| tokenize_and_pad(&p.text, &self.vocab, self.config.max_len))
            .collect::<Result<_>>()?;
        let (_, attention) = self.encode_texts(&tokens)?;
        Ok(corpus
            .pairs
            .iter()
            .zip(tokens.iter().zip(attention))
            .map(|(pair, (seq, att))| {
                let words = tokenize(&pair.text);
                AttentionEntry {
                    pair_id: pair.pair_id.clone(),
                    tokens: words
                        .into_iter()
                        .take(seq.length)
                        .zip(att.weights.iter().copied())
                        .collect(),
                    truncated: seq.truncated(),
                }
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut params = Vec::new();
        for (_, name, value) in self.store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: [value.nrows(), value.ncols()],
            });
            for x in value.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            relations: self.relations.clone(),
            params,
            text_bn: RunningStats::of(&self.text.bn.running_mean, &self.text.bn.running_var),
            image_bn: RunningStats::of(&self.image.bn.running_mean, &self.image.bn.running_var),
            extra,
        };
        let path = dir.join("params.bin");
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&path, e))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {}", manifest.format)));
        }
        let vocab = manifest.vocab.reindex();
        let table = EmbeddingTable::zeros(vocab.id_count(), manifest.config.encoder.word_dim);
        let mut model = Self::new(manifest.config, vocab, &table, manifest.relations)?;
        let path = dir.join("params.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut offset = 0;
        for entry in &manifest.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Schema(format!("checkpoint parameter {} not in model", entry.name)))?;
            let target = model.store.get_mut(id);
            if target.dim() != (entry.shape[0], entry.shape[1]) {
                return Err(Error::Schema(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    target.dim()
                )));
            }
            let n = entry.shape[0] * entry.shape[1];
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::Schema("parameter file is truncated".into()));
            }
            for (slot, chunk) in target.iter_mut().zip(bytes[offset..end].chunks_exact(8)) {
                *slot = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            offset = end;
        }
        if offset != bytes.len() || manifest.params.len() != model.store.len() {
            return Err(Error::Schema("parameter file does not match manifest".into()));
        }
        manifest.text_bn.apply(&mut model.text.bn.running_mean, &mut model.text.bn.running_var)?;
        manifest.image_bn.apply(&mut model.image.bn.running_mean, &mut model.image.bn.running_var)?;
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cmcm-checkpoint-1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningStats {
    fn of(mean: &Array1<f64>, var: &Array1<f64>) -> Self {
        Self {
            mean: mean.to_vec(),
            var: var.to_vec(),
        }
    }

    fn apply(&self, mean: &mut Array1<f64>, var: &mut Array1<f64>) -> Result<()> {
        if self.mean.len() != mean.len() || self.var.len() != var.len() {
            return Err(Error::Schema("normalization statistics have the wrong width".into()));
        }
        *mean = Array1::from(self.mean.clone());
        *var = Array1::from(self.var.clone());
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: ModelConfig,
    vocab: Vocab,
    relations: RelationVocab,
    params: Vec<ParamEntry>,
    text_bn: RunningStats,
    image_bn: RunningStats,
    /// Training hyperparameters and provenance, opaque to the model.
    extra: serde_json::Value,
}

/// Reads only the free-form section of a checkpoint manifest.
pub fn checkpoint_extra(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    Ok(manifest.extra)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub pair_id: String,
    /// Real tokens in text order with their attention weight.
    pub tokens: Vec<(String, f64)>,
    pub truncated: bool,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{build_vocab, generate_synthetic_corpus, SyntheticConfig};
    use crate::encoders::{ImageBackbone, Pooling, TextRnn};

    pub(crate) fn toy_config(head: HeadMode, rnn: TextRnn) -> ModelConfig {
        ModelConfig {
            encoder: EncoderParams {
                backbone: ImageBackbone::ToyMlp,
                text_rnn: rnn,
                pooling: Pooling::Attention,
                shared_dim: 8,
                image_feature_dim: 32,
                word_dim: 6,
                rnn_hidden: 5,
                ..Default::default()
            },
            head,
            head_input: HeadInput::Concat,
            max_len: 12,
            seed: 4,
        }
    }

    pub(crate) fn toy_model(head: HeadMode, rnn: TextRnn) -> (CoherenceModel, Corpus) {
        let corpus = generate_synthetic_corpus(&SyntheticConfig::new(40, 3, 0.8, 2)).unwrap();
        let vocab = build_vocab(&corpus.texts(), 1).unwrap();
        let mut table = EmbeddingTable::zeros(vocab.id_count(), 6);
        for (i, x) in table.vectors.iter_mut().enumerate() {
            *x = ((i * 7919) % 97) as f64 / 97.0 - 0.5;
        }
        let model = CoherenceModel::new(toy_config(head, rnn), vocab, &table, corpus.vocab.clone()).unwrap();
        (model, corpus)
    }

    #[test]
    fn shapes_and_determinism() {
        for rnn in [TextRnn::BiLstm, TextRnn::BiGru, TextRnn::ToyMeanPool] {
            let (model, corpus) = toy_model(HeadMode::AllRelations, rnn);
            let data = model.prepare(&corpus).unwrap();
            let (t1, att) = model.encode_texts(&data.tokens).unwrap();
            let (t2, _) = model.encode_texts(&data.tokens).unwrap();
            assert_eq!(t1.dim(), (40, 8));
            assert_eq!(t1, t2);
            assert_eq!(att.len(), 40);
            let i1 = model.encode_images(&data.features).unwrap();
            assert_eq!(i1, model.encode_images(&data.features).unwrap());
            let single = model.encode_image(&data.features.row(3).to_vec()).unwrap();
            assert_eq!(single.values.len(), 8);
            for (a, b) in single.values.iter().zip(i1.row(3)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_one_hot() {
        let (model, _) = toy_model(HeadMode::AllRelations, TextRnn::BiLstm);
        let seq = tokenize_and_pad("t0w0", &model.vocab, 12).unwrap();
        let (_, att) = model.encode_text(&seq).unwrap();
        assert_eq!(att.weights[0], 1.0);
        assert!(att.weights[1..].iter().all(|w| *w == 0.0));
        let two = tokenize_and_pad("t0w0 t1w1", &model.vocab, 12).unwrap();
        let (_, att) = model.encode_text(&two).unwrap();
        assert!(att.weights[0] > 0.0 && att.weights[0] < 1.0);
        assert!((att.weights[0] + att.weights[1] - 1.0).abs() < 1e-12);
        let empty = tokenize_and_pad("", &model.vocab, 12).unwrap();
        assert!(matches!(model.encode_text(&empty), Err(Error::EmptySequence)));
    }

    #[test]
    fn identity_projection_reproduces_toy_input() {
        let (mut model, _) = toy_model(HeadMode::Agnostic, TextRnn::ToyMeanPool);
        // 32-dim input into an 8-dim space: identity on the first 8 features.
        let w = model.image.proj.w;
        let b = model.image.proj.b;
        *model.store.get_mut(w) = Matrix::from_shape_fn((32, 8), |(i, j)| f64::from(u8::from(i == j)));
        model.store.get_mut(b).fill(0.0);
        let x: Vec<f64> = (0..32).map(|i| i as f64 * 0.1 - 1.0).collect();
        let e = model.encode_image(&x).unwrap();
        for j in 0..8 {
            // running stats are mean 0, variance 1
            let expected = x[j] / (1.0 + model.image.bn.eps).sqrt();
            assert!((e.values[j] - expected).abs() < 1e-12);
            assert!((e.values[j] - x[j]).abs() < 1e-4);
        }
        assert!(matches!(model.encode_image(&x[..31]), Err(Error::Parameter(_))));
    }

    #[test]
    fn agnostic_model_has_no_head_and_shares_tower_init() {
        let (cmca, _) = toy_model(HeadMode::Agnostic, TextRnn::BiLstm);
        let (cmcm, _) = toy_model(HeadMode::AllRelations, TextRnn::BiLstm);
        assert!(cmca.head.is_none());
        assert!(cmca.store.iter().all(|(_, name, _)| !name.starts_with("head")));
        for (id, name, value) in cmca.store.iter() {
            assert_eq!(cmcm.store.name(id), name);
            assert_eq!(cmcm.store.get(id), value);
        }
        let m = Matrix::ones((2, 8));
        assert!(matches!(cmca.coherence_all_pairs(&m, &m), Err(Error::NoCoherenceHead)));
    }

    #[test]
    fn single_relation_head_has_one_output() {
        let (model, corpus) = toy_model(HeadMode::SingleRelation(2), TextRnn::ToyMeanPool);
        let data = model.prepare(&corpus).unwrap();
        let t = model.encode_texts(&data.tokens).unwrap().0;
        let i = model.encode_images(&data.features).unwrap();
        assert_eq!(model.coherence_all_pairs(&t, &i).unwrap().len(), 1);
        assert_eq!(model.head_labels(&data.labels).column(0), data.labels.column(2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut model, corpus) = toy_model(HeadMode::AllRelations, TextRnn::BiLstm);
        model.text.bn.running_mean.fill(0.25);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), serde_json::json!({"epoch": 3})).unwrap();
        let back = CoherenceModel::load(dir.path()).unwrap();
        let data = model.prepare(&corpus).unwrap();
        assert_eq!(model.encode_texts(&data.tokens).unwrap().0, back.encode_texts(&data.tokens).unwrap().0);
        assert_eq!(back.text.bn.running_mean, model.text.bn.running_mean);
        assert_eq!(checkpoint_extra(dir.path()).unwrap()["epoch"], 3);
        fs::write(dir.path().join("params.bin"), [0u8; 16]).unwrap();
        assert!(CoherenceModel::load(dir.path()).is_err());
    }

    #[test]
    fn attention_report_aligns_with_tokens() {
        let (model, corpus) = toy_model(HeadMode::AllRelations, TextRnn::BiLstm);
        let report = model.attention_report(&corpus).unwrap();
        for (entry, pair) in report.iter().zip(&corpus.pairs) {
            let n = tokenize(&pair.text).len().min(12);
            assert_eq!(entry.tokens.len(), n);
            assert_eq!(entry.truncated, tokenize(&pair.text).len() > 12);
            let total: f64 = entry.tokens.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert!(report.iter().any(|e| e.truncated));
    }
}

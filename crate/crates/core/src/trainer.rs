//! Optimization loop, best-epoch selection, the repeated evaluation protocol
//! and hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::dataset::{positive_rate_vector, Corpus, EmbeddingTable, RelationVocab, Splits, Vocab};
use crate::encoders::Pooling;
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, median_rank, per_relation_metrics, RepeatedMetrics, RetrievalMetrics, VariantReport, DEFAULT_KS,
};
use crate::model::{CoherenceModel, ModelConfig, PreparedSplit};
use crate::objectives::{cosine_matrix, HeadMode};
use crate::retrieval::{rank_of, sample_retrieval_pool, selective_refine, ConfidenceMatrix, RefinementConfig, POOL_SIZE};

/// Model variants compared in the experiments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    /// Mean pooling, no coherence head.
    Base,
    /// Attention pooling, no coherence head.
    Cmca,
    /// Mean pooling, head over all relations.
    CmcmNoAttn,
    /// Attention pooling, head over all relations.
    Cmcm,
    /// Attention pooling, binary head for one relation.
    CmcmSingle(String),
}

impl Variant {
    pub fn pooling(&self) -> Pooling {
        match self {
            Variant::Base | Variant::CmcmNoAttn => Pooling::Mean,
            _ => Pooling::Attention,
        }
    }

    pub fn head_mode(&self, relations: &RelationVocab) -> Result<HeadMode> {
        Ok(match self {
            Variant::Base | Variant::Cmca => HeadMode::Agnostic,
            Variant::CmcmNoAttn | Variant::Cmcm => HeadMode::AllRelations,
            Variant::CmcmSingle(name) => HeadMode::SingleRelation(
                relations
                    .index_of(name)
                    .ok_or_else(|| Error::Parameter(format!("unknown relation {name}")))?,
            ),
        })
    }

    /// Applies this variant's pooling and head to a model configuration.
    pub fn configure(&self, base: &ModelConfig, relations: &RelationVocab) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        cfg.encoder.pooling = self.pooling();
        cfg.head = self.head_mode(relations)?;
        Ok(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Base => f.write_str("base"),
            Variant::Cmca => f.write_str("cmca"),
            Variant::CmcmNoAttn => f.write_str("cmcm-noattn"),
            Variant::Cmcm => f.write_str("cmcm"),
            Variant::CmcmSingle(r) => write!(f, "cmcm-single:{r}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "base" => Variant::Base,
            "cmca" => Variant::Cmca,
            "cmcm-noattn" => Variant::CmcmNoAttn,
            "cmcm" => Variant::Cmcm,
            other => match (other.strip_prefix("cmcm-single:"), s.split_once(':')) {
                (Some(_), Some((_, rel))) if !rel.is_empty() => Variant::CmcmSingle(rel.to_string()),
                _ => {
                    return Err(Error::Parameter(format!(
                        "unknown mode {s}; expected base, cmca, cmcm, cmcm-noattn or cmcm-single:<relation>"
                    )))
                }
            },
        })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub lambda_cls: f64,
    pub margin: f64,
    /// Stops head gradients at the normalized embeddings.
    pub detach_head: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Candidate pool size for validation MedR.
    pub val_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            variant: Variant::Cmcm,
            lambda_cls: 0.1,
            margin: 0.3,
            detach_head: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_pool: POOL_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter("batch size must be at least 2".into()));
        }
        if !(self.lambda_cls >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Parameter("lambda_cls and margin must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub retrieval_loss: f64,
    pub classification_loss: Option<f64>,
    pub val_med_r: f64,
}

/// Per-epoch model snapshots with their validation MedR.
#[derive(Clone, Debug)]
pub struct CheckpointSet {
    pub records: Vec<EpochRecord>,
    pub snapshots: Vec<CoherenceModel>,
    /// Index into `records`.
    pub best_epoch: usize,
}

impl CheckpointSet {
    pub fn best(&self) -> &CoherenceModel {
        &self.snapshots[self.best_epoch]
    }

    pub fn into_best(mut self) -> CoherenceModel {
        self.snapshots.swap_remove(self.best_epoch)
    }

    pub fn val_med_r(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_med_r).collect()
    }
}

/// Index of the smallest value; the earliest wins ties.
pub fn select_best_epoch(val_med_r: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in val_med_r.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v < val_med_r[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Input("no epoch has a validation MedR".into()))
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(model: &CoherenceModel) -> Self {
        let zeros: Vec<Matrix> = model.store.iter().map(|(_, _, v)| Matrix::zeros(v.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut CoherenceModel, grads: &[Matrix], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            if model.store.is_frozen(id) {
                continue;
            }
            let g = &grads[id.0];
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |m, g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let p = model.store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, m, v| {
                *p -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// Builds a model for `config.variant` on top of `model_config` and trains it
/// on `splits.train`, scoring every epoch on `splits.val`.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocab: &Vocab,
    table: &EmbeddingTable,
    splits: &Splits,
) -> Result<CheckpointSet> {
    config.validate()?;
    let relations = splits.train.vocab.clone();
    let model_config = config.variant.configure(model_config, &relations)?;
    let model = CoherenceModel::new(model_config, vocab.clone(), table, relations)?;
    train_model(config, model, &splits.train, &splits.val)
}

/// Trains an already initialized model.
pub fn train_model(config: &TrainConfig, mut model: CoherenceModel, train: &Corpus, val: &Corpus) -> Result<CheckpointSet> {
    config.validate()?;
    let data = model.prepare(train)?;
    let val_data = model.prepare(val)?;
    if data.len() < 2 {
        return Err(Error::Input("training needs at least two pairs".into()));
    }
    let weights = match model.head {
        Some(_) => Some(model.head_weights(&positive_rate_vector(train))?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model);
    let mut records = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_ret, mut sum_cls, mut n) = (0.0, 0.0, 0.0, 0.0);
        for (b, idx) in make_batches(&order, config.batch_size).iter().enumerate() {
            let mut tape = Tape::new();
            let loss = model.batch_loss(
                &mut tape,
                &data,
                idx,
                config.margin,
                config.lambda_cls,
                weights.as_ref(),
                config.detach_head,
                true,
            )?;
            let total = tape.scalar_value(loss.total);
            let ret = tape.scalar_value(loss.retrieval);
            let cls = loss.classification.map(|c| tape.scalar_value(c));
            let embeddings_finite = tape.value(loss.text_embedding).iter().all(|x| x.is_finite())
                && tape.value(loss.image_embedding).iter().all(|x| x.is_finite());
            if !total.is_finite() || !embeddings_finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!(
                        "total {total}, retrieval {ret}, classification {cls:?}, finite embeddings {embeddings_finite}"
                    ),
                });
            }
            let grads = tape.backward(loss.total).param_grads(&tape, &model.store);
            adam.step(&mut model, &grads, config);
            model.text.bn.update_running(&tape, loss.text_bn);
            model.image.bn.update_running(&tape, loss.image_bn);
            if let Some((_, name, _)) = model.store.iter().find(|(_, _, v)| !v.iter().all(|x| x.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("parameter {name} became non-finite after loss {total}"),
                });
            }
            let w = idx.len() as f64;
            sum += total * w;
            sum_ret += ret * w;
            sum_cls += cls.unwrap_or(0.0) * w;
            n += w;
        }
        let val_med_r = validation_med_r(&model, &val_data, config.val_pool, config.seed)?;
        records.push(EpochRecord {
            epoch,
            loss: sum / n,
            retrieval_loss: sum_ret / n,
            classification_loss: model.head.map(|_| sum_cls / n),
            val_med_r,
        });
        snapshots.push(model.clone());
    }
    let best_epoch = select_best_epoch(&records.iter().map(|r| r.val_med_r).collect::<Vec<_>>())?;
    Ok(CheckpointSet {
        records,
        snapshots,
        best_epoch,
    })
}

/// Unrefined MedR on one pool drawn from the validation split.
pub fn validation_med_r(model: &CoherenceModel, val: &PreparedSplit, pool_size: usize, seed: u64) -> Result<f64> {
    let enc = EncodedSplit::new(model, val)?;
    let pool = sample_retrieval_pool(val.len(), pool_size, seed, None)?;
    let (ranks, _) = rank_pool(model, &enc, &pool, None)?;
    median_rank(&ranks)
}

/// Embeddings of a whole split, computed once and sliced per pool.
pub struct EncodedSplit {
    pub text: Matrix,
    pub image: Matrix,
}

impl EncodedSplit {
    pub fn new(model: &CoherenceModel, data: &PreparedSplit) -> Result<Self> {
        Ok(Self {
            text: model.encode_texts(&data.tokens)?.0,
            image: model.encode_images(&data.features)?,
        })
    }
}

/// Final similarity rows for a pool whose texts are the queries and whose
/// images are the candidates, with per-query refinement flags.
pub fn pool_scores(
    model: &CoherenceModel,
    enc: &EncodedSplit,
    pool: &[usize],
    refine: Option<RefinementConfig>,
) -> Result<(Matrix, Vec<bool>)> {
    let text = enc.text.select(ndarray::Axis(0), pool);
    let image = enc.image.select(ndarray::Axis(0), pool);
    let theta = cosine_matrix(&text, &image)?;
    match refine {
        None => {
            let n = theta.nrows();
            Ok((theta, vec![false; n]))
        }
        Some(r) => {
            let eta = ConfidenceMatrix::from_probs(&model.coherence_all_pairs(&text, &image)?, r.lambda)?;
            let out = selective_refine(&theta, &eta, r.threshold)?;
            Ok((out.rows, out.refined))
        }
    }
}

/// Rank of each query's own image within the pool. Ties go to the lower
/// corpus index.
pub fn rank_pool(
    model: &CoherenceModel,
    enc: &EncodedSplit,
    pool: &[usize],
    refine: Option<RefinementConfig>,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let (scores, refined) = pool_scores(model, enc, pool, refine)?;
    let ranks = (0..pool.len())
        .map(|q| rank_of(scores.row(q).as_slice().expect("standard layout"), pool, q))
        .collect();
    Ok((ranks, refined))
}

/// Top-`k` candidate indices (into the split) for each pool query.
pub fn top_k(
    model: &CoherenceModel,
    enc: &EncodedSplit,
    pool: &[usize],
    k: usize,
    refine: Option<RefinementConfig>,
) -> Result<Vec<Vec<usize>>> {
    let (scores, _) = pool_scores(model, enc, pool, refine)?;
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(pool[a].cmp(&pool[b])));
            idx.into_iter().take(k).map(|i| pool[i]).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub repeats: usize,
    pub pool_size: usize,
    /// Repeat `r` draws its pool with seed `seed + r`.
    pub seed: u64,
    pub ks: Vec<usize>,
    pub refine: Option<RefinementConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            pool_size: POOL_SIZE,
            seed: 0,
            ks: DEFAULT_KS.to_vec(),
            refine: None,
        }
    }
}

/// Repeated pool evaluation with per-relation breakdowns and, for models
/// with a head, coherence-prediction AP over the whole split.
pub fn evaluate_repeated(model: &CoherenceModel, test: &Corpus, cfg: &EvalConfig) -> Result<VariantReport> {
    let data = model.prepare(test)?;
    evaluate_prepared(model, &data, cfg, &variant_name(model))
}

pub fn variant_name(model: &CoherenceModel) -> String {
    let attn = model.config.encoder.pooling == Pooling::Attention;
    match (model.config.head, attn) {
        (HeadMode::Agnostic, false) => "base".into(),
        (HeadMode::Agnostic, true) => "cmca".into(),
        (HeadMode::AllRelations, false) => "cmcm-noattn".into(),
        (HeadMode::AllRelations, true) => "cmcm".into(),
        (HeadMode::SingleRelation(c), _) => format!("cmcm-single:{}", model.relations.names()[c]),
    }
}

pub fn evaluate_prepared(model: &CoherenceModel, data: &PreparedSplit, cfg: &EvalConfig, name: &str) -> Result<VariantReport> {
    if cfg.repeats == 0 {
        return Err(Error::Parameter("at least one repeat is required".into()));
    }
    if cfg.refine.is_some() && model.head.is_none() {
        return Err(Error::NoCoherenceHead);
    }
    let enc = EncodedSplit::new(model, data)?;
    let names = model.relations.names().to_vec();
    let mut overall = Vec::new();
    let mut per_relation: Vec<Vec<RetrievalMetrics>> = vec![Vec::new(); names.len()];
    let mut absent = vec![false; names.len()];
    let mut refined_fraction = Vec::new();
    for r in 0..cfg.repeats {
        let pool = sample_retrieval_pool(data.len(), cfg.pool_size, cfg.seed + r as u64, None)?;
        let (ranks, refined) = rank_pool(model, &enc, &pool, cfg.refine)?;
        overall.push(RetrievalMetrics::from_ranks(&ranks, &cfg.ks)?);
        refined_fraction.push(refined.iter().filter(|f| **f).count() as f64 / refined.len() as f64);
        let labels: Vec<Vec<bool>> = pool
            .iter()
            .map(|&i| data.labels.row(i).iter().map(|y| *y > 0.5).collect())
            .collect();
        for c in 0..names.len() {
            match per_relation_metrics(&ranks, &labels, c, &cfg.ks)? {
                Some(m) => per_relation[c].push(m),
                None => absent[c] = true,
            }
        }
    }
    let mut rel_report = BTreeMap::new();
    for (c, name) in names.iter().enumerate() {
        let entry = if absent[c] {
            None
        } else {
            Some(RepeatedMetrics::aggregate(std::mem::take(&mut per_relation[c]))?)
        };
        rel_report.insert(name.clone(), entry);
    }
    let coherence_ap = match model.head {
        Some(_) => Some(coherence_average_precision(model, &enc, data)?),
        None => None,
    };
    Ok(VariantReport {
        variant: name.to_string(),
        refined: cfg.refine.is_some(),
        overall: RepeatedMetrics::aggregate(overall)?,
        per_relation: rel_report,
        coherence_ap,
        refined_fraction,
    })
}

/// AP of the head's prediction on aligned pairs, per predicted relation;
/// `None` where the split has no positive.
pub fn coherence_average_precision(
    model: &CoherenceModel,
    enc: &EncodedSplit,
    data: &PreparedSplit,
) -> Result<BTreeMap<String, Option<f64>>> {
    let probs = model.coherence_aligned(&enc.text, &enc.image)?;
    let labels = model.head_labels(&data.labels);
    let rels = model.config.head.relations(model.relations.len());
    let mut out = BTreeMap::new();
    for (col, c) in rels.into_iter().enumerate() {
        let y: Vec<bool> = labels.column(col).iter().map(|v| *v > 0.5).collect();
        let ap = if y.iter().any(|v| *v) {
            Some(average_precision(&probs.column(col).to_vec(), &y)?)
        } else {
            None
        };
        out.insert(model.relations.names()[c].clone(), ap);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    LambdaCls,
    MaxSeqLen,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda-cls" | "lambda_cls" => Ok(SweepParam::LambdaCls),
            "max-seq-len" | "max_seq_len" => Ok(SweepParam::MaxSeqLen),
            other => Err(Error::Parameter(format!(
                "unknown sweep parameter {other}; expected lambda-cls or max-seq-len"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_med_r: f64,
    pub std_med_r: f64,
    pub best_epoch: usize,
}

/// Trains one model per value with a shared seed and scores the best epoch
/// on the validation split with the repeated protocol.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocab: &Vocab,
    table: &EmbeddingTable,
    splits: &Splits,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut tc = config.clone();
        let mut mc = model_config.clone();
        match param {
            SweepParam::LambdaCls => tc.lambda_cls = value,
            SweepParam::MaxSeqLen => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Parameter(format!("sequence length {value} is not a positive integer")));
                }
                mc.max_len = value as usize;
            }
        }
        let set = train(&tc, &mc, vocab, table, splits)?;
        let report = evaluate_repeated(set.best(), &splits.val, &EvalConfig { refine: None, ..eval.clone() })?;
        rows.push(SweepRow {
            value,
            mean_med_r: report.overall.med_r_mean,
            std_med_r: report.overall.med_r_std,
            best_epoch: set.records[set.best_epoch].epoch,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,mean_med_r,std_med_r\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.mean_med_r, r.std_med_r));
    }
    out
}

//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use cmcm::dataset::{
    build_vocab, generate_synthetic_corpus, load_corpus, positive_rate_vector, save_corpus, split_corpus_with, Corpus,
    EmbeddingTable, ImageRef, Schema, SplitConfig, Splits, SyntheticConfig, Vocab, Word2VecConfig,
};
use cmcm::encoders::{EncoderParams, ImageBackbone, TextRnn, PIXEL_GRID};
use cmcm::humaneval::{
    aggregate_votes, make_pairwise_tasks, preference_significance, read_jsonl, read_tasks, write_jsonl, TaskQuery, Top1,
    VoteRecord, VoteStore, RATERS_PER_ITEM,
};
use cmcm::metrics::{MetricsReport, DEFAULT_KS};
use cmcm::model::{CoherenceModel, ModelConfig};
use cmcm::objectives::{HeadInput, HeadMode};
use cmcm::retrieval::{export_embeddings, import_embeddings, sample_retrieval_pool, RefinementConfig, POOL_SIZE};
use cmcm::trainer::{
    evaluate_repeated, sweep, sweep_csv, top_k, train, variant_name, EncodedSplit, EvalConfig, SweepParam, TrainConfig, Variant,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{
    Command, DumpTopkArgs, EvalArgs, ExportArgs, HumanevalAggregateArgs, HumanevalMakeArgs, HumanevalServeArgs, IngestArgs,
    ModelArgs, PoolArgs, ReportArgs, SweepArgs, SynthArgs, TrainArgs,
};
use crate::config::Settings;
use crate::manifest::{default_manifest_path, RunRecorder};
use crate::server::{self, AppState};

const DATA_FILE: &str = "data.json";
const VOCAB_FILE: &str = "vocab.json";
const WORD_VECTORS: &str = "word_vectors";

/// Context shared by every subcommand.
pub struct Run {
    pub settings: Settings,
    pub recorder: RunRecorder,
    pub manifest: Option<PathBuf>,
}

impl Run {
    /// Writes the manifest next to `primary` unless a path was given.
    fn finish(self, primary: &Path) -> Result<()> {
        let path = self.manifest.unwrap_or_else(|| default_manifest_path(primary));
        self.recorder.finish(self.settings.snapshot(), &path)?;
        Ok(())
    }
}

pub fn execute(command: Command, mut run: Run) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a, run),
        Command::Synth(a) => synth(a, run),
        Command::Train(a) => train_cmd(a, run),
        Command::Eval(a) => eval(a, run),
        Command::Sweep(a) => sweep_cmd(a, run),
        Command::ReportRelations(a) => report_relations(a, run),
        Command::DumpTopk(a) => dump_topk(a, run),
        Command::HumanevalMake(a) => humaneval_make(a, run),
        Command::HumanevalServe(a) => humaneval_serve(a, &mut run),
        Command::HumanevalAggregate(a) => humaneval_aggregate(a, run),
        Command::ExportEmbeddings(a) => export(a, run),
    }
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| anyhow!("unknown {what} `{s}`"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

/// Description of an ingested data directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct DataInfo {
    pub schema: Schema,
    pub relations: Vec<String>,
    pub seed: u64,
    pub word_dim: usize,
}

pub struct DataDir {
    pub info: DataInfo,
    pub splits: Splits,
    pub vocab: Vocab,
    pub table: EmbeddingTable,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self> {
        let info: DataInfo = serde_json::from_str(
            &fs::read_to_string(dir.join(DATA_FILE)).with_context(|| format!("{} is not an ingested data directory", dir.display()))?,
        )?;
        let split = |name: &str| load_corpus(&dir.join(format!("{name}.jsonl")), info.schema);
        let splits = Splits {
            train: split("train")?,
            val: split("val")?,
            test: split("test")?,
        };
        let vocab: Vocab = serde_json::from_str(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        let vocab = vocab.reindex();
        let (_, vectors) = import_embeddings(&dir.join(format!("{WORD_VECTORS}.json")))?;
        if vectors.nrows() != vocab.id_count() {
            bail!("word vectors have {} rows, vocabulary has {} ids", vectors.nrows(), vocab.id_count());
        }
        Ok(Self {
            table: EmbeddingTable {
                dim: vectors.ncols(),
                vectors,
            },
            info,
            splits,
            vocab,
        })
    }

    pub fn split(&self, name: &str) -> Result<&Corpus> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => bail!("unknown split `{other}`; expected train, val or test"),
        }
    }
}

fn ingest(a: IngestArgs, mut run: Run) -> Result<()> {
    let s = &mut run.settings;
    let corpus_path = s.data_path("corpus", a.corpus)?;
    let schema: Schema = s.require::<String>("schema", a.schema)?.parse()?;
    let out: PathBuf = s.require("out", a.out)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let word_dim = s.get("word_dim", a.word_dim, 300usize)?;
    let min_freq = s.get("min_freq", a.min_freq, 1usize)?;
    let w2v_epochs = s.get("w2v_epochs", a.w2v_epochs, Word2VecConfig::default().epochs)?;
    let split_cfg = SplitConfig {
        test_fraction: s.get("test_fraction", a.test_fraction, SplitConfig::default().test_fraction)?,
        val_fraction: s.get("val_fraction", a.val_fraction, SplitConfig::default().val_fraction)?,
    };
    let corpus_path = corpus_path
        .canonicalize()
        .with_context(|| format!("corpus {}", corpus_path.display()))?;
    let corpus = load_corpus(&corpus_path, schema)?;
    let splits = split_corpus_with(&corpus, seed, split_cfg)?;
    let texts = splits.train.texts();
    let vocab = build_vocab(&texts, min_freq)?;
    let table = cmcm::dataset::train_word_embeddings(
        &texts,
        &vocab,
        &Word2VecConfig {
            dim: word_dim,
            epochs: w2v_epochs,
            seed,
            ..Default::default()
        },
    )?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (name, c) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_corpus(c, &out.join(format!("{name}.jsonl")))?;
    }
    fs::write(out.join(VOCAB_FILE), serde_json::to_string(&vocab)?)?;
    let ids: Vec<String> = (0..vocab.id_count())
        .map(|i| vocab.token(i).map(str::to_string).unwrap_or_else(|| format!("#{i}")))
        .collect();
    export_embeddings(&out.join(WORD_VECTORS), &ids, &table.vectors, false)?;
    let info = DataInfo {
        schema,
        relations: corpus.vocab.names().to_vec(),
        seed,
        word_dim,
    };
    fs::write(out.join(DATA_FILE), serde_json::to_string_pretty(&info)?)?;
    eprintln!(
        "ingested {} pairs: train {}, val {}, test {}; vocabulary {}",
        corpus.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        vocab.len()
    );
    run.recorder.seed("seed", seed);
    run.recorder.input(&corpus_path);
    run.recorder.output(&out);
    run.finish(&out)
}

fn synth(a: SynthArgs, mut run: Run) -> Result<()> {
    let s = &mut run.settings;
    let mut cfg = SyntheticConfig::new(
        s.get("pairs", a.pairs, 600usize)?,
        s.get("relations", a.relations, 4usize)?,
        s.get("signal", a.signal, 0.8)?,
        s.get("seed", a.seed, 0u64)?,
    );
    cfg.image_dim = s.get("image_dim", a.image_dim, cfg.image_dim)?;
    let out: PathBuf = s.require("out", a.out)?;
    ensure_parent(&out)?;
    let corpus = generate_synthetic_corpus(&cfg)?;
    save_corpus(&corpus, &out)?;
    eprintln!("wrote {} synthetic pairs to {}", corpus.len(), out.display());
    run.recorder.seed("seed", cfg.seed);
    run.recorder.output(&out);
    run.recorder.output(&cmcm::dataset::corpus::manifest_path(&out));
    run.finish(&out)
}

/// Resolved model and optimizer settings.
fn model_settings(s: &mut Settings, a: ModelArgs, data: &DataDir) -> Result<(TrainConfig, ModelConfig)> {
    let d = TrainConfig::default();
    let variant: Variant = s.get("mode", a.mode, "cmcm".to_string())?.parse()?;
    let tc = TrainConfig {
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        seed: s.get("seed", a.seed, d.seed)?,
        variant,
        lambda_cls: s.get("lambda_cls", a.lambda_cls, d.lambda_cls)?,
        margin: s.get("margin", a.margin, d.margin)?,
        detach_head: s.switch("detach_head", a.detach_head)?,
        val_pool: s.get("val_pool", a.val_pool, d.val_pool)?,
        ..d
    };
    let first = data
        .splits
        .train
        .pairs
        .first()
        .ok_or_else(|| anyhow!("empty training split"))?;
    let default_backbone = match (data.info.schema, &first.image) {
        (_, ImageRef::Vector(_)) if data.info.schema == Schema::Synthetic => "toy-mlp",
        (_, ImageRef::Vector(_)) => "pretrained-cnn",
        _ => "pixel-pool",
    };
    let backbone: ImageBackbone = parse_enum("backbone", &s.get("backbone", a.backbone, default_backbone.to_string())?)?;
    let text_rnn: TextRnn = parse_enum("text rnn", &s.get("text_rnn", a.text_rnn, "bilstm-1-layer".to_string())?)?;
    let head_input: HeadInput = parse_enum("head input", &s.get("head_input", a.head_input, "concat".to_string())?)?;
    let e = EncoderParams::default();
    let image_feature_dim = match (&first.image, backbone) {
        (ImageRef::Vector(v), ImageBackbone::ToyMlp | ImageBackbone::PretrainedCnn) => v.len(),
        _ => 3 * PIXEL_GRID * PIXEL_GRID,
    };
    let encoder = EncoderParams {
        backbone,
        text_rnn,
        shared_dim: s.get("shared_dim", a.shared_dim, e.shared_dim)?,
        image_size: s.get("image_size", a.image_size, e.image_size)?,
        image_feature_dim,
        word_dim: data.table.dim,
        rnn_hidden: s.get("rnn_hidden", a.rnn_hidden, e.rnn_hidden)?,
        fine_tune_embeddings: s.switch("fine_tune", a.fine_tune)?,
        ..e
    };
    let mc = ModelConfig {
        encoder,
        head: HeadMode::AllRelations,
        head_input,
        max_len: s.get("max_len", a.max_len, data.info.schema.default_max_len())?,
        seed: tc.seed,
    };
    Ok((tc, mc))
}

fn train_cmd(a: TrainArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.model.data.clone())?;
    let data = DataDir::load(&data_dir)?;
    let (tc, mc) = model_settings(&mut run.settings, a.model, &data)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let set = train(&tc, &mc, &data.vocab, &data.table, &data.splits)?;
    for r in &set.records {
        eprintln!(
            "epoch {:>3}  loss {:.5}  retrieval {:.5}  val MedR {:.1}",
            r.epoch, r.loss, r.retrieval_loss, r.val_med_r
        );
    }
    let best = &set.records[set.best_epoch];
    eprintln!("best epoch {} (val MedR {:.1})", best.epoch, best.val_med_r);
    let extra = json!({ "train_config": tc, "records": set.records, "best_epoch": best.epoch });
    set.best().save(&out, extra)?;
    run.recorder.seed("seed", tc.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

/// Resolved pool settings; `lambda` defaults by schema.
fn pool_settings(s: &mut Settings, a: PoolArgs, schema: Schema) -> Result<(String, EvalConfig)> {
    let split = s.get("split", a.split, "test".to_string())?;
    let refine = s.switch("refine", a.refine)?;
    let lambda = s.get("lambda", a.lambda, schema.default_refine_lambda())?;
    let threshold = s.get("threshold", a.threshold, RefinementConfig::default().threshold)?;
    let cfg = EvalConfig {
        repeats: s.get("repeats", a.repeats, EvalConfig::default().repeats)?,
        pool_size: s.get("pool_size", a.pool_size, POOL_SIZE)?,
        seed: s.get("seed", a.seed, 0u64)?,
        ks: DEFAULT_KS.to_vec(),
        refine: refine.then_some(RefinementConfig { lambda, threshold }),
    };
    Ok((split, cfg))
}

fn load_checkpoints(run: &mut Run, paths: Vec<PathBuf>) -> Result<Vec<CoherenceModel>> {
    let paths: Vec<PathBuf> = if paths.is_empty() {
        run.settings.require("checkpoint", None::<Vec<PathBuf>>)?
    } else {
        run.settings.get("checkpoint", Some(paths), Vec::new())?
    };
    if paths.is_empty() {
        bail!("at least one --checkpoint is required");
    }
    paths
        .iter()
        .map(|p| {
            run.recorder.input(p);
            CoherenceModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
        })
        .collect()
}

/// Unrefined report for every model, plus a refined one for models with a head.
fn evaluate_all(models: &[CoherenceModel], corpus: &Corpus, cfg: &EvalConfig) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for m in models {
        report
            .variants
            .push(evaluate_repeated(m, corpus, &EvalConfig { refine: None, ..cfg.clone() })?);
        if cfg.refine.is_some() {
            if m.head.is_some() {
                report.variants.push(evaluate_repeated(m, corpus, cfg)?);
            } else {
                eprintln!("note: {} has no coherence head; refinement skipped", variant_name(m));
            }
        }
    }
    Ok(report)
}

fn eval(a: EvalArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.data)?;
    let data = DataDir::load(&data_dir)?;
    let (split, cfg) = pool_settings(&mut run.settings, a.pool, data.info.schema)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let models = load_checkpoints(&mut run, a.checkpoints)?;
    let report = evaluate_all(&models, data.split(&split)?, &cfg)?;
    for v in &report.variants {
        let recalls: Vec<String> = v
            .overall
            .recall_mean
            .iter()
            .map(|(k, r)| format!("R@{k} {r:.1}"))
            .collect();
        eprintln!(
            "{}{}: MedR {:.2} ± {:.2}  {}",
            v.variant,
            if v.refined { " +refine" } else { "" },
            v.overall.med_r_mean,
            v.overall.med_r_std,
            recalls.join("  ")
        );
    }
    ensure_parent(&out)?;
    fs::write(&out, report.to_json()?)?;
    run.recorder.seed("seed", cfg.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

fn sweep_cmd(a: SweepArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.model.data.clone())?;
    let data = DataDir::load(&data_dir)?;
    let (tc, mc) = model_settings(&mut run.settings, a.model, &data)?;
    let param: SweepParam = run.settings.require::<String>("param", a.param)?.parse()?;
    let values: Vec<f64> = run
        .settings
        .require::<String>("values", a.values)?
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("sweep value `{v}`: {e}")))
        .collect::<Result<_>>()?;
    let eval = EvalConfig {
        repeats: run.settings.get("repeats", a.repeats, EvalConfig::default().repeats)?,
        pool_size: run.settings.get("pool_size", a.pool_size, POOL_SIZE)?,
        seed: tc.seed,
        ..Default::default()
    };
    let out: PathBuf = run.settings.require("out", a.out)?;
    let rows = sweep(param, &values, &tc, &mc, &data.vocab, &data.table, &data.splits, &eval)?;
    for r in &rows {
        eprintln!("{:>8}  MedR {:.2} ± {:.2}", r.value, r.mean_med_r, r.std_med_r);
    }
    ensure_parent(&out)?;
    fs::write(&out, sweep_csv(&rows))?;
    run.recorder.seed("seed", tc.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

/// Markdown tables: split sizes and positive rates, then per-relation MedR
/// and R@K for each evaluated variant.
pub fn relation_tables(data: &DataDir, split: &str, report: &MetricsReport) -> Result<String> {
    let corpus = data.split(split)?;
    let names = corpus.vocab.names();
    let mut md = String::new();
    md.push_str(&format!("## Relation subsets ({split}, {} pairs)\n\n", corpus.len()));
    md.push_str("| relation | positives | positive rate |\n|---|---:|---:|\n");
    let rates = positive_rate_vector(corpus);
    for (c, name) in names.iter().enumerate() {
        let n = corpus.pairs.iter().filter(|p| p.labels[c]).count();
        md.push_str(&format!("| {name} | {n} | {:.3} |\n", rates[c]));
    }
    for v in &report.variants {
        md.push_str(&format!(
            "\n## {}{}\n\n| relation | MedR | R@1 | R@5 | R@10 | head AP |\n|---|---:|---:|---:|---:|---:|\n",
            v.variant,
            if v.refined { " + refinement" } else { "" }
        ));
        for name in names {
            let ap = v
                .coherence_ap
                .as_ref()
                .and_then(|m| m.get(name).copied().flatten())
                .map(|x| format!("{x:.3}"))
                .unwrap_or_else(|| "-".into());
            match v.per_relation.get(name).and_then(|m| m.as_ref()) {
                Some(m) => md.push_str(&format!(
                    "| {name} | {:.2} | {:.1} | {:.1} | {:.1} | {ap} |\n",
                    m.med_r_mean, m.recall_mean[&1], m.recall_mean[&5], m.recall_mean[&10]
                )),
                None => md.push_str(&format!("| {name} | - | - | - | - | {ap} |\n")),
            }
        }
        md.push_str(&format!(
            "| all | {:.2} | {:.1} | {:.1} | {:.1} | |\n",
            v.overall.med_r_mean, v.overall.recall_mean[&1], v.overall.recall_mean[&5], v.overall.recall_mean[&10]
        ));
    }
    Ok(md)
}

fn report_relations(a: ReportArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.data)?;
    let data = DataDir::load(&data_dir)?;
    let (split, cfg) = pool_settings(&mut run.settings, a.pool, data.info.schema)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let models = load_checkpoints(&mut run, a.checkpoints)?;
    let report = evaluate_all(&models, data.split(&split)?, &cfg)?;
    ensure_parent(&out)?;
    fs::write(&out, relation_tables(&data, &split, &report)?)?;
    run.recorder.seed("seed", cfg.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

/// How an image is shown to people: its path when it has one, else its pair id.
fn image_label(corpus: &Corpus, i: usize) -> String {
    match &corpus.pairs[i].image {
        ImageRef::Path(p) => p.to_string_lossy().into_owned(),
        _ => corpus.pairs[i].pair_id.clone(),
    }
}

fn load_pair(run: &mut Run, cmcm: Option<PathBuf>, cmca: Option<PathBuf>) -> Result<(CoherenceModel, CoherenceModel)> {
    let mut load = |key: &str, flag| -> Result<CoherenceModel> {
        let p: PathBuf = run.settings.require(key, flag)?;
        run.recorder.input(&p);
        CoherenceModel::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))
    };
    Ok((load("cmcm", cmcm)?, load("cmca", cmca)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TopkEntry {
    pub query_id: String,
    pub text: String,
    pub ground_truth: String,
    pub cmcm: Vec<String>,
    pub cmca: Vec<String>,
    /// Tokens of the query with the coherence-aware model's attention weights.
    pub attention: Vec<(String, f64)>,
}

fn dump_topk(a: DumpTopkArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.data)?;
    let data = DataDir::load(&data_dir)?;
    let (split, cfg) = pool_settings(&mut run.settings, a.pool, data.info.schema)?;
    let k = run.settings.get("k", a.k, 5usize)?;
    let n_queries = run.settings.get("queries", a.queries, 10usize)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let (cmcm, cmca) = load_pair(&mut run, a.cmcm, a.cmca)?;
    let corpus = data.split(&split)?;
    let pool = sample_retrieval_pool(corpus.len(), cfg.pool_size, cfg.seed, None)?;
    let refine = if cmcm.head.is_some() { cfg.refine } else { None };
    let lists = |m: &CoherenceModel, refine| -> Result<Vec<Vec<usize>>> {
        let enc = EncodedSplit::new(m, &m.prepare(corpus)?)?;
        Ok(top_k(m, &enc, &pool, k, refine)?)
    };
    let top_m = lists(&cmcm, refine)?;
    let top_a = lists(&cmca, None)?;
    let attention = cmcm.attention_report(corpus)?;
    let mut lines = Vec::new();
    for (q, &i) in pool.iter().enumerate().take(n_queries) {
        lines.push(TopkEntry {
            query_id: corpus.pairs[i].pair_id.clone(),
            text: corpus.pairs[i].text.clone(),
            ground_truth: image_label(corpus, i),
            cmcm: top_m[q].iter().map(|&j| image_label(corpus, j)).collect(),
            cmca: top_a[q].iter().map(|&j| image_label(corpus, j)).collect(),
            attention: attention[i].tokens.clone(),
        });
    }
    ensure_parent(&out)?;
    write_jsonl(&out, &lines)?;
    run.recorder.seed("seed", cfg.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

fn humaneval_make(a: HumanevalMakeArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.data)?;
    let data = DataDir::load(&data_dir)?;
    let (split, cfg) = pool_settings(&mut run.settings, a.pool, data.info.schema)?;
    let relation = run.settings.get_opt::<String>("relation", a.relation)?;
    let limit = run.settings.get_opt::<usize>("limit", a.limit)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let (cmcm, cmca) = load_pair(&mut run, a.cmcm, a.cmca)?;
    let corpus = data.split(&split)?;
    if let Some(r) = &relation {
        if corpus.vocab.index_of(r).is_none() {
            bail!("unknown relation `{r}`");
        }
    }
    let pool = sample_retrieval_pool(corpus.len(), cfg.pool_size, cfg.seed, None)?;
    let refine = if cmcm.head.is_some() { cfg.refine } else { None };
    let top1 = |m: &CoherenceModel, refine| -> Result<Vec<Top1>> {
        let enc = EncodedSplit::new(m, &m.prepare(corpus)?)?;
        Ok(top_k(m, &enc, &pool, 1, refine)?
            .iter()
            .zip(&pool)
            .map(|(best, &q)| Top1 {
                query_id: corpus.pairs[q].pair_id.clone(),
                image: image_label(corpus, best[0]),
            })
            .collect())
    };
    let m1 = top1(&cmcm, refine)?;
    let a1 = top1(&cmca, None)?;
    let names = corpus.vocab.names();
    let queries: Vec<TaskQuery> = pool
        .iter()
        .map(|&q| TaskQuery {
            query_id: corpus.pairs[q].pair_id.clone(),
            caption: corpus.pairs[q].text.clone(),
            relations: names
                .iter()
                .zip(&corpus.pairs[q].labels)
                .filter(|(_, y)| **y)
                .map(|(n, _)| n.clone())
                .collect(),
        })
        .collect();
    let mut tasks = make_pairwise_tasks(&m1, &a1, &queries, relation.as_deref(), cfg.seed)?;
    if let Some(n) = limit {
        tasks.truncate(n);
    }
    ensure_parent(&out)?;
    write_jsonl(&out, &tasks)?;
    eprintln!("wrote {} tasks to {}", tasks.len(), out.display());
    run.recorder.seed("seed", cfg.seed);
    run.recorder.input(&data_dir);
    run.recorder.output(&out);
    run.finish(&out)
}

fn humaneval_serve(a: HumanevalServeArgs, run: &mut Run) -> Result<()> {
    let s = &mut run.settings;
    let tasks_path: PathBuf = s.require("tasks", a.tasks)?;
    let votes_path: PathBuf = s.require("votes", a.votes)?;
    let bind = s.get("bind", a.bind, "127.0.0.1:8080".to_string())?;
    let raters = s.get("raters_per_item", a.raters_per_item, RATERS_PER_ITEM)?;
    let tasks = read_tasks(&tasks_path)?;
    ensure_parent(&votes_path)?;
    let store = VoteStore::open(&votes_path)?;
    run.recorder.input(&tasks_path);
    // written before serving so the manifest exists while the log grows
    let recorder = std::mem::replace(&mut run.recorder, RunRecorder::new("humaneval-serve", &[]));
    let path = run.manifest.clone().unwrap_or_else(|| default_manifest_path(&votes_path));
    recorder.finish(run.settings.snapshot(), &path)?;
    server::serve(Arc::new(AppState::new(tasks, store, raters)), &bind)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    #[serde(flatten)]
    pub result: cmcm::humaneval::AggregateResult,
    pub t_statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Why no test was run, when it was not.
    pub test_note: Option<String>,
}

fn humaneval_aggregate(a: HumanevalAggregateArgs, mut run: Run) -> Result<()> {
    let s = &mut run.settings;
    let tasks_path: PathBuf = s.require("tasks", a.tasks)?;
    let votes_path: PathBuf = s.require("votes", a.votes)?;
    let raters = s.get("raters_per_item", a.raters_per_item, RATERS_PER_ITEM)?;
    let out: PathBuf = s.require("out", a.out)?;
    let tasks = read_tasks(&tasks_path)?;
    let votes: Vec<VoteRecord> = read_jsonl(&votes_path)?;
    let result = aggregate_votes(&votes, &tasks, raters)?;
    let (t_statistic, p_value, test_note) = match preference_significance(&result.indicators) {
        Ok((t, p)) => (Some(t), Some(p), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let pct: BTreeMap<String, String> = result
        .percentages
        .iter()
        .map(|(o, p)| (format!("{o:?}"), format!("{p:.1}%")))
        .collect();
    eprintln!(
        "{pct:?} over {} items ({} no consensus, {} incomplete)",
        result.n_items, result.n_no_consensus, result.n_incomplete
    );
    let report = AggregateReport {
        result,
        t_statistic,
        p_value,
        test_note,
    };
    ensure_parent(&out)?;
    // infinite statistics are not JSON numbers
    let mut value = serde_json::to_value(&report)?;
    if let Some(t) = report.t_statistic.filter(|t| t.is_infinite()) {
        value["t_statistic"] = Value::String(if t > 0.0 { "+inf" } else { "-inf" }.into());
    }
    fs::write(&out, serde_json::to_string_pretty(&value)?)?;
    run.recorder.input(&tasks_path);
    run.recorder.input(&votes_path);
    run.recorder.output(&out);
    run.finish(&out)
}

fn export(a: ExportArgs, mut run: Run) -> Result<()> {
    let data_dir = run.settings.data_path("data", a.data)?;
    let data = DataDir::load(&data_dir)?;
    let ckpt: PathBuf = run.settings.require("checkpoint", a.checkpoint)?;
    let split = run.settings.get("split", a.split, "test".to_string())?;
    let raw = run.settings.switch("raw", a.raw)?;
    let out: PathBuf = run.settings.require("out", a.out)?;
    let model = CoherenceModel::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let prepared = model.prepare(data.split(&split)?)?;
    let (mut text, _) = model.encode_texts(&prepared.tokens)?;
    let mut image = model.encode_images(&prepared.features)?;
    if !raw {
        text = cmcm::encoders::normalize_rows(&text)?;
        image = cmcm::encoders::normalize_rows(&image)?;
    }
    ensure_parent(&out)?;
    let stem = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut written = Vec::new();
    for (side, m) in [("text", &text), ("image", &image)] {
        let prefix = out.with_file_name(format!("{stem}_{side}"));
        let manifest = export_embeddings(&prefix, &prepared.ids, m, !raw)?;
        written.push(manifest);
        written.push(prefix.with_extension("f32"));
    }
    run.recorder.input(&data_dir);
    run.recorder.input(&ckpt);
    for w in &written {
        run.recorder.output(w);
    }
    run.finish(&out)
}

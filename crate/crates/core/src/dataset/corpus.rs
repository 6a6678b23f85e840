//! Corpus records, relation vocabularies and the JSON Lines corpus format.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"pair_id": "p1", "text": "...", "image": "img/p1.jpg", "labels": {"Visible": 1, ...}}
//! ```
//!
//! `image` is a path (relative to the corpus file), a `base64:`/`data:` string
//! carrying encoded image bytes, or an array of numbers for synthetic
//! pseudo-images. A sidecar `<stem>.manifest.json` declares the schema name
//! and the ordered relation list.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Relations annotated in CITE++ as `(name, question id)`, in label order.
pub const CITE_RELATIONS: [(&str, &str); 7] = [
    ("Expansion", "Q2"),
    ("ImageNeeded", "Q3"),
    ("Elaboration_t", "Q4"),
    ("Elaboration_i-tool", "Q5"),
    ("Temporal_i<t", "Q6"),
    ("Temporal_i>t", "Q7"),
    ("Temporal_i=t", "Q8"),
];

/// Positive rates of the full CITE++ corpus, aligned with [`CITE_RELATIONS`].
pub const CITE_POSITIVE_RATES: [f64; 7] = [0.821, 0.115, 0.329, 0.193, 0.158, 0.588, 0.313];

/// Relations annotated in Clue, in label order.
pub const CLUE_RELATIONS: [&str; 6] = ["Visible", "Subjective", "Action", "Story", "Meta", "Irrelevant"];

/// Positive rates of the full Clue corpus, aligned with [`CLUE_RELATIONS`].
pub const CLUE_POSITIVE_RATES: [f64; 6] = [0.674, 0.066, 0.157, 0.243, 0.391, 0.087];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Cite,
    Clue,
    Synthetic,
}

impl Schema {
    /// The fixed relation list, or `None` for synthetic corpora whose
    /// relations come from the manifest.
    pub fn relations(self) -> Option<Vec<String>> {
        match self {
            Schema::Cite => Some(CITE_RELATIONS.iter().map(|(n, _)| n.to_string()).collect()),
            Schema::Clue => Some(CLUE_RELATIONS.iter().map(|n| n.to_string()).collect()),
            Schema::Synthetic => None,
        }
    }

    /// Reference positive rates from the original annotation studies.
    pub fn reference_positive_rates(self) -> Option<Vec<f64>> {
        match self {
            Schema::Cite => Some(CITE_POSITIVE_RATES.to_vec()),
            Schema::Clue => Some(CLUE_POSITIVE_RATES.to_vec()),
            Schema::Synthetic => None,
        }
    }

    /// Default maximum text length used by the text encoder.
    pub fn default_max_len(self) -> usize {
        match self {
            Schema::Cite => 200,
            Schema::Clue => 40,
            Schema::Synthetic => 40,
        }
    }

    /// Default refinement sharpness for the confidence function.
    pub fn default_refine_lambda(self) -> f64 {
        match self {
            Schema::Cite => 0.13,
            Schema::Clue | Schema::Synthetic => 0.12,
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Cite => "cite",
            Schema::Clue => "clue",
            Schema::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cite" | "cite++" => Ok(Schema::Cite),
            "clue" => Ok(Schema::Clue),
            "synthetic" => Ok(Schema::Synthetic),
            other => Err(Error::Schema(format!("unknown schema `{other}`"))),
        }
    }
}

fn cite_alias(name: &str) -> Option<&'static str> {
    CITE_RELATIONS.iter().find(|(n, _)| *n == name).map(|(_, q)| *q)
}

/// Ordered relation identifiers; label vectors index into this order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationVocab {
    names: Vec<String>,
    positive_rate: Vec<f64>,
}

impl RelationVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Schema("empty relation name".into()));
            }
            if !seen.insert(n.clone()) {
                return Err(Error::Schema(format!("duplicate relation `{n}`")));
            }
        }
        let positive_rate = vec![0.0; names.len()];
        Ok(Self { names, positive_rate })
    }

    pub fn for_schema(schema: Schema) -> Option<Self> {
        schema.relations().map(|names| Self::new(names).expect("built-in relation lists are valid"))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn positive_rates(&self) -> &[f64] {
        &self.positive_rate
    }

    pub fn with_positive_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "{} rates for {} relations",
                rates.len(),
                self.names.len()
            )));
        }
        if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Parameter(format!("positive rate {bad} outside [0, 1]")));
        }
        self.positive_rate = rates;
        Ok(self)
    }

    /// Resolves a relation by name or question alias (`Q2`..`Q8`),
    /// ignoring ASCII case.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| {
            n.eq_ignore_ascii_case(name) || cite_alias(n).is_some_and(|q| q.eq_ignore_ascii_case(name))
        })
    }
}

/// Image payload of a pair.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Encoded(Vec<u8>),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPair {
    pub pair_id: String,
    pub text: String,
    pub image: ImageRef,
    pub labels: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub schema: Schema,
    pub pairs: Vec<CorpusPair>,
    pub vocab: RelationVocab,
    pub split: SplitTag,
}

impl Corpus {
    /// Validates pair-id uniqueness and label alignment.
    pub fn new(schema: Schema, pairs: Vec<CorpusPair>, vocab: RelationVocab, split: SplitTag) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::record(&p.pair_id, "pair_id", "duplicate pair id"));
            }
            if p.labels.len() != vocab.len() {
                return Err(Error::record(
                    &p.pair_id,
                    "labels",
                    format!("{} labels for {} relations", p.labels.len(), vocab.len()),
                ));
            }
        }
        Ok(Self {
            schema,
            pairs,
            vocab,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.text.as_str()).collect()
    }

    pub(crate) fn subset(&self, idx: &[usize], split: SplitTag) -> Result<Self> {
        let pairs = idx.iter().map(|&i| self.pairs[i].clone()).collect();
        Corpus::new(self.schema, pairs, self.vocab.clone(), split)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: Schema,
    pub relations: Vec<String>,
}

/// `data/cite.jsonl` -> `data/cite.manifest.json`
pub fn manifest_path(corpus_path: &Path) -> PathBuf {
    let stem = corpus_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    corpus_path.with_file_name(format!("{stem}.manifest.json"))
}

fn relation_vocab_for(schema: Schema, manifest: Option<&CorpusManifest>) -> Result<RelationVocab> {
    match (RelationVocab::for_schema(schema), manifest) {
        (Some(vocab), None) => Ok(vocab),
        (Some(vocab), Some(m)) => {
            if m.schema != schema {
                return Err(Error::Schema(format!(
                    "manifest declares schema `{}` but `{schema}` was requested",
                    m.schema
                )));
            }
            if m.relations.len() != vocab.len() {
                return Err(Error::Schema(format!(
                    "manifest lists {} relations, schema `{schema}` has {}",
                    m.relations.len(),
                    vocab.len()
                )));
            }
            for (i, name) in m.relations.iter().enumerate() {
                match vocab.index_of(name) {
                    Some(j) if j == i => {}
                    Some(_) => {
                        return Err(Error::Schema(format!("relation `{name}` out of order in manifest")));
                    }
                    None => return Err(Error::Schema(format!("unknown relation name `{name}`"))),
                }
            }
            Ok(vocab)
        }
        (None, Some(m)) => RelationVocab::new(m.relations.clone()),
        (None, None) => Err(Error::Schema(format!("schema `{schema}` requires a manifest listing its relations"))),
    }
}

fn parse_image(pair_id: &str, value: &Value, base_dir: &Path) -> Result<ImageRef> {
    match value {
        Value::String(s) => {
            let payload = s
                .strip_prefix("base64:")
                .or_else(|| s.strip_prefix("data:").and_then(|rest| rest.split_once(";base64,").map(|(_, b)| b)));
            if let Some(b64) = payload {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64.trim())
                    .map_err(|e| Error::record(pair_id, "image", format!("invalid base64: {e}")))?;
                return Ok(ImageRef::Encoded(bytes));
            }
            let path = base_dir.join(s);
            if !path.is_file() {
                return Err(Error::record(
                    pair_id,
                    "image",
                    format!("image file {} not found", path.display()),
                ));
            }
            Ok(ImageRef::Path(path))
        }
        Value::Array(items) => {
            let mut v = Vec::with_capacity(items.len());
            for item in items {
                let x = item
                    .as_f64()
                    .ok_or_else(|| Error::record(pair_id, "image", "pseudo-image entries must be numbers"))?;
                v.push(x);
            }
            if v.is_empty() {
                return Err(Error::record(pair_id, "image", "empty pseudo-image"));
            }
            Ok(ImageRef::Vector(v))
        }
        _ => Err(Error::record(pair_id, "image", "expected a path, base64 string or number array")),
    }
}

fn parse_label(pair_id: &str, name: &str, value: &Value) -> Result<bool> {
    match value {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
        Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
        _ => Err(Error::record(pair_id, &format!("labels.{name}"), "label must be 0 or 1")),
    }
}

fn parse_record(line: &str, lineno: usize, vocab: &RelationVocab, base_dir: &Path) -> Result<CorpusPair> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::record(format!("<line {lineno}>"), "record", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::record(format!("<line {lineno}>"), "record", "expected a JSON object"))?;
    let pair_id = obj
        .get("pair_id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::record(format!("<line {lineno}>"), "pair_id", "missing or not a non-empty string"))?
        .to_string();
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Error::record(&pair_id, "text", "missing or empty"))?
        .to_string();
    let image = parse_image(
        &pair_id,
        obj.get("image").ok_or_else(|| Error::record(&pair_id, "image", "missing"))?,
        base_dir,
    )?;
    let label_obj = obj
        .get("labels")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::record(&pair_id, "labels", "missing or not an object"))?;
    let mut labels: Vec<Option<bool>> = vec![None; vocab.len()];
    for (name, v) in label_obj {
        let idx = vocab
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("unknown relation name `{name}` in record {pair_id}")))?;
        labels[idx] = Some(parse_label(&pair_id, name, v)?);
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::record(&pair_id, &format!("labels.{}", vocab.names()[i]), "missing")))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorpusPair {
        pair_id,
        text,
        image,
        labels,
    })
}

/// Reads a JSON Lines corpus. The sidecar manifest is optional for the
/// fixed schemas and required for synthetic corpora.
pub fn load_corpus(path: &Path, schema: Schema) -> Result<Corpus> {
    let mpath = manifest_path(path);
    let manifest: Option<CorpusManifest> = if mpath.is_file() {
        let raw = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Some(serde_json::from_str(&raw)?)
    } else {
        None
    };
    let vocab = relation_vocab_for(schema, manifest.as_ref())?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_record(&line, i + 1, &vocab, &base_dir)?);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rates = positive_rates_of(&pairs, vocab.len());
    let vocab = vocab.with_positive_rates(rates)?;
    Corpus::new(schema, pairs, vocab, SplitTag::Full)
}

fn image_json(image: &ImageRef, base_dir: &Path) -> Value {
    match image {
        ImageRef::Path(p) => {
            let rel = p.strip_prefix(base_dir).unwrap_or(p);
            Value::String(rel.to_string_lossy().into_owned())
        }
        ImageRef::Encoded(bytes) => Value::String(format!(
            "base64:{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        )),
        ImageRef::Vector(v) => Value::Array(v.iter().map(|x| Value::from(*x)).collect()),
    }
}

/// Serializes one pair as a corpus record line (no trailing newline).
pub fn record_line(pair: &CorpusPair, vocab: &RelationVocab, base_dir: &Path) -> String {
    let labels: serde_json::Map<String, Value> = vocab
        .names()
        .iter()
        .zip(&pair.labels)
        .map(|(n, l)| (n.clone(), Value::from(u8::from(*l))))
        .collect();
    let mut obj = serde_json::Map::new();
    obj.insert("pair_id".into(), Value::String(pair.pair_id.clone()));
    obj.insert("text".into(), Value::String(pair.text.clone()));
    obj.insert("image".into(), image_json(&pair.image, base_dir));
    obj.insert("labels".into(), Value::Object(labels));
    Value::Object(obj).to_string()
}

/// Writes a corpus and its sidecar manifest. Image paths are written
/// relative to the destination directory when possible.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for pair in &corpus.pairs {
        out.extend_from_slice(record_line(pair, &corpus.vocab, &base_dir).as_bytes());
        out.push(b'\n');
    }
    write_file(path, &out)?;
    let manifest = CorpusManifest {
        schema: corpus.schema,
        relations: corpus.vocab.names().to_vec(),
    };
    write_file(&manifest_path(path), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn positive_rates_of(pairs: &[CorpusPair], n_relations: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_relations];
    for p in pairs {
        for (c, l) in p.labels.iter().enumerate() {
            counts[c] += usize::from(*l);
        }
    }
    counts.iter().map(|&k| k as f64 / pairs.len().max(1) as f64).collect()
}

/// Fraction of pairs labeled positive, per relation.
pub fn relation_positive_rates(corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rates = positive_rates_of(&corpus.pairs, corpus.vocab.len());
    Ok(corpus.vocab.names().iter().cloned().zip(rates).collect())
}

/// Per-relation rates in vocabulary order.
pub fn positive_rate_vector(corpus: &Corpus) -> Vec<f64> {
    positive_rates_of(&corpus.pairs, corpus.vocab.len())
}

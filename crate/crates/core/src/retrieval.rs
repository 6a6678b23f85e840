//! Similarity matrices, confidence-based refinement and ranking.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::encoders::normalize_rows;
use crate::error::{Error, Result};
use crate::model::CoherenceModel;

/// Default number of candidates per retrieval pool.
pub const POOL_SIZE: usize = 500;

/// Cosine similarities, queries x candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub theta: Matrix,
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
}

pub fn build_similarity_matrix(
    text: &Matrix,
    image: &Matrix,
    query_ids: Vec<String>,
    candidate_ids: Vec<String>,
) -> Result<SimilarityMatrix> {
    if query_ids.len() != text.nrows() || candidate_ids.len() != image.nrows() {
        return Err(Error::Shape("id lists do not match embedding rows".into()));
    }
    if text.ncols() != image.ncols() {
        return Err(Error::Shape(format!("widths {} and {}", text.ncols(), image.ncols())));
    }
    let theta = normalize_rows(text)?
        .dot(&normalize_rows(image)?.t())
        .mapv(|x| x.clamp(-1.0, 1.0));
    Ok(SimilarityMatrix {
        theta,
        query_ids,
        candidate_ids,
    })
}

/// Sum over relations of `exp(lambda * |x - 0.5|)` per (query, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMatrix {
    pub eta: Matrix,
    pub lambda_used: f64,
    pub n_relations: usize,
}

impl ConfidenceMatrix {
    /// Builds η from one probability matrix per relation.
    pub fn from_probs(probs: &[Matrix], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda {lambda} must be nonnegative")));
        }
        let first = probs.first().ok_or(Error::NoCoherenceHead)?;
        let mut eta = Matrix::zeros(first.dim());
        for p in probs {
            if p.dim() != first.dim() {
                return Err(Error::Shape("relation probability matrices differ in shape".into()));
            }
            eta.zip_mut_with(p, |e, x| *e += relation_factor(*x, lambda));
        }
        let out = Self {
            eta,
            lambda_used: lambda,
            n_relations: probs.len(),
        };
        out.check_bounds()?;
        Ok(out)
    }

    /// Every entry lies in `[C, C * exp(lambda / 2)]`.
    pub fn check_bounds(&self) -> Result<()> {
        let c = self.n_relations as f64;
        let hi = c * (self.lambda_used / 2.0).exp();
        let tol = 1e-12 * hi;
        for ((i, j), e) in self.eta.indexed_iter() {
            if !(*e >= c - tol && *e <= hi + tol) {
                return Err(Error::Invariant(format!(
                    "confidence {e} at ({i}, {j}) outside [{c}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// `exp(lambda * |x - 0.5|)`.
pub fn relation_factor(x: f64, lambda: f64) -> f64 {
    (lambda * (x - 0.5).abs()).exp()
}

/// Runs the coherence head on every (query text, candidate image) pairing.
pub fn confidence_scores(model: &CoherenceModel, text: &Matrix, image: &Matrix, lambda: f64) -> Result<ConfidenceMatrix> {
    ConfidenceMatrix::from_probs(&model.coherence_all_pairs(text, image)?, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub lambda: f64,
    pub threshold: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            lambda: 0.13,
            threshold: 0.1,
        }
    }
}

/// Entrywise `theta * eta`.
pub fn refine_similarities(theta: &Matrix, eta: &ConfidenceMatrix) -> Result<Matrix> {
    if theta.dim() != eta.eta.dim() {
        return Err(Error::Shape(format!("theta {:?}, eta {:?}", theta.dim(), eta.eta.dim())));
    }
    Ok(theta * &eta.eta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveRefinement {
    pub rows: Matrix,
    pub refined: Vec<bool>,
}

/// Gap between the largest and second-largest entry of a row.
pub fn top_two_gap(row: ndarray::ArrayView1<f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in row {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// Replaces a query's row by its refined version only when the top-two gap
/// of the unrefined row is below `threshold`.
pub fn selective_refine(theta: &Matrix, eta: &ConfidenceMatrix, threshold: f64) -> Result<SelectiveRefinement> {
    if theta.ncols() < 2 {
        return Err(Error::Input("selective refinement needs at least two candidates".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!("threshold {threshold} must be nonnegative")));
    }
    let refined_all = refine_similarities(theta, eta)?;
    let mut rows = theta.clone();
    let mut refined = Vec::with_capacity(theta.nrows());
    for (i, row) in theta.rows().into_iter().enumerate() {
        let hard = top_two_gap(row) < threshold;
        if hard {
            rows.row_mut(i).assign(&refined_all.row(i));
        }
        refined.push(hard);
    }
    Ok(SelectiveRefinement { rows, refined })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult<I> {
    pub order: Vec<I>,
    /// 1-based.
    pub rank_of_truth: usize,
    pub refined: bool,
}

/// Sorts candidates by descending similarity, ties by ascending id.
pub fn rank_images<I: Ord + Clone>(row: &[f64], ids: &[I], truth: &I) -> Result<RankingResult<I>> {
    if row.len() != ids.len() {
        return Err(Error::Shape(format!("{} similarities, {} ids", row.len(), ids.len())));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| ids[a].cmp(&ids[b])));
    let order: Vec<I> = idx.iter().map(|&i| ids[i].clone()).collect();
    let pos = order
        .iter()
        .position(|x| x == truth)
        .ok_or_else(|| Error::Input("ground truth not among candidates".into()))?;
    Ok(RankingResult {
        order,
        rank_of_truth: pos + 1,
        refined: false,
    })
}

/// Rank of `truth` without materializing the ordering: one plus the number
/// of candidates that sort ahead of it.
pub fn rank_of<I: Ord>(row: &[f64], ids: &[I], truth: usize) -> usize {
    let t = row[truth];
    1 + row
        .iter()
        .zip(ids)
        .filter(|(s, id)| s.total_cmp(&t).is_gt() || (s.total_cmp(&t).is_eq() && *id < &ids[truth]))
        .count()
}

/// Seeded uniform sample of `size` indices out of `0..n`, always containing
/// `must_include`; all indices when `n <= size`. Sorted ascending.
pub fn sample_retrieval_pool(n: usize, size: usize, seed: u64, must_include: Option<usize>) -> Result<Vec<usize>> {
    if size < 2 {
        return Err(Error::Parameter("pool size must be at least 2".into()));
    }
    if let Some(m) = must_include {
        if m >= n {
            return Err(Error::Input(format!("index {m} outside corpus of {n}")));
        }
    }
    if n <= size {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = sample(&mut rng, n, size).into_vec();
    if let Some(m) = must_include {
        if !pool.contains(&m) {
            // swap out one uniformly chosen sample for the required index
            let slot = rand::Rng::random_range(&mut rng, 0..size);
            pool[slot] = m;
        }
    }
    pool.sort_unstable();
    Ok(pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub ids: Vec<String>,
    pub dim: usize,
    pub normalized: bool,
    /// Name of the row-major little-endian f32 data file, relative to the
    /// manifest.
    pub data_file: String,
}

/// Writes `<prefix>.f32` and `<prefix>.json`.
pub fn export_embeddings(prefix: &Path, ids: &[String], values: &Matrix, normalized: bool) -> Result<PathBuf> {
    if ids.len() != values.nrows() {
        return Err(Error::Shape(format!("{} ids, {} rows", ids.len(), values.nrows())));
    }
    let data = prefix.with_extension("f32");
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for x in values.iter() {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(&data, bytes).map_err(|e| Error::io(&data, e))?;
    let manifest = EmbeddingManifest {
        ids: ids.to_vec(),
        dim: values.ncols(),
        normalized,
        data_file: data
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let path = prefix.with_extension("json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn import_embeddings(manifest_path: &Path) -> Result<(EmbeddingManifest, Matrix)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text)?;
    let data = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data_file);
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let expected = manifest.ids.len() * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(Error::Schema(format!(
            "{} holds {} bytes, manifest implies {expected}",
            data.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    let m = Matrix::from_shape_vec((manifest.ids.len(), manifest.dim), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((manifest, m))
}

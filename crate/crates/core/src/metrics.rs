//! Retrieval and classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Median of 1-based ranks; an even count averages the two middle values.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Input("median rank of no queries".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Input("ranks are 1-based".into()));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

/// Percentage of queries whose truth ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::Input("recall of no queries".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Non-interpolated average precision. Items are ranked by descending score,
/// ties by ascending position.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(Error::Input("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub med_r: f64,
    /// Cutoff to percentage.
    pub recall_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl RetrievalMetrics {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let mut recall_at = BTreeMap::new();
        for &k in ks {
            recall_at.insert(k, recall_at_k(ranks, k)?);
        }
        Ok(Self {
            med_r: median_rank(ranks)?,
            recall_at,
            n_queries: ranks.len(),
        })
    }
}

/// Metrics restricted to queries whose pair is positive for relation `c`;
/// `None` when no query qualifies.
pub fn per_relation_metrics(ranks: &[usize], labels: &[Vec<bool>], c: usize, ks: &[usize]) -> Result<Option<RetrievalMetrics>> {
    if ranks.len() != labels.len() {
        return Err(Error::Shape(format!("{} ranks, {} label rows", ranks.len(), labels.len())));
    }
    let mut subset = Vec::new();
    for (r, l) in ranks.iter().zip(labels) {
        let y = l
            .get(c)
            .ok_or_else(|| Error::Parameter(format!("relation index {c} out of range")))?;
        if *y {
            subset.push(*r);
        }
    }
    if subset.is_empty() {
        return Ok(None);
    }
    RetrievalMetrics::from_ranks(&subset, ks).map(Some)
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics over repeated evaluations. The headline MedR is the mean of the
/// per-repeat medians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedMetrics {
    pub per_repeat: Vec<RetrievalMetrics>,
    pub med_r_mean: f64,
    pub med_r_std: f64,
    pub recall_mean: BTreeMap<usize, f64>,
    pub recall_std: BTreeMap<usize, f64>,
}

impl RepeatedMetrics {
    pub fn aggregate(per_repeat: Vec<RetrievalMetrics>) -> Result<Self> {
        if per_repeat.is_empty() {
            return Err(Error::Input("no repeats to aggregate".into()));
        }
        let (med_r_mean, med_r_std) = mean_std(&per_repeat.iter().map(|m| m.med_r).collect::<Vec<_>>());
        let mut recall_mean = BTreeMap::new();
        let mut recall_std = BTreeMap::new();
        for k in per_repeat[0].recall_at.keys() {
            let vals: Vec<f64> = per_repeat.iter().map(|m| m.recall_at[k]).collect();
            let (m, s) = mean_std(&vals);
            recall_mean.insert(*k, m);
            recall_std.insert(*k, s);
        }
        Ok(Self {
            per_repeat,
            med_r_mean,
            med_r_std,
            recall_mean,
            recall_std,
        })
    }
}

/// One model variant in a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub refined: bool,
    pub overall: RepeatedMetrics,
    /// `None` marks a relation with no positive query.
    pub per_relation: BTreeMap<String, Option<RepeatedMetrics>>,
    /// Coherence-prediction AP per relation, when the model has a head.
    pub coherence_ap: Option<BTreeMap<String, Option<f64>>>,
    /// Fraction of queries whose row was refined, per repeat.
    pub refined_fraction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub variants: Vec<VariantReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

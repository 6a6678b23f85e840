//! Pairwise human evaluation: task construction, vote stores, majority
//! aggregation and significance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const RATERS_PER_ITEM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flip(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Server-side record of which side shows the coherence-aware model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub cmcm_side: Side,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTask {
    pub task_id: String,
    pub query_id: String,
    pub caption: String,
    pub image_left: String,
    pub image_right: String,
    pub relation_tag: Option<String>,
    pub provenance: Provenance,
}

impl PairwiseTask {
    pub fn view(&self, completed: usize, total: usize) -> TaskView {
        TaskView {
            task_id: self.task_id.clone(),
            caption: self.caption.clone(),
            image_a: self.image_left.clone(),
            image_b: self.image_right.clone(),
            progress: Progress { completed, total },
        }
    }
}

/// The rater-facing projection of a task. Carries no provenance or relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskView {
    pub task_id: String,
    pub caption: String,
    pub image_a: String,
    pub image_b: String,
    pub progress: Progress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    #[serde(rename = "prefer_A")]
    PreferA,
    #[serde(rename = "prefer_B")]
    PreferB,
    #[serde(rename = "same")]
    Same,
    #[serde(rename = "neither")]
    Neither,
}

impl Choice {
    pub const ALL: [Choice; 4] = [Choice::PreferA, Choice::PreferB, Choice::Same, Choice::Neither];

    /// Outcome for the coherence-aware side; A is the left image.
    pub fn outcome(self, cmcm_side: Side) -> Outcome {
        match (self, cmcm_side) {
            (Choice::PreferA, Side::Left) | (Choice::PreferB, Side::Right) => Outcome::Better,
            (Choice::PreferA, Side::Right) | (Choice::PreferB, Side::Left) => Outcome::Worse,
            (Choice::Same, _) => Outcome::BothGood,
            (Choice::Neither, _) => Outcome::BothBad,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Choice::PreferA => Choice::PreferB,
            Choice::PreferB => Choice::PreferA,
            c => c,
        }
    }
}

/// Vote as submitted by a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteSubmission {
    pub task_id: String,
    pub rater_id: String,
    pub choice: Choice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub task_id: String,
    pub rater_id: String,
    pub choice: Choice,
    /// RFC 3339.
    pub timestamp: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Better,
    Worse,
    BothGood,
    BothBad,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::Better, Outcome::Worse, Outcome::BothGood, Outcome::BothBad];

    pub fn indicator(self) -> f64 {
        match self {
            Outcome::Better => 1.0,
            Outcome::Worse => -1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    /// Percentages over consensus items; all zero when there are none.
    pub percentages: BTreeMap<Outcome, f64>,
    pub counts: BTreeMap<Outcome, usize>,
    /// Consensus items.
    pub n_items: usize,
    pub n_no_consensus: usize,
    pub n_incomplete: usize,
    pub n_tasks: usize,
    /// Per consensus item in task order: +1 Better, -1 Worse, 0 otherwise.
    pub indicators: Vec<f64>,
}

/// Top-1 retrieval of one model for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Top1 {
    pub query_id: String,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub query_id: String,
    pub caption: String,
    /// Names of relations positive for the query's pair.
    pub relations: Vec<String>,
}

/// One task per query, in query order. With a filter only queries positive
/// for that relation are kept.
pub fn make_pairwise_tasks(
    cmcm_top1: &[Top1],
    cmca_top1: &[Top1],
    queries: &[TaskQuery],
    relation_filter: Option<&str>,
    seed: u64,
) -> Result<Vec<PairwiseTask>> {
    if cmcm_top1.len() != queries.len() || cmca_top1.len() != queries.len() {
        return Err(Error::Input(format!(
            "query sets misaligned: {} queries, {} and {} retrievals",
            queries.len(),
            cmcm_top1.len(),
            cmca_top1.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for ((q, m), a) in queries.iter().zip(cmcm_top1).zip(cmca_top1) {
        if m.query_id != q.query_id || a.query_id != q.query_id {
            return Err(Error::Input(format!(
                "query sets misaligned at {}: got {} and {}",
                q.query_id, m.query_id, a.query_id
            )));
        }
        // drawn for every query so a filter does not change the others' sides
        let cmcm_side = if rng.random::<bool>() { Side::Left } else { Side::Right };
        if let Some(rel) = relation_filter {
            if !q.relations.iter().any(|r| r == rel) {
                continue;
            }
        }
        let (image_left, image_right) = match cmcm_side {
            Side::Left => (m.image.clone(), a.image.clone()),
            Side::Right => (a.image.clone(), m.image.clone()),
        };
        tasks.push(PairwiseTask {
            task_id: format!("task{:05}", tasks.len()),
            query_id: q.query_id.clone(),
            caption: q.caption.clone(),
            image_left,
            image_right,
            relation_tag: relation_filter.map(str::to_string),
            provenance: Provenance { cmcm_side, seed },
        });
    }
    Ok(tasks)
}

/// Strict majority outcome, or `None` on a split.
pub fn majority(outcomes: &[Outcome]) -> Option<Outcome> {
    let mut counts: HashMap<Outcome, usize> = HashMap::new();
    for o in outcomes {
        *counts.entry(*o).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|(_, n)| 2 * n > outcomes.len())
        .map(|(o, _)| o)
}

/// Tasks with fewer than `raters_per_item` votes are incomplete and excluded.
pub fn aggregate_votes(votes: &[VoteRecord], tasks: &[PairwiseTask], raters_per_item: usize) -> Result<AggregateResult> {
    if raters_per_item == 0 {
        return Err(Error::Parameter("raters_per_item must be positive".into()));
    }
    let index: HashMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id.as_str(), i)).collect();
    if index.len() != tasks.len() {
        return Err(Error::Input("duplicate task id".into()));
    }
    let mut seen = HashSet::new();
    let mut per_task: Vec<Vec<Outcome>> = vec![Vec::new(); tasks.len()];
    for v in votes {
        let &i = index
            .get(v.task_id.as_str())
            .ok_or_else(|| Error::Input(format!("vote for unknown task {}", v.task_id)))?;
        if !seen.insert((v.task_id.as_str(), v.rater_id.as_str())) {
            return Err(Error::Input(format!("duplicate vote by {} on {}", v.rater_id, v.task_id)));
        }
        per_task[i].push(v.choice.outcome(tasks[i].provenance.cmcm_side));
    }
    let mut counts: BTreeMap<Outcome, usize> = Outcome::ALL.iter().map(|o| (*o, 0)).collect();
    let (mut n_no_consensus, mut n_incomplete) = (0, 0);
    let mut indicators = Vec::new();
    for (outcomes, task) in per_task.iter().zip(tasks) {
        if outcomes.len() > raters_per_item {
            return Err(Error::Input(format!(
                "task {} has {} votes, expected {raters_per_item}",
                task.task_id,
                outcomes.len()
            )));
        }
        if outcomes.len() < raters_per_item {
            n_incomplete += 1;
            continue;
        }
        match majority(outcomes) {
            Some(o) => {
                *counts.get_mut(&o).expect("all outcomes present") += 1;
                indicators.push(o.indicator());
            }
            None => n_no_consensus += 1,
        }
    }
    let n_items = indicators.len();
    let percentages = counts
        .iter()
        .map(|(o, &n)| {
            let p = if n_items == 0 { 0.0 } else { 100.0 * n as f64 / n_items as f64 };
            (*o, p)
        })
        .collect();
    Ok(AggregateResult {
        percentages,
        counts,
        n_items,
        n_no_consensus,
        n_incomplete,
        n_tasks: tasks.len(),
        indicators,
    })
}

/// One-sample two-sided t-test of the indicators against mean 0. Zero
/// variance gives an infinite statistic with p = 0.
pub fn preference_significance(indicators: &[f64]) -> Result<(f64, f64)> {
    if indicators.iter().filter(|x| **x != 0.0).count() < 2 {
        return Err(Error::Input("need at least two Better or Worse items".into()));
    }
    let n = indicators.len() as f64;
    let mean = indicators.iter().sum::<f64>() / n;
    let var = indicators.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok((mean.signum() * f64::INFINITY, 0.0));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invariant(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok((t, p))
}

/// First task in order that still needs votes and that `rater` has not rated.
pub fn next_task_for<'a>(
    tasks: &'a [PairwiseTask],
    votes: &[VoteRecord],
    rater: &str,
    raters_per_item: usize,
) -> Option<&'a PairwiseTask> {
    let mut count: HashMap<&str, usize> = HashMap::new();
    let mut mine = HashSet::new();
    for v in votes {
        *count.entry(v.task_id.as_str()).or_default() += 1;
        if v.rater_id == rater {
            mine.insert(v.task_id.as_str());
        }
    }
    tasks.iter().find(|t| {
        let id = t.task_id.as_str();
        !mine.contains(id) && count.get(id).copied().unwrap_or(0) < raters_per_item
    })
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item)?);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: &Path) -> Result<Vec<PairwiseTask>> {
    let tasks: Vec<PairwiseTask> = read_jsonl(path)?;
    let mut ids = HashSet::new();
    for t in &tasks {
        if !ids.insert(t.task_id.as_str()) {
            return Err(Error::Input(format!("duplicate task id {}", t.task_id)));
        }
    }
    Ok(tasks)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AppendOutcome {
    Stored,
    Duplicate,
}

/// Append-only JSONL vote log with (task, rater) uniqueness. Callers sharing
/// a store across threads serialise access to it.
#[derive(Debug)]
pub struct VoteStore {
    path: PathBuf,
    votes: Vec<VoteRecord>,
    keys: HashSet<(String, String)>,
}

impl VoteStore {
    /// Opens or creates the log; a log that already holds a duplicate is rejected.
    pub fn open(path: &Path) -> Result<Self> {
        let votes: Vec<VoteRecord> = if path.exists() { read_jsonl(path)? } else { Vec::new() };
        let mut keys = HashSet::new();
        for v in &votes {
            if !keys.insert((v.task_id.clone(), v.rater_id.clone())) {
                return Err(Error::Input(format!("duplicate vote by {} on {} in {}", v.rater_id, v.task_id, path.display())));
            }
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            votes,
            keys,
        })
    }

    pub fn votes(&self) -> &[VoteRecord] {
        &self.votes
    }

    pub fn contains(&self, task_id: &str, rater_id: &str) -> bool {
        self.keys.contains(&(task_id.to_string(), rater_id.to_string()))
    }

    /// The line reaches the file before the vote is visible in memory.
    pub fn append(&mut self, vote: VoteRecord) -> Result<AppendOutcome> {
        let key = (vote.task_id.clone(), vote.rater_id.clone());
        if self.keys.contains(&key) {
            return Ok(AppendOutcome::Duplicate);
        }
        let mut line = serde_json::to_string(&vote)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))?;
        self.keys.insert(key);
        self.votes.push(vote);
        Ok(AppendOutcome::Stored)
    }

    pub fn export_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for v in &self.votes {
            out.push_str(&serde_json::to_string(v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::seq::SliceRandom;

    fn queries(n: usize) -> (Vec<Top1>, Vec<Top1>, Vec<TaskQuery>) {
        let q: Vec<TaskQuery> = (0..n)
            .map(|i| TaskQuery {
                query_id: format!("q{i}"),
                caption: format!("caption {i}"),
                relations: if i % 2 == 0 { vec!["Story".into()] } else { vec![] },
            })
            .collect();
        let m = (0..n).map(|i| Top1 { query_id: format!("q{i}"), image: format!("m{i}") }).collect();
        let a = (0..n).map(|i| Top1 { query_id: format!("q{i}"), image: format!("a{i}") }).collect();
        (m, a, q)
    }

    fn vote(task: &str, rater: &str, choice: Choice) -> VoteRecord {
        VoteRecord {
            task_id: task.into(),
            rater_id: rater.into(),
            choice,
            timestamp: "2024-01-01T00:00:00Z".into(),
        }
    }

    /// Choice a rater makes to express `o` on `task`.
    fn choice_for(task: &PairwiseTask, o: Outcome) -> Choice {
        let toward = |side: Side| if side == Side::Left { Choice::PreferA } else { Choice::PreferB };
        match o {
            Outcome::Better => toward(task.provenance.cmcm_side),
            Outcome::Worse => toward(task.provenance.cmcm_side.flip()),
            Outcome::BothGood => Choice::Same,
            Outcome::BothBad => Choice::Neither,
        }
    }

    #[test]
    fn thirty_queries_give_thirty_tasks() {
        let (m, a, q) = queries(30);
        let tasks = make_pairwise_tasks(&m, &a, &q, None, 7).unwrap();
        assert_eq!(tasks.len(), 30);
        for (t, i) in tasks.iter().zip(0..) {
            let (mine, other) = match t.provenance.cmcm_side {
                Side::Left => (&t.image_left, &t.image_right),
                Side::Right => (&t.image_right, &t.image_left),
            };
            assert_eq!(mine, &format!("m{i}"));
            assert_eq!(other, &format!("a{i}"));
        }
        let again = make_pairwise_tasks(&m, &a, &q, None, 7).unwrap();
        assert_eq!(tasks, again);
        let sides: Vec<Side> = tasks.iter().map(|t| t.provenance.cmcm_side).collect();
        assert!(sides.contains(&Side::Left) && sides.contains(&Side::Right));
    }

    #[test]
    fn filter_keeps_matching_queries_and_sides() {
        let (m, a, q) = queries(10);
        let all = make_pairwise_tasks(&m, &a, &q, None, 3).unwrap();
        let story = make_pairwise_tasks(&m, &a, &q, Some("Story"), 3).unwrap();
        assert_eq!(story.len(), 5);
        for t in &story {
            let full = all.iter().find(|x| x.query_id == t.query_id).unwrap();
            assert_eq!(full.provenance, t.provenance);
            assert_eq!(t.relation_tag.as_deref(), Some("Story"));
        }
    }

    #[test]
    fn identical_retrievals_still_make_a_task() {
        let (m, _, q) = queries(1);
        let tasks = make_pairwise_tasks(&m, &m, &q, None, 0).unwrap();
        assert_eq!(tasks[0].image_left, tasks[0].image_right);
        let votes: Vec<_> = (0..3).map(|r| vote("task00000", &format!("r{r}"), Choice::Same)).collect();
        let agg = aggregate_votes(&votes, &tasks, 3).unwrap();
        assert_eq!(agg.counts[&Outcome::BothGood], 1);
    }

    #[test]
    fn misaligned_queries_rejected() {
        let (m, a, q) = queries(3);
        assert!(make_pairwise_tasks(&m[..2], &a, &q, None, 0).is_err());
        let mut shuffled = a.clone();
        shuffled.swap(0, 1);
        assert!(make_pairwise_tasks(&m, &shuffled, &q, None, 0).is_err());
    }

    #[test]
    fn majority_cases() {
        let (m, a, q) = queries(3);
        let tasks = make_pairwise_tasks(&m, &a, &q, None, 1).unwrap();
        let t = &tasks[0];
        let mut votes = vec![
            vote(&t.task_id, "x", choice_for(t, Outcome::Better)),
            vote(&t.task_id, "y", choice_for(t, Outcome::Better)),
            vote(&t.task_id, "z", choice_for(t, Outcome::Worse)),
        ];
        let t1 = &tasks[1];
        votes.push(vote(&t1.task_id, "x", Choice::Same));
        votes.push(vote(&t1.task_id, "y", Choice::Same));
        votes.push(vote(&t1.task_id, "z", Choice::Neither));
        let t2 = &tasks[2];
        votes.push(vote(&t2.task_id, "x", Choice::Same));
        votes.push(vote(&t2.task_id, "y", Choice::Neither));
        votes.push(vote(&t2.task_id, "z", choice_for(t2, Outcome::Better)));
        let agg = aggregate_votes(&votes, &tasks, 3).unwrap();
        assert_eq!(agg.counts[&Outcome::Better], 1);
        assert_eq!(agg.counts[&Outcome::BothGood], 1);
        assert_eq!(agg.n_no_consensus, 1);
        assert_eq!(agg.n_items, 2);
        assert_eq!(agg.percentages[&Outcome::Better], 50.0);
        assert_eq!(agg.indicators, vec![1.0, 0.0]);
    }

    #[test]
    fn incomplete_and_duplicate_votes() {
        let (m, a, q) = queries(2);
        let tasks = make_pairwise_tasks(&m, &a, &q, None, 1).unwrap();
        let votes = vec![vote("task00000", "x", Choice::Same), vote("task00000", "y", Choice::Same)];
        let agg = aggregate_votes(&votes, &tasks, 3).unwrap();
        assert_eq!((agg.n_incomplete, agg.n_items), (2, 0));
        assert!(agg.percentages.values().all(|p| *p == 0.0));
        let dup = vec![vote("task00000", "x", Choice::Same), vote("task00000", "x", Choice::Neither)];
        assert!(aggregate_votes(&dup, &tasks, 3).is_err());
        assert!(aggregate_votes(&[vote("nope", "x", Choice::Same)], &tasks, 3).is_err());
    }

    #[test]
    fn choice_wire_names() {
        let names: Vec<String> = Choice::ALL.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
        assert_eq!(names, ["\"prefer_A\"", "\"prefer_B\"", "\"same\"", "\"neither\""]);
        assert!(serde_json::from_str::<Choice>("\"prefer_a\"").is_err());
    }

    #[test]
    fn task_view_hides_provenance() {
        let (m, a, q) = queries(1);
        let t = &make_pairwise_tasks(&m, &a, &q, Some("Story"), 0).unwrap()[0];
        let json = serde_json::to_value(t.view(0, 1)).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["caption", "image_a", "image_b", "progress", "task_id"]);
        assert!(!json.to_string().contains("cmcm"));
    }

    /// Two-sided p-value by Simpson integration of the t density over [|t|, ∞)
    /// via the substitution u = 1/(1+x).
    fn p_value_oracle(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let hi = 1.0 / (1.0 + t.abs());
        let n = 20_000;
        let h = hi / n as f64;
        let g = |u: f64| if u <= 0.0 { 0.0 } else { density(1.0 / u - 1.0) / (u * u) };
        let mut s = g(0.0) + g(hi);
        for i in 1..n {
            s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * s * h / 3.0
    }

    /// Lanczos approximation, g = 7.
    fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn t_test_hand_example() {
        let (t, p) = preference_significance(&[1.0, 1.0, 1.0, 0.0, -1.0]).unwrap();
        let sd = (0.8f64).sqrt();
        assert!((t - 0.4 / (sd / 5f64.sqrt())).abs() < 1e-12);
        assert!((t - 1.0).abs() < 1e-12);
        assert!((p - p_value_oracle(t, 4.0)).abs() < 1e-6);
    }

    #[test]
    fn t_test_sentinels() {
        let (t, p) = preference_significance(&[1.0; 6]).unwrap();
        assert_eq!((t, p), (f64::INFINITY, 0.0));
        let (t, p) = preference_significance(&[-1.0; 3]).unwrap();
        assert_eq!((t, p), (f64::NEG_INFINITY, 0.0));
        let (t, p) = preference_significance(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        assert!(preference_significance(&[1.0, 0.0, 0.0]).is_err());
        assert!(preference_significance(&[]).is_err());
    }

    #[test]
    fn t_test_matches_quadrature_oracle() {
        for (xs, df) in [(vec![1.0, 1.0, -1.0, 1.0, 0.0, 1.0, 1.0, -1.0], 7.0), (vec![1.0, -1.0, -1.0, 0.0, -1.0, 0.0], 5.0)] {
            let (t, p) = preference_significance(&xs).unwrap();
            assert!((p - p_value_oracle(t, df)).abs() < 1e-6, "{p} vs {}", p_value_oracle(t, df));
        }
    }

    #[test]
    fn vote_store_round_trip_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.jsonl");
        let mut store = VoteStore::open(&path).unwrap();
        assert_eq!(store.append(vote("t0", "r", Choice::Same)).unwrap(), AppendOutcome::Stored);
        assert_eq!(store.append(vote("t0", "r", Choice::Neither)).unwrap(), AppendOutcome::Duplicate);
        assert_eq!(store.append(vote("t0", "s", Choice::PreferA)).unwrap(), AppendOutcome::Stored);
        let reopened = VoteStore::open(&path).unwrap();
        assert_eq!(reopened.votes(), store.votes());
        assert!(reopened.contains("t0", "r"));
        assert_eq!(reopened.export_jsonl().unwrap(), fs::read_to_string(&path).unwrap());
        fs::write(&path, store.export_jsonl().unwrap().repeat(2)).unwrap();
        assert!(VoteStore::open(&path).is_err());
    }

    #[test]
    fn task_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let (m, a, q) = queries(4);
        let tasks = make_pairwise_tasks(&m, &a, &q, None, 9).unwrap();
        write_jsonl(&path, &tasks).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), tasks);
        write_jsonl(&path, &[tasks[0].clone(), tasks[0].clone()]).unwrap();
        assert!(read_tasks(&path).is_err());
    }

    #[test]
    fn next_task_order() {
        let (m, a, q) = queries(3);
        let tasks = make_pairwise_tasks(&m, &a, &q, None, 0).unwrap();
        assert_eq!(next_task_for(&tasks, &[], "r", 3).unwrap().task_id, "task00000");
        let votes = vec![vote("task00000", "r", Choice::Same)];
        assert_eq!(next_task_for(&tasks, &votes, "r", 3).unwrap().task_id, "task00001");
        assert_eq!(next_task_for(&tasks, &votes, "s", 3).unwrap().task_id, "task00000");
        let full: Vec<_> = ["a", "b", "c"].iter().map(|r| vote("task00000", r, Choice::Same)).collect();
        assert_eq!(next_task_for(&tasks, &full, "d", 3).unwrap().task_id, "task00001");
        let all: Vec<_> = tasks.iter().map(|t| vote(&t.task_id, "r", Choice::Same)).collect();
        assert!(next_task_for(&tasks, &all, "r", 3).is_none());
    }

    fn arb_outcomes() -> impl proptest::strategy::Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..4, 0..=3), 1..25)
    }

    proptest! {
        #[test]
        fn aggregation_invariants(plan in arb_outcomes(), seed in 0u64..1000, shuffle_seed in 0u64..1000) {
            let (m, a, q) = queries(plan.len());
            let tasks = make_pairwise_tasks(&m, &a, &q, None, seed).unwrap();
            let mut votes = Vec::new();
            for (t, outs) in tasks.iter().zip(&plan) {
                for (r, o) in outs.iter().enumerate() {
                    votes.push(vote(&t.task_id, &format!("r{r}"), choice_for(t, Outcome::ALL[*o as usize])));
                }
            }
            let base = aggregate_votes(&votes, &tasks, 3).unwrap();
            let total: usize = base.counts.values().sum::<usize>() + base.n_no_consensus + base.n_incomplete;
            prop_assert_eq!(total, tasks.len());
            if base.n_items > 0 {
                let sum: f64 = base.percentages.values().sum();
                prop_assert!((sum - 100.0).abs() < 1e-9);
            }

            let mut shuffled = votes.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let permuted = aggregate_votes(&shuffled, &tasks, 3).unwrap();
            prop_assert_eq!(&permuted.counts, &base.counts);
            prop_assert_eq!(permuted.n_no_consensus, base.n_no_consensus);

            let flipped_tasks: Vec<PairwiseTask> = tasks.iter().map(|t| {
                let mut f = t.clone();
                std::mem::swap(&mut f.image_left, &mut f.image_right);
                f.provenance.cmcm_side = t.provenance.cmcm_side.flip();
                f
            }).collect();
            let flipped_votes: Vec<VoteRecord> = votes.iter().map(|v| VoteRecord { choice: v.choice.mirrored(), ..v.clone() }).collect();
            let flipped = aggregate_votes(&flipped_votes, &flipped_tasks, 3).unwrap();
            prop_assert_eq!(flipped, base);
        }
    }
}

//! Full-corpus leave-one-out ranking metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::EvalRow;
use crate::error::{Error, Result};
use crate::model::SequentialModel;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub split: EvalSplit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoffs: vec![5, 10, 20],
            split: EvalSplit::Test,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() {
            return Err(Error::config("eval.cutoffs", "needs at least one cutoff"));
        }
        if self.cutoffs.contains(&0) {
            return Err(Error::config("eval.cutoffs", "every cutoff must be >= 1"));
        }
        Ok(())
    }
}

/// Anything that scores the whole item corpus for a batch of histories.
pub trait Recommender {
    fn num_items(&self) -> usize;

    /// One row of `num_items()` scores per input sequence.
    fn score_sequences(&self, inputs: &[&[usize]]) -> Result<Tensor>;
}

impl Recommender for SequentialModel {
    fn num_items(&self) -> usize {
        self.vocab()
    }

    fn score_sequences(&self, inputs: &[&[usize]]) -> Result<Tensor> {
        let max_len = self.config().max_len;
        let truncated: Vec<&[usize]> = inputs.iter().map(|s| &s[s.len().saturating_sub(max_len)..]).collect();
        let users = self.encode_batch(&truncated)?;
        self.score_all(&users)
    }
}

/// Restricts a recommender to item ids `0..num_items`, e.g. a model trained
/// on a merged vocabulary evaluated on the target catalog only.
pub struct Restricted<'a, R: ?Sized> {
    pub inner: &'a R,
    pub num_items: usize,
}

impl<R: Recommender + ?Sized> Recommender for Restricted<'_, R> {
    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_sequences(&self, inputs: &[&[usize]]) -> Result<Tensor> {
        let full = self.inner.score_sequences(inputs)?;
        if full.cols() < self.num_items {
            return Err(Error::Shape(format!(
                "cannot restrict {} scored items to {}",
                full.cols(),
                self.num_items
            )));
        }
        let data = (0..full.rows())
            .flat_map(|r| full.row(r)[..self.num_items].iter().copied())
            .collect();
        Tensor::new(vec![full.rows(), self.num_items], data)
    }
}

/// Rank of `target` among all items except those in `history` (the target
/// itself always stays a candidate). Every other candidate scoring at least
/// as high as the target counts against it.
pub fn rank_target(scores: &[f64], history: &[usize], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::invalid(format!(
            "target item {target} outside vocabulary of {}",
            scores.len()
        )));
    }
    let mut excluded = vec![false; scores.len()];
    for &i in history {
        if i < excluded.len() {
            excluded[i] = true;
        }
    }
    excluded[target] = false;
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && !excluded[j] && s >= t)
        .count();
    Ok(1 + ahead)
}

/// `(recall, ndcg)` of a single relevant item at `rank`.
pub fn metrics_at_k(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
}

impl MetricReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.cutoffs.iter().position(|&c| c == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|i| self.ndcg[i])
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (i, k) in self.cutoffs.iter().enumerate() {
            map.insert(format!("recall@{k}"), Value::from(self.recall[i]));
            map.insert(format!("ndcg@{k}"), Value::from(self.ndcg[i]));
        }
        map.insert("users".to_string(), Value::from(self.users));
        Value::Object(map)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>6}  {:>10}  {:>10}", "K", "Recall@K", "NDCG@K");
        for (i, k) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(out, "{k:>6}  {:>10.6}  {:>10.6}", self.recall[i], self.ndcg[i]);
        }
        let _ = writeln!(out, "users: {}", self.users);
        out
    }
}

const EVAL_CHUNK: usize = 256;

/// Mean Recall@K and NDCG@K over `rows`, scoring the full corpus.
pub fn evaluate<R: Recommender + ?Sized>(model: &R, rows: &[EvalRow], cutoffs: &[usize]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    if cutoffs.first() == Some(&0) || cutoffs.is_empty() {
        return Err(Error::invalid("cutoffs must be >= 1"));
    }
    let mut recall = vec![0.0; cutoffs.len()];
    let mut ndcg = vec![0.0; cutoffs.len()];
    for chunk in rows.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|r| r.input.as_slice()).collect();
        let scores = model.score_sequences(&inputs)?;
        for (i, row) in chunk.iter().enumerate() {
            let rank = rank_target(scores.row(i), &row.input, row.target)?;
            for (c, &k) in cutoffs.iter().enumerate() {
                let (r, n) = metrics_at_k(rank, k);
                recall[c] += r;
                ndcg[c] += n;
            }
        }
    }
    let n = rows.len() as f64;
    Ok(MetricReport {
        recall: recall.into_iter().map(|v| v / n).collect(),
        ndcg: ndcg.into_iter().map(|v| v / n).collect(),
        cutoffs,
        users: rows.len(),
    })
}

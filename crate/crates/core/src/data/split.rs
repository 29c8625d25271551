use super::InteractionDataset;
use crate::error::{Error, Result};

/// Minimum sequence length for a user to get validation and test rows.
pub const MIN_SPLIT_LEN: usize = 3;

/// One held-out next-item prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRow {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
}

/// Leave-one-out split: the last item of each eligible user is the test
/// target, the second-to-last the validation target, and the rest is train.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Per-user training prefix, indexed by user id.
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<EvalRow>,
    pub test: Vec<EvalRow>,
}

impl SplitDataset {
    /// Full chronological sequence of every user, reassembled from the split.
    pub fn full_sequences(&self) -> Vec<Vec<usize>> {
        let mut seqs = self.train.clone();
        for row in &self.test {
            seqs[row.user] = row.input.iter().copied().chain([row.target]).collect();
        }
        seqs
    }

    pub fn train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

pub fn leave_one_out_split(ds: &InteractionDataset) -> SplitDataset {
    let mut train = Vec::with_capacity(ds.num_users());
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (user, seq) in ds.sequences().iter().enumerate() {
        let n = seq.len();
        if n >= MIN_SPLIT_LEN {
            test.push(EvalRow {
                user,
                input: seq[..n - 1].to_vec(),
                target: seq[n - 1],
            });
            valid.push(EvalRow {
                user,
                input: seq[..n - 2].to_vec(),
                target: seq[n - 2],
            });
            train.push(seq[..n - 2].to_vec());
        } else {
            train.push(seq.clone());
        }
    }
    SplitDataset {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        train,
        valid,
        test,
    }
}

/// Per-item interaction counts and their max-normalized popularity.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    pub pop: Vec<f64>,
}

impl PopularityTable {
    /// Popularity of `item`; ids outside the table count as unseen.
    pub fn pop(&self, item: usize) -> f64 {
        self.pop.get(item).copied().unwrap_or(0.0)
    }
}

/// Popularity from training sequences only: `count(v) / max count`.
pub fn popularity_table(train: &[Vec<usize>], num_items: usize) -> Result<PopularityTable> {
    let mut counts = vec![0u64; num_items];
    for &item in train.iter().flatten() {
        if item >= num_items {
            return Err(Error::invalid(format!(
                "item id {item} outside vocabulary of {num_items}"
            )));
        }
        counts[item] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::invalid("popularity needs at least one interaction"));
    }
    let pop = counts.iter().map(|&c| c as f64 / max as f64).collect();
    Ok(PopularityTable { counts, pop })
}

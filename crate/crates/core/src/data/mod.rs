//! Interaction logs, chronological user sequences, leave-one-out splits and
//! popularity statistics.

mod split;
mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use split::{leave_one_out_split, popularity_table, EvalRow, PopularityTable, SplitDataset};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticDomain, SyntheticSpec};

use crate::error::{Error, Result};

/// Item names mapped to dense ids, shared across datasets that must agree
/// on item identity (e.g. a target domain and its source domains).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_or_insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }
}

/// Users, items and per-user chronological item sequences of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub domain: String,
    users: Vec<String>,
    items: ItemVocab,
    sequences: Vec<Vec<usize>>,
    timestamps: Vec<Vec<i64>>,
}

impl InteractionDataset {
    /// Builds a dataset from per-user `(item name, timestamp)` histories,
    /// which must already be chronological.
    pub fn from_histories(
        domain: &str,
        histories: Vec<(String, Vec<(String, i64)>)>,
        mut items: ItemVocab,
    ) -> Result<Self> {
        let mut users = Vec::with_capacity(histories.len());
        let mut sequences = Vec::with_capacity(histories.len());
        let mut timestamps = Vec::with_capacity(histories.len());
        for (user, history) in histories {
            if history.is_empty() {
                return Err(Error::invalid(format!("user `{user}` has no interactions")));
            }
            if history.windows(2).any(|w| w[0].1 > w[1].1) {
                return Err(Error::invalid(format!("user `{user}` history is not chronological")));
            }
            sequences.push(history.iter().map(|(i, _)| items.id_or_insert(i)).collect());
            timestamps.push(history.iter().map(|(_, t)| *t).collect());
            users.push(user);
        }
        Ok(InteractionDataset {
            domain: domain.to_string(),
            users,
            items,
            sequences,
            timestamps,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Size of the item vocabulary this dataset indexes into.
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn vocab(&self) -> &ItemVocab {
        &self.items
    }

    pub fn user_name(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    pub fn timestamps(&self, user: usize) -> &[i64] {
        &self.timestamps[user]
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Loads a tab-separated `user<TAB>item<TAB>timestamp` file with a fresh
/// item vocabulary.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    load_interactions_with(path, ItemVocab::new())
}

/// Loads an interaction file, extending `vocab` with unseen item names.
///
/// Users and new items get dense ids in order of first appearance. Each
/// user's interactions are sorted by timestamp with ties kept in file order.
pub fn load_interactions_with(path: impl AsRef<Path>, vocab: ItemVocab) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut histories: Vec<(String, Vec<(String, i64)>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (user, item, ts) = (fields[0], fields[1], fields[2]);
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(line_no, "empty user or item id".to_string()));
        }
        let ts: i64 = ts
            .trim_end_matches('\r')
            .parse()
            .map_err(|_| parse_err(line_no, format!("timestamp `{ts}` is not a base-10 integer")))?;
        let u = *user_index.entry(user).or_insert_with(|| {
            histories.push((user.to_string(), Vec::new()));
            histories.len() - 1
        });
        histories[u].1.push((item.to_string(), ts));
    }
    if histories.is_empty() {
        return Err(Error::format(path, "no interactions in file"));
    }

    // Items take ids in order of first appearance in the file, not in
    // chronological order, so register them before sorting.
    let mut vocab = vocab;
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if let Some(item) = line.split('\t').nth(1) {
            vocab.id_or_insert(item);
        }
    }
    for (_, history) in &mut histories {
        history.sort_by_key(|(_, t)| *t);
    }
    let domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    InteractionDataset::from_histories(&domain, histories, vocab)
}

/// Writes a dataset in the interaction file format, users in id order and
/// each user's interactions chronologically.
pub fn write_interactions(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_interactions(ds)).map_err(|e| Error::io(path, e))
}

pub(crate) fn render_interactions(ds: &InteractionDataset) -> String {
    let mut out = String::with_capacity(ds.num_interactions() * 24);
    for (u, seq) in ds.sequences.iter().enumerate() {
        for (item, ts) in seq.iter().zip(&ds.timestamps[u]) {
            let _ = writeln!(out, "{}\t{}\t{}", ds.users[u], ds.items.name(*item), ts);
        }
    }
    out
}

//! Teachers as uniform score oracles: frozen in-framework models or
//! precomputed score matrices, grouped into a weighted panel.

mod pretrain;
mod scores;

use std::path::Path;

pub use pretrain::{pretrain_teacher, PretrainSettings, Pretrained};
pub use scores::ScoreMatrix;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::SequentialModel;
use crate::numerics::{Graph, Tensor};

/// The history a teacher sees for a user: the training sequence minus its
/// final item, which is the user's training target. Single-item sequences
/// are used whole.
pub fn teacher_history(train_seq: &[usize]) -> &[usize] {
    if train_seq.len() >= 2 {
        &train_seq[..train_seq.len() - 1]
    } else {
        train_seq
    }
}

/// One user's query: the user id (for file teachers) and their history (for
/// model teachers).
#[derive(Clone, Copy, Debug)]
pub struct TeacherQuery<'a> {
    pub user: usize,
    pub history: &'a [usize],
}

#[derive(Clone, Debug)]
pub enum Teacher {
    /// A frozen model; queries truncate histories to its own `max_len`.
    Model(SequentialModel),
    Scores(ScoreMatrix),
}

impl Teacher {
    pub fn open_scores(path: impl AsRef<Path>) -> Result<Self> {
        ScoreMatrix::open(path).map(Teacher::Scores)
    }

    /// Raw scores, one row per query and one column per candidate.
    pub fn batch_scores(&self, queries: &[TeacherQuery<'_>], candidates: &[usize]) -> Result<Tensor> {
        if candidates.is_empty() {
            return Err(Error::invalid("teacher queried with no candidates"));
        }
        if queries.is_empty() {
            return Err(Error::invalid("teacher queried with no users"));
        }
        match self {
            Teacher::Scores(m) => {
                let mut data = Vec::with_capacity(queries.len() * candidates.len());
                for q in queries {
                    data.extend(m.lookup(q.user, candidates)?);
                }
                Tensor::new(vec![queries.len(), candidates.len()], data)
            }
            Teacher::Model(model) => {
                let max_len = model.config().max_len;
                let histories: Vec<&[usize]> = queries
                    .iter()
                    .map(|q| &q.history[q.history.len().saturating_sub(max_len)..])
                    .collect();
                let users = model.encode_batch(&histories)?;
                if let Some(&bad) = candidates.iter().find(|&&j| j >= model.vocab()) {
                    return Err(Error::invalid(format!(
                        "candidate {bad} outside teacher vocabulary of {}",
                        model.vocab()
                    )));
                }
                let mut g = Graph::new();
                let table = g.input(model.item_embeddings().clone());
                let items = g.gather(table, candidates)?;
                let u = g.input(users);
                let s = g.matmul_nt(u, items)?;
                Ok(g.value(s).clone())
            }
        }
    }

    /// Checks that the teacher can answer queries for `num_users` users over
    /// target item ids `0..num_items`.
    pub fn check_compatible(&self, num_users: usize, num_items: usize) -> Result<()> {
        match self {
            Teacher::Model(m) if m.vocab() < num_items => Err(Error::invalid(format!(
                "teacher vocabulary of {} items does not cover the {num_items} target items",
                m.vocab()
            ))),
            Teacher::Scores(s) if s.num_items() != num_items || s.num_users() != num_users => {
                Err(Error::invalid(format!(
                    "score matrix is {}x{}, dataset has {num_users} users and {num_items} items",
                    s.num_users(),
                    s.num_items()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Raw scores of one teacher for one user's candidates.
pub fn teacher_scores(teacher: &Teacher, query: TeacherQuery<'_>, candidates: &[usize]) -> Result<Vec<f64>> {
    Ok(teacher.batch_scores(&[query], candidates)?.into_data())
}

/// Tolerance on the base weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Ordered teachers with base weights summing to one.
#[derive(Clone, Debug)]
pub struct TeacherPanel {
    teachers: Vec<Teacher>,
    weights: Vec<f64>,
}

impl TeacherPanel {
    pub fn new(teachers: Vec<Teacher>, weights: Vec<f64>) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::invalid("a teacher panel needs at least one teacher"));
        }
        if weights.len() != teachers.len() {
            return Err(Error::invalid(format!(
                "{} teachers but {} weights",
                teachers.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("teacher weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("teacher weights sum to {total}, not 1")));
        }
        Ok(TeacherPanel { teachers, weights })
    }

    pub fn uniform(teachers: Vec<Teacher>) -> Result<Self> {
        let k = teachers.len().max(1);
        TeacherPanel::new(teachers, vec![1.0 / k as f64; k])
    }

    /// Normalizes arbitrary non-negative strengths into base weights.
    pub fn with_strengths(teachers: Vec<Teacher>, strengths: &[f64]) -> Result<Self> {
        let total: f64 = strengths.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("teacher weights must have a positive finite sum"));
        }
        let mut weights: Vec<f64> = strengths.iter().map(|s| s / total).collect();
        // Push the rounding residue onto the largest weight.
        let residue = 1.0 - weights.iter().sum::<f64>();
        if let Some(max) = weights.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *max += residue;
        }
        TeacherPanel::new(teachers, weights)
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn check_compatible(&self, num_users: usize, num_items: usize) -> Result<()> {
        for (k, t) in self.teachers.iter().enumerate() {
            t.check_compatible(num_users, num_items)
                .map_err(|e| Error::invalid(format!("teacher {k}: {e}")))?;
        }
        Ok(())
    }

    /// Raw score tensors of every teacher, in panel order.
    pub fn batch_scores(&self, queries: &[TeacherQuery<'_>], candidates: &[usize]) -> Result<Vec<Tensor>> {
        self.teachers.iter().map(|t| t.batch_scores(queries, candidates)).collect()
    }
}

const EXPORT_CHUNK: usize = 256;

/// Scores every user of `data` over target items `0..data.num_items` with a
/// frozen model and writes the matrix to `path`.
pub fn export_score_matrix(model: &SequentialModel, data: &SplitDataset, path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let teacher = Teacher::Model(model.clone());
    teacher.check_compatible(data.num_users, data.num_items)?;
    let candidates: Vec<usize> = (0..data.num_items).collect();
    let mut values = Vec::with_capacity(data.num_users * data.num_items);
    let users: Vec<usize> = (0..data.num_users).collect();
    for chunk in users.chunks(EXPORT_CHUNK) {
        let queries: Vec<TeacherQuery<'_>> = chunk
            .iter()
            .map(|&u| TeacherQuery { user: u, history: teacher_history(&data.train[u]) })
            .collect();
        let scores = teacher.batch_scores(&queries, &candidates)?;
        values.extend(scores.data().iter().map(|&v| v as f32));
    }
    let matrix = ScoreMatrix::new(data.num_users, data.num_items, values)?;
    matrix.write(path)?;
    Ok(matrix)
}

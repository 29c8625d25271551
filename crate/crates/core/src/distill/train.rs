use std::fmt::Write as _;

use log::info;

use super::{supervision_row, DistillationConfig, KdCandidates, KlDirection};
use crate::curriculum::{build_plan, CurriculumConfig};
use crate::data::{popularity_table, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{Mode, SequentialModel};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::optim::{descend, Adam, OptimConfig};
use crate::seeding::{stream, Stream};
use crate::teacher::{teacher_history, TeacherPanel, TeacherQuery};

/// A user's fixed training pair: the training sequence minus its last item,
/// and that last item. Users with fewer than two training items have none.
pub fn training_pair(train_seq: &[usize]) -> Option<(&[usize], usize)> {
    match train_seq {
        [.., last] if train_seq.len() >= 2 => Some((&train_seq[..train_seq.len() - 1], *last)),
        _ => None,
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Curriculum stage, 0 once sampling is uniform.
    pub stage: usize,
    /// Mean per-sample cross-entropy.
    pub ce: f64,
    /// Mean per-sample distillation loss (0 without teachers).
    pub kd: f64,
    pub valid_recall: f64,
    pub valid_ndcg: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.stage, self.ce, self.kd, self.valid_recall, self.valid_ndcg
        )
    }
}

pub fn render_log(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

pub struct DistillOutcome {
    /// The student from the epoch with the best validation NDCG@10.
    pub model: SequentialModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Per-batch `(ce, kd)` sums in training order.
    pub batch_losses: Vec<(f64, f64)>,
}

/// Raw scores of every teacher for every user over all target items. The
/// teacher input of a user never changes across epochs, so each teacher is
/// queried once up front.
fn teacher_tables(panel: &TeacherPanel, data: &SplitDataset) -> Result<Vec<Tensor>> {
    let candidates: Vec<usize> = (0..data.num_items).collect();
    let users: Vec<usize> = (0..data.num_users).collect();
    let mut tables = Vec::with_capacity(panel.len());
    for teacher in panel.teachers() {
        let mut values = Vec::with_capacity(data.num_users * data.num_items);
        for chunk in users.chunks(256) {
            let queries: Vec<TeacherQuery<'_>> = chunk
                .iter()
                .map(|&u| TeacherQuery { user: u, history: teacher_history(&data.train[u]) })
                .collect();
            values.extend_from_slice(teacher.batch_scores(&queries, &candidates)?.data());
        }
        tables.push(Tensor::new(vec![data.num_users, data.num_items], values)?);
    }
    Ok(tables)
}

struct BatchGraph {
    graph: Graph,
    params: Vec<NodeId>,
    ce: NodeId,
    kd: Option<NodeId>,
    loss: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn record_batch(
    student: &SequentialModel,
    data: &SplitDataset,
    users: &[usize],
    panel: Option<(&TeacherPanel, &[Tensor])>,
    config: &DistillationConfig,
    dropout: &mut rand_chacha::ChaCha8Rng,
) -> Result<BatchGraph> {
    let max_len = student.config().max_len;
    let pairs: Vec<(&[usize], usize)> = users
        .iter()
        .map(|&u| training_pair(&data.train[u]).expect("sampled users have a training pair"))
        .collect();
    let inputs: Vec<&[usize]> = pairs.iter().map(|(h, _)| &h[h.len().saturating_sub(max_len)..]).collect();

    // Distinct positives in order of first appearance form the candidate set.
    let mut candidates = Vec::new();
    let mut column = vec![usize::MAX; data.num_items];
    for &(_, target) in &pairs {
        if column[target] == usize::MAX {
            column[target] = candidates.len();
            candidates.push(target);
        }
    }
    let b = users.len();
    let c = candidates.len();

    let mut graph = Graph::new();
    let fwd = student.forward(&mut graph, &inputs, Mode::Train(dropout))?;
    let items = graph.gather(fwd.item_table, &candidates)?;
    let logits = graph.matmul_nt(fwd.users, items)?;
    let logp = graph.log_softmax(logits)?;
    let mut onehot = vec![0.0; b * c];
    for (i, &(_, target)) in pairs.iter().enumerate() {
        onehot[i * c + column[target]] = -1.0;
    }
    let onehot = graph.input(Tensor::new(vec![b, c], onehot)?);
    let picked = graph.mul(logp, onehot)?;
    let ce = graph.sum(picked)?;

    let kd = match panel {
        None => None,
        Some((panel, tables)) => {
            // Candidate universe of the distillation term.
            let (kd_items, kd_logp, width) = match config.kd_candidates {
                KdCandidates::InBatch => (candidates.clone(), logp, c),
                KdCandidates::FullCorpus => {
                    let all: Vec<usize> = (0..data.num_items).collect();
                    let full = graph.gather(fwd.item_table, &all)?;
                    let full_logits = graph.matmul_nt(fwd.users, full)?;
                    (all, graph.log_softmax(full_logits)?, data.num_items)
                }
            };
            let mut log_q = Vec::with_capacity(b * width);
            let mut q_all = Vec::with_capacity(b * width);
            for &u in users {
                let raw: Vec<Vec<f64>> = tables
                    .iter()
                    .map(|t| kd_items.iter().map(|&j| t.row(u)[j]).collect())
                    .collect();
                let (_, q) = supervision_row(&raw, panel.weights(), config)?;
                log_q.extend(q.iter().map(|v| v.max(super::Q_FLOOR).ln()));
                q_all.extend(q);
            }
            let log_q = graph.input(Tensor::new(vec![b, width], log_q)?);
            let kd = match config.kl_direction {
                KlDirection::StudentTeacher => {
                    let p = graph.exp(kd_logp)?;
                    let diff = graph.sub(kd_logp, log_q)?;
                    let terms = graph.mul(p, diff)?;
                    graph.sum(terms)?
                }
                KlDirection::TeacherStudent => {
                    let q = graph.input(Tensor::new(vec![b, width], q_all)?);
                    let diff = graph.sub(log_q, kd_logp)?;
                    let terms = graph.mul(q, diff)?;
                    graph.sum(terms)?
                }
            };
            Some(kd)
        }
    };

    let loss = match kd {
        Some(kd) if config.kd_weight != 0.0 => {
            let weighted = graph.scale(kd, config.kd_weight)?;
            graph.add(ce, weighted)?
        }
        _ => ce,
    };
    Ok(BatchGraph {
        graph,
        params: fwd.params,
        ce,
        kd,
        loss,
    })
}

/// The recorded training loss of one batch of `users`, exactly as
/// `distill_train` builds it: returns the graph and its `(ce, kd, loss)`
/// nodes. Dropout masks are drawn from `dropout`.
pub fn batch_loss_graph(
    student: &SequentialModel,
    panel: Option<&TeacherPanel>,
    data: &SplitDataset,
    users: &[usize],
    config: &DistillationConfig,
    dropout: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Graph, NodeId, Option<NodeId>, NodeId)> {
    config.validate()?;
    if let Some(&u) = users.iter().find(|&&u| data.train.get(u).and_then(|s| training_pair(s)).is_none()) {
        return Err(Error::invalid(format!("user {u} has no training pair")));
    }
    let tables = match panel {
        Some(p) => {
            p.check_compatible(data.num_users, data.num_items)?;
            teacher_tables(p, data)?
        }
        None => Vec::new(),
    };
    let bg = record_batch(student, data, users, panel.map(|p| (p, tables.as_slice())), config, dropout)?;
    Ok((bg.graph, bg.ce, bg.kd, bg.loss))
}

/// Trains `student` on the target training split with curriculum-ordered
/// batches and, when a panel is given, the blended teacher supervision.
///
/// Runs the curriculum stages first, then uniform epochs until validation
/// NDCG@10 has not improved for `optim.patience` consecutive post-curriculum
/// epochs or `optim.epochs` is reached. Deterministic given `seed`.
pub fn distill_train(
    student: SequentialModel,
    panel: Option<&TeacherPanel>,
    data: &SplitDataset,
    dconf: &DistillationConfig,
    cconf: &CurriculumConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<DistillOutcome> {
    dconf.validate()?;
    cconf.validate()?;
    optim.validate_as("optim.")?;
    if student.vocab() != data.num_items {
        return Err(Error::invalid(format!(
            "student vocabulary {} differs from the dataset's {} items",
            student.vocab(),
            data.num_items
        )));
    }
    if let Some(p) = panel {
        p.check_compatible(data.num_users, data.num_items)?;
    }
    let samples: Vec<(usize, &[usize])> = data
        .train
        .iter()
        .enumerate()
        .filter(|(_, s)| training_pair(s).is_some())
        .map(|(u, s)| (u, s.as_slice()))
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid("no user has a training pair (needs >= 2 training items)"));
    }
    let pop = popularity_table(&data.train, data.num_items)?;
    let plan = build_plan(samples.iter().copied(), &pop, cconf)?;
    let tables = match panel {
        Some(p) => teacher_tables(p, data)?,
        None => Vec::new(),
    };

    let mut student = student;
    let mut adam = Adam::new(optim, student.params());
    let mut shuffle = stream(seed, Stream::Shuffle);
    let mut dropout = stream(seed, Stream::Dropout);
    let curriculum_epochs = cconf.curriculum_epochs();

    let mut log = Vec::new();
    let mut batch_losses = Vec::new();
    let mut best: Option<(f64, usize, SequentialModel)> = None;
    let mut stale = 0;
    for epoch in 0..optim.epochs {
        let (stage, order) = plan.epoch_samples(cconf, epoch, &mut shuffle);
        let (mut ce_sum, mut kd_sum) = (0.0, 0.0);
        for batch in order.chunks(dconf.batch_size) {
            let bg = record_batch(
                &student,
                data,
                batch,
                panel.map(|p| (p, tables.as_slice())),
                dconf,
                &mut dropout,
            )?;
            let ce = bg.graph.value(bg.ce).item();
            let kd = bg.kd.map_or(0.0, |k| bg.graph.value(k).item());
            ce_sum += ce;
            kd_sum += kd;
            batch_losses.push((ce, kd));
            descend(&mut adam, &mut student, &bg.graph, &bg.params, bg.loss)?;
        }
        let n = order.len().max(1) as f64;
        let (valid_recall, valid_ndcg) = if data.valid.is_empty() {
            (0.0, 0.0)
        } else {
            let report = evaluate(&student, &data.valid, &[10])?;
            (report.recall[0], report.ndcg[0])
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            stage,
            ce: ce_sum / n,
            kd: kd_sum / n,
            valid_recall,
            valid_ndcg,
        };
        info!("{}", record.to_line());
        log.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| valid_ndcg > *b) {
            best = Some((valid_ndcg, epoch + 1, student.clone()));
            stale = 0;
        } else if epoch >= curriculum_epochs {
            stale += 1;
            if stale >= optim.patience {
                break;
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (student, 0),
    };
    Ok(DistillOutcome {
        model,
        log,
        best_epoch,
        batch_losses,
    })
}

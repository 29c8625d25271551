use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Restricted};
use crate::model::{init_model, Mode, ModelConfig, SequentialModel};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::optim::{descend, Adam, OptimConfig};
use crate::seeding::{init_seed, stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    /// Epochs over the source-domain sequences before target tuning.
    pub source_epochs: usize,
    pub batch_size: usize,
    /// Target-phase budget, patience and optimizer settings.
    pub optim: OptimConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            source_epochs: 10,
            batch_size: 512,
            optim: OptimConfig::default(),
        }
    }
}

pub struct Pretrained {
    pub model: SequentialModel,
    /// Mean per-position training loss of every epoch, source phase first.
    pub epoch_losses: Vec<f64>,
    /// Target validation NDCG@10 after each target epoch.
    pub valid_ndcg: Vec<f64>,
}

/// Splits the last `max_len + 1` items of `seq` into model input and the
/// next-item label of every input position.
fn window(seq: &[usize], max_len: usize) -> (&[usize], &[usize]) {
    let w = &seq[seq.len().saturating_sub(max_len + 1)..];
    (&w[..w.len() - 1], &w[1..])
}

/// Next-item cross-entropy at every position, each softmax taken over the
/// distinct labels of the batch. Returns the mean loss node and the
/// parameter nodes.
fn all_positions_loss(
    model: &SequentialModel,
    graph: &mut Graph,
    batch: &[&[usize]],
    mode: Mode<'_>,
) -> Result<(NodeId, Vec<NodeId>, usize)> {
    let max_len = model.config().max_len;
    let (inputs, labels): (Vec<&[usize]>, Vec<&[usize]>) = batch.iter().map(|s| window(s, max_len)).unzip();
    let fwd = model.forward(graph, &inputs, mode)?;

    let mut candidates: Vec<usize> = Vec::new();
    let mut column = vec![usize::MAX; model.vocab()];
    for &l in labels.iter().flat_map(|l| l.iter()) {
        if column[l] == usize::MAX {
            column[l] = candidates.len();
            candidates.push(l);
        }
    }
    let positions: usize = labels.iter().map(|l| l.len()).sum();
    let mut pick = vec![0.0; positions * candidates.len()];
    for (row, &l) in labels.iter().flat_map(|l| l.iter()).enumerate() {
        pick[row * candidates.len() + column[l]] = -1.0 / positions as f64;
    }
    let items = graph.gather(fwd.item_table, &candidates)?;
    let logits = graph.matmul_nt(fwd.hidden, items)?;
    let logp = graph.log_softmax(logits)?;
    let pick = graph.input(Tensor::new(vec![positions, candidates.len()], pick)?);
    let picked = graph.mul(logp, pick)?;
    let loss = graph.sum(picked)?;
    Ok((loss, fwd.params, positions))
}

fn run_epoch(
    model: &mut SequentialModel,
    adam: &mut Adam,
    seqs: &[&[usize]],
    batch_size: usize,
    shuffle: &mut rand_chacha::ChaCha8Rng,
    dropout: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(shuffle);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i]).collect();
        let mut g = Graph::new();
        let (loss, params, positions) = all_positions_loss(model, &mut g, &batch, Mode::Train(dropout))?;
        total += g.value(loss).item() * positions as f64;
        count += positions;
        descend(adam, model, &g, &params, loss)?;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains a teacher on source-domain sequences, then tunes it on the target
/// training split with early stopping on target validation NDCG@10. The
/// model's vocabulary is `vocab`, which must include the target items as ids
/// `0..target.num_items`. Returns the best-validation model.
pub fn pretrain_teacher(
    config: &ModelConfig,
    vocab: usize,
    sources: &[Vec<usize>],
    target: &SplitDataset,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<Pretrained> {
    settings.optim.validate_as("teacher.optim.")?;
    if settings.batch_size == 0 {
        return Err(Error::config("teacher.batch_size", "must be >= 1"));
    }
    if vocab < target.num_items {
        return Err(Error::invalid("teacher vocabulary must cover the target items"));
    }
    let source_seqs: Vec<&[usize]> = sources.iter().filter(|s| s.len() >= 2).map(Vec::as_slice).collect();
    let target_seqs: Vec<&[usize]> = target.train.iter().filter(|s| s.len() >= 2).map(Vec::as_slice).collect();
    if source_seqs.is_empty() && target_seqs.is_empty() {
        return Err(Error::invalid("teacher pre-training needs at least one sequence of length >= 2"));
    }

    let mut model = init_model(config, vocab, init_seed(seed))?;
    let mut adam = Adam::new(&settings.optim, model.params());
    let mut shuffle = stream(seed, Stream::Shuffle);
    let mut dropout = stream(seed, Stream::Dropout);
    let mut epoch_losses = Vec::new();

    if !source_seqs.is_empty() {
        for epoch in 0..settings.source_epochs {
            let loss = run_epoch(&mut model, &mut adam, &source_seqs, settings.batch_size, &mut shuffle, &mut dropout)?;
            info!("teacher source epoch {epoch}: loss {loss:.6}");
            epoch_losses.push(loss);
        }
    }

    let restricted_ndcg = |m: &SequentialModel| -> Result<Option<f64>> {
        if target.valid.is_empty() {
            return Ok(None);
        }
        let r = Restricted { inner: m, num_items: target.num_items };
        Ok(evaluate(&r, &target.valid, &[10])?.ndcg_at(10))
    };
    let mut best = (restricted_ndcg(&model)?.unwrap_or(f64::NEG_INFINITY), model.clone());
    let mut valid_ndcg = Vec::new();
    let mut stale = 0;
    if !target_seqs.is_empty() {
        for epoch in 0..settings.optim.epochs {
            let loss = run_epoch(&mut model, &mut adam, &target_seqs, settings.batch_size, &mut shuffle, &mut dropout)?;
            epoch_losses.push(loss);
            let Some(ndcg) = restricted_ndcg(&model)? else {
                best.1 = model.clone();
                continue;
            };
            info!("teacher target epoch {epoch}: loss {loss:.6} valid ndcg@10 {ndcg:.6}");
            valid_ndcg.push(ndcg);
            if ndcg > best.0 {
                best = (ndcg, model.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= settings.optim.patience {
                    break;
                }
            }
        }
    } else {
        best.1 = model;
    }
    Ok(Pretrained {
        model: best.1,
        epoch_losses,
        valid_ndcg,
    })
}

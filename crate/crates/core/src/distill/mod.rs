//! Multi-teacher distillation: per-teacher in-batch score distributions,
//! consistency-aware teacher weighting, blended supervision and the joint
//! cross-entropy + KL objective.

mod train;

use serde::{Deserialize, Serialize};

pub use train::{batch_loss_graph, distill_train, render_log, training_pair, DistillOutcome, EpochRecord};

use crate::error::{Error, Result};
use crate::numerics::softmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Consistency,
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdCandidates {
    #[default]
    InBatch,
    FullCorpus,
}

/// Which way the KL term points. `StudentTeacher` is `Σ p log(p/q)`, the
/// default; `TeacherStudent` is the conventional `Σ q log(q/p)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    StudentTeacher,
    TeacherStudent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub temperature: f64,
    pub kd_weight: f64,
    /// Disagreement threshold below which no teacher is excluded.
    pub epsilon: f64,
    pub weight_mode: WeightMode,
    pub kd_candidates: KdCandidates,
    pub batch_size: usize,
    pub kl_direction: KlDirection,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig {
            temperature: 0.2,
            kd_weight: 1.0,
            epsilon: 0.05,
            weight_mode: WeightMode::Consistency,
            kd_candidates: KdCandidates::InBatch,
            batch_size: 512,
            kl_direction: KlDirection::StudentTeacher,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(
                "distill.temperature",
                format!("must be finite and > 0, got {}", self.temperature),
            ));
        }
        if !(self.kd_weight >= 0.0) || !self.kd_weight.is_finite() {
            return Err(Error::config("distill.kd_weight", format!("must be finite and >= 0, got {}", self.kd_weight)));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("distill.epsilon", format!("must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("distill.batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Floor applied to supervision probabilities before taking logs.
pub const Q_FLOOR: f64 = 1e-12;

/// Temperature softmax of one teacher's raw scores over the candidates.
pub fn teacher_inbatch_distribution(raw: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = raw.iter().map(|s| s / temperature).collect();
    softmax(&scaled)
}

/// Squared-difference disagreement of each teacher with all the others,
/// summed over candidates. `rows[k]` is teacher `k`'s distribution.
pub fn disagreement(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.len();
    (0..k)
        .map(|a| {
            (0..k)
                .filter(|&b| b != a)
                .map(|b| rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum()
        })
        .collect()
}

/// Per-user teacher weights. When teachers disagree by at least `epsilon`,
/// the most discordant one (lowest index on ties) is dropped and its base
/// weight is shared equally among the rest.
pub fn consistency_weights(rows: &[Vec<f64>], base: &[f64], epsilon: f64, mode: WeightMode) -> Vec<f64> {
    let k = base.len();
    if mode == WeightMode::Fixed || k <= 1 {
        return base.to_vec();
    }
    let d = disagreement(rows);
    let mut worst = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[worst] {
            worst = i;
        }
    }
    if d[worst] < epsilon {
        return base.to_vec();
    }
    let share = base[worst] / (k - 1) as f64;
    base.iter()
        .enumerate()
        // Rounding can push a sole survivor one ulp past 1.
        .map(|(i, &w)| if i == worst { 0.0 } else { (w + share).min(1.0) })
        .collect()
}

/// Weighted mixture of teacher distributions, renormalized to sum to one.
pub fn blended_supervision(weights: &[f64], rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = rows.first().map_or(0, Vec::len);
    let mut mixed = vec![0.0; t];
    for (w, row) in weights.iter().zip(rows) {
        for (m, s) in mixed.iter_mut().zip(row) {
            *m += w * s;
        }
    }
    let total: f64 = mixed.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("blended supervision (zero mass)".to_string()));
    }
    Ok(mixed.into_iter().map(|m| m / total).collect())
}

/// Supervision row for one user from the teachers' raw candidate scores.
pub fn supervision_row(
    raw: &[Vec<f64>],
    base: &[f64],
    config: &DistillationConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| teacher_inbatch_distribution(r, config.temperature))
        .collect();
    let weights = consistency_weights(&rows, base, config.epsilon, config.weight_mode);
    let q = blended_supervision(&weights, &rows)?;
    Ok((weights, q))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Cross-entropy of the positive, KL between the student's softmax `p` and
/// the supervision `q`, and their combination `ce + kd_weight * kd`.
pub fn batch_losses(
    logits: &[f64],
    positive: usize,
    q: &[f64],
    kd_weight: f64,
    direction: KlDirection,
) -> Result<Losses> {
    if positive >= logits.len() {
        return Err(Error::invalid(format!("positive index {positive} outside {} candidates", logits.len())));
    }
    if q.len() != logits.len() {
        return Err(Error::Shape(format!("{} logits but {} supervision entries", logits.len(), q.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
    let ce = -logp[positive];
    let kd = match direction {
        KlDirection::StudentTeacher => logp
            .iter()
            .zip(q)
            .map(|(&lp, &qj)| lp.exp() * (lp - qj.max(Q_FLOOR).ln()))
            .sum::<f64>(),
        KlDirection::TeacherStudent => q
            .iter()
            .zip(&logp)
            .map(|(&qj, &lp)| if qj > 0.0 { qj * (qj.max(Q_FLOOR).ln() - lp) } else { 0.0 })
            .sum::<f64>(),
    };
    let total = if kd_weight == 0.0 { ce } else { ce + kd_weight * kd };
    if !ce.is_finite() || !kd.is_finite() {
        return Err(Error::NonFinite("batch_losses".to_string()));
    }
    Ok(Losses { ce, kd, total })
}

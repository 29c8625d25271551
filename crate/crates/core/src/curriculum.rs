//! Easy-to-hard sample scheduling.
//!
//! Samples are scored by a difficulty measure combining relative sequence
//! length and mean item popularity, sorted, and cut into buckets. Stage `r`
//! trains on the union of the first `r` buckets; once every bucket has been
//! admitted, epochs fall back to uniform shuffles of the whole set.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PopularityTable;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Weight of the popularity term; larger favours popular sequences early.
    pub alpha: f64,
    pub num_buckets: usize,
    pub epochs_per_stage: usize,
    pub enabled: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            alpha: 0.5,
            num_buckets: 4,
            epochs_per_stage: 1,
            enabled: true,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("curriculum.alpha", format!("must be finite and >= 0, got {}", self.alpha)));
        }
        if self.num_buckets == 0 {
            return Err(Error::config("curriculum.num_buckets", "must be >= 1"));
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::config("curriculum.epochs_per_stage", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of leading epochs spent in curriculum stages.
    pub fn curriculum_epochs(&self) -> usize {
        if self.enabled {
            self.num_buckets * self.epochs_per_stage
        } else {
            0
        }
    }
}

/// Difficulty of one sequence: `N / n_max - alpha * mean(pop)`. Larger is harder.
pub fn ssl_score(sample: &[usize], stats: &PopularityTable, n_max: usize, alpha: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::invalid("difficulty of an empty sequence is undefined"));
    }
    if n_max < sample.len() {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds the normalizing length {n_max}",
            sample.len()
        )));
    }
    let n = sample.len() as f64;
    let mean_pop = sample.iter().map(|&v| stats.pop(v)).sum::<f64>() / n;
    Ok(n / n_max as f64 - alpha * mean_pop)
}

/// Samples sorted by difficulty and cut into near-equal buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPlan {
    /// Sample ids in ascending difficulty.
    pub ordered: Vec<usize>,
    /// Difficulty of each entry of `ordered`.
    pub scores: Vec<f64>,
    /// `num_buckets + 1` cut points into `ordered`.
    pub bounds: Vec<usize>,
    /// All sample ids ascending, the base order for uniform shuffles.
    ids: Vec<usize>,
}

/// Scores and buckets `(sample id, sequence)` pairs. Sequences are
/// normalized by the longest one in the set.
pub fn build_plan<'a, I>(samples: I, stats: &PopularityTable, config: &CurriculumConfig) -> Result<CurriculumPlan>
where
    I: IntoIterator<Item = (usize, &'a [usize])>,
{
    config.validate()?;
    let samples: Vec<(usize, &[usize])> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::invalid("curriculum needs at least one sample"));
    }
    let n_max = samples.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
    let mut scored = samples
        .iter()
        .map(|&(id, seq)| Ok((ssl_score(seq, stats, n_max, config.alpha)?, id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let total = scored.len();
    let buckets = config.num_buckets;
    let (base, extra) = (total / buckets, total % buckets);
    let mut bounds = Vec::with_capacity(buckets + 1);
    bounds.push(0);
    for b in 0..buckets {
        let size = base + usize::from(b < extra);
        bounds.push(bounds[b] + size);
    }
    let mut ids: Vec<usize> = scored.iter().map(|&(_, id)| id).collect();
    ids.sort_unstable();
    Ok(CurriculumPlan {
        ordered: scored.iter().map(|&(_, id)| id).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
        bounds,
        ids,
    })
}

impl CurriculumPlan {
    pub fn num_buckets(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn bucket(&self, b: usize) -> &[usize] {
        &self.ordered[self.bounds[b]..self.bounds[b + 1]]
    }

    /// Union of buckets `1..=stage`.
    pub fn stage_samples(&self, stage: usize) -> Result<&[usize]> {
        if stage == 0 || stage > self.num_buckets() {
            return Err(Error::invalid(format!(
                "stage {stage} outside 1..={}",
                self.num_buckets()
            )));
        }
        Ok(&self.ordered[..self.bounds[stage]])
    }

    /// Sample ids for one epoch (0-based) and the stage they belong to;
    /// stage 0 marks the uniform phase. Within a stage the admitted samples
    /// are shuffled too, so batches mix difficulties inside the prefix.
    pub fn epoch_samples<R: Rng + ?Sized>(
        &self,
        config: &CurriculumConfig,
        epoch: usize,
        rng: &mut R,
    ) -> (usize, Vec<usize>) {
        let (stage, mut samples) = if epoch < config.curriculum_epochs() {
            let stage = epoch / config.epochs_per_stage + 1;
            (stage, self.ordered[..self.bounds[stage]].to_vec())
        } else {
            (0, self.ids.clone())
        };
        samples.shuffle(rng);
        (stage, samples)
    }
}

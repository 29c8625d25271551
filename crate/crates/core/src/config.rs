//! Run configuration: one strict JSON document with documented defaults.
//!
//! Relative paths are resolved against the directory holding the config
//! file. `key=value` overrides address nested keys with dots, e.g.
//! `distill.kd_weight=0`; the value is parsed as JSON when possible and taken
//! as a string otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curriculum::CurriculumConfig;
use crate::data::SyntheticSpec;
use crate::distill::DistillationConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::teacher::PretrainSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub distill: DistillationConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Settings for `pretrain-teacher` and `export-teacher`.
    #[serde(default)]
    pub teacher: TeacherSection,
    /// Teachers used by `train`, in panel order.
    #[serde(default)]
    pub teachers: Vec<TeacherSource>,
    /// Relative teacher strengths; uniform when absent.
    #[serde(default)]
    pub teacher_weights: Option<Vec<f64>>,
    /// Indices into `teachers` to keep; all when absent.
    #[serde(default)]
    pub teacher_subset: Option<Vec<usize>>,
    #[serde(default)]
    pub sweep: SweepGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Target-domain interaction file.
    pub target: PathBuf,
    #[serde(default)]
    pub synthetic: SyntheticSection,
}

/// Generator settings for `gen-data`; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub num_domains: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    pub item_pool: usize,
    pub avg_len: f64,
    pub latent_dim: usize,
    pub noise: f64,
    pub transition: f64,
    /// Output directory; defaults to the directory of `data.target`.
    pub out_dir: Option<PathBuf>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            num_domains: 4,
            users_per_domain: 2000,
            items_per_domain: 500,
            item_pool: 800,
            avg_len: 8.0,
            latent_dim: 16,
            noise: 0.5,
            transition: 1.0,
            out_dir: None,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_domains: self.num_domains,
            users_per_domain: self.users_per_domain,
            items_per_domain: self.items_per_domain,
            item_pool: self.item_pool,
            avg_len: self.avg_len,
            latent_dim: self.latent_dim,
            noise: self.noise,
            transition: self.transition,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub model: ModelConfig,
    /// Source-domain interaction files used for pre-training.
    pub sources: Vec<PathBuf>,
    pub training: PretrainSettings,
    /// Overrides the run seed for teacher training.
    pub seed: Option<u64>,
}

/// A teacher for `train`: a model checkpoint with its architecture, or a
/// precomputed score matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TeacherSource {
    Checkpoint {
        checkpoint: PathBuf,
        #[serde(default)]
        model: ModelConfig,
    },
    Scores {
        scores: PathBuf,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub temperature: Vec<f64>,
    pub kd_weight: Vec<f64>,
    pub embedding_dim: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// One cell of a sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub temperature: f64,
    pub kd_weight: f64,
    pub embedding_dim: usize,
    pub alpha: f64,
}

impl RunConfig {
    /// Cartesian product of the sweep grid; axes left empty keep the run's
    /// own value.
    pub fn sweep_cells(&self) -> Vec<SweepCell> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let temps = or(&self.sweep.temperature, self.distill.temperature);
        let weights = or(&self.sweep.kd_weight, self.distill.kd_weight);
        let alphas = or(&self.sweep.alpha, self.curriculum.alpha);
        let dims = if self.sweep.embedding_dim.is_empty() {
            vec![self.model.embedding_dim]
        } else {
            self.sweep.embedding_dim.clone()
        };
        let mut cells = Vec::new();
        for &temperature in &temps {
            for &kd_weight in &weights {
                for &embedding_dim in &dims {
                    for &alpha in &alphas {
                        cells.push(SweepCell { temperature, kd_weight, embedding_dim, alpha });
                    }
                }
            }
        }
        cells
    }

    pub fn with_cell(&self, cell: SweepCell) -> Result<RunConfig> {
        let mut c = self.clone();
        c.distill.temperature = cell.temperature;
        c.distill.kd_weight = cell.kd_weight;
        c.model.embedding_dim = cell.embedding_dim;
        c.curriculum.alpha = cell.alpha;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.model.validate_as("teacher.model.")?;
        self.distill.validate()?;
        self.curriculum.validate()?;
        self.optim.validate_as("optim.")?;
        self.teacher.training.optim.validate_as("teacher.training.optim.")?;
        if self.teacher.training.batch_size == 0 {
            return Err(Error::config("teacher.training.batch_size", "must be >= 1"));
        }
        self.eval.validate()?;
        for (i, t) in self.teachers.iter().enumerate() {
            if let TeacherSource::Checkpoint { model, .. } = t {
                model.validate_as(&format!("teachers[{i}].model."))?;
            }
        }
        if let Some(w) = &self.teacher_weights {
            if w.len() != self.teachers.len() {
                return Err(Error::config(
                    "teacher_weights",
                    format!("{} weights for {} teachers", w.len(), self.teachers.len()),
                ));
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::config("teacher_weights", "weights must be finite and >= 0"));
            }
        }
        if let Some(s) = &self.teacher_subset {
            if let Some(bad) = s.iter().find(|&&i| i >= self.teachers.len()) {
                return Err(Error::config("teacher_subset", format!("index {bad} out of range")));
            }
        }
        for (axis, bad) in [
            ("sweep.temperature", self.sweep.temperature.iter().any(|t| !(*t > 0.0))),
            ("sweep.kd_weight", self.sweep.kd_weight.iter().any(|t| !(*t >= 0.0))),
            ("sweep.alpha", self.sweep.alpha.iter().any(|t| !(*t >= 0.0))),
            ("sweep.embedding_dim", self.sweep.embedding_dim.iter().any(|&d| d == 0 || d % self.model.heads != 0)),
        ] {
            if bad {
                return Err(Error::config(axis, "contains an invalid value"));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.target);
        if let Some(dir) = &mut self.data.synthetic.out_dir {
            fix(dir);
        }
        self.teacher.sources.iter_mut().for_each(fix);
        for t in &mut self.teachers {
            match t {
                TeacherSource::Checkpoint { checkpoint, .. } => fix(checkpoint),
                TeacherSource::Scores { scores } => fix(scores),
            }
        }
    }
}

/// Sets a dotted `path` inside a JSON object, creating objects on the way.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed override key"));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::config(parts[..i].join("."), "is not an object, cannot override inside it"));
        };
        if i == parts.len() - 1 {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `key=value` overrides to a parsed config document.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(doc, key.trim(), value)?;
    }
    Ok(())
}

/// Deserializes a config document, reporting the offending key on failure.
pub fn parse_config(doc: Value) -> Result<RunConfig> {
    let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = message
            .split('`')
            .nth(1)
            .filter(|_| message.starts_with("missing field") || message.starts_with("unknown field"))
            .map(str::to_string);
        let key = match (path.as_str(), field) {
            (".", Some(f)) => f,
            (p, Some(f)) if message.starts_with("missing field") => format!("{p}.{f}"),
            (p, _) => p.to_string(),
        };
        Error::config(key, message)
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    load_config_with(path, &[])
}

/// Loads, overrides, validates and path-resolves a config file.
pub fn load_config_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !doc.is_object() {
        return Err(Error::format(path, "config must be a JSON object"));
    }
    apply_overrides(&mut doc, overrides)?;
    let mut config = parse_config(doc)?;
    let base = path.parent().unwrap_or(Path::new(""));
    config.resolve_paths(base);
    Ok(config)
}

/// Fails with the config key and path of the first missing input file.
pub fn require_inputs<'a>(inputs: impl IntoIterator<Item = (String, &'a Path)>) -> Result<()> {
    for (key, path) in inputs {
        if !path.exists() {
            return Err(Error::config(key, format!("input `{}` does not exist", path.display())));
        }
    }
    Ok(())
}

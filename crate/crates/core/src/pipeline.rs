//! Command implementations shared by the CLI and the end-to-end tests.
//!
//! Every command takes a validated [`RunConfig`] and writes its artifacts to
//! explicit paths. Item ids are shared across domains: the target file is
//! loaded first so target items keep ids `0..num_items`, and source files
//! extend the same vocabulary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};

use crate::config::{require_inputs, RunConfig, SweepCell, TeacherSource};
use crate::data::{leave_one_out_split, load_interactions, load_interactions_with, write_synthetic, SplitDataset};
use crate::distill::{distill_train, EpochRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricReport};
use crate::model::{init_model, load_checkpoint, save_checkpoint, SequentialModel};
use crate::seeding::init_seed;
use crate::teacher::{export_score_matrix, pretrain_teacher, Teacher, TeacherPanel};

pub const STUDENT_FILE: &str = "student.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SWEEP_TSV: &str = "sweep.tsv";
pub const SWEEP_JSON: &str = "sweep.json";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Target split plus source-domain sequences over a shared vocabulary.
pub struct Corpus {
    pub target: SplitDataset,
    pub sources: Vec<Vec<usize>>,
    /// Size of the shared vocabulary.
    pub vocab: usize,
}

pub fn load_target(config: &RunConfig) -> Result<SplitDataset> {
    require_inputs([("data.target".to_string(), config.data.target.as_path())])?;
    Ok(leave_one_out_split(&load_interactions(&config.data.target)?))
}

pub fn load_corpus(target: &Path, sources: &[PathBuf]) -> Result<Corpus> {
    let target_ds = load_interactions(target)?;
    let split = leave_one_out_split(&target_ds);
    let mut vocab = target_ds.vocab().clone();
    let mut seqs = Vec::new();
    for path in sources {
        let ds = load_interactions_with(path, vocab)?;
        seqs.extend(ds.sequences().iter().cloned());
        vocab = ds.vocab().clone();
    }
    Ok(Corpus { target: split, sources: seqs, vocab: vocab.len() })
}

/// Writes the synthetic benchmark. Files go to `data.synthetic.out_dir`, or
/// next to `data.target` when that is unset.
pub fn gen_data(config: &RunConfig, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let spec = config.data.synthetic.spec(seed.unwrap_or(config.seed));
    spec.validate()?;
    let dir = match &config.data.synthetic.out_dir {
        Some(dir) => dir.clone(),
        None => config.data.target.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let paths = write_synthetic(&spec, &dir)?;
    info!("wrote {} domain files to {}", paths.len(), dir.display());
    Ok(paths)
}

/// Pre-trains one teacher on `teacher.sources` plus the target training split
/// and saves its checkpoint.
pub fn pretrain_teacher_cmd(config: &RunConfig, out: &Path) -> Result<SequentialModel> {
    let mut inputs = vec![("data.target".to_string(), config.data.target.as_path())];
    for (i, p) in config.teacher.sources.iter().enumerate() {
        inputs.push((format!("teacher.sources[{i}]"), p.as_path()));
    }
    require_inputs(inputs)?;
    let corpus = load_corpus(&config.data.target, &config.teacher.sources)?;
    let seed = config.teacher.seed.unwrap_or(config.seed);
    let trained = pretrain_teacher(
        &config.teacher.model,
        corpus.vocab,
        &corpus.sources,
        &corpus.target,
        &config.teacher.training,
        seed,
    )?;
    save_checkpoint(&trained.model, out)?;
    info!("saved teacher ({} parameters) to {}", trained.model.param_count(), out.display());
    Ok(trained.model)
}

/// Exports a teacher checkpoint (architecture from `teacher.model`) as a
/// score matrix over the target users and items.
pub fn export_teacher_cmd(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    require_inputs([
        ("data.target".to_string(), config.data.target.as_path()),
        ("--teacher".to_string(), checkpoint),
    ])?;
    let target = load_target(config)?;
    let model = load_checkpoint(checkpoint, &config.teacher.model)?;
    let matrix = export_score_matrix(&model, &target, out)?;
    info!("exported {}x{} scores to {}", matrix.num_users(), matrix.num_items(), out.display());
    Ok(())
}

/// Loads the configured teachers, keeping `teacher_subset` and normalizing
/// `teacher_weights`. `None` when no teacher remains.
pub fn load_panel(config: &RunConfig) -> Result<Option<TeacherPanel>> {
    let keep: Vec<usize> = match &config.teacher_subset {
        Some(s) => s.clone(),
        None => (0..config.teachers.len()).collect(),
    };
    if keep.is_empty() {
        return Ok(None);
    }
    let mut inputs = Vec::new();
    for &i in &keep {
        let path = match &config.teachers[i] {
            TeacherSource::Checkpoint { checkpoint, .. } => checkpoint,
            TeacherSource::Scores { scores } => scores,
        };
        inputs.push((format!("teachers[{i}]"), path.as_path()));
    }
    require_inputs(inputs)?;
    let mut teachers = Vec::with_capacity(keep.len());
    for &i in &keep {
        teachers.push(match &config.teachers[i] {
            TeacherSource::Checkpoint { checkpoint, model } => Teacher::Model(load_checkpoint(checkpoint, model)?),
            TeacherSource::Scores { scores } => Teacher::open_scores(scores)?,
        });
    }
    let panel = match &config.teacher_weights {
        Some(w) => TeacherPanel::with_strengths(teachers, &keep.iter().map(|&i| w[i]).collect::<Vec<_>>())?,
        None => TeacherPanel::uniform(teachers)?,
    };
    Ok(Some(panel))
}

pub struct TrainSummary {
    pub student: SequentialModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Metrics of the best student on the configured evaluation split.
    pub report: MetricReport,
    pub num_teachers: usize,
}

impl TrainSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "best_epoch": self.best_epoch,
            "epochs": self.log.len(),
            "num_teachers": self.num_teachers,
            "param_count": self.student.param_count(),
            "metrics": self.report.to_json(),
        })
    }
}

fn eval_rows(target: &SplitDataset, split: EvalSplit) -> &[crate::data::EvalRow] {
    match split {
        EvalSplit::Valid => &target.valid,
        EvalSplit::Test => &target.test,
    }
}

/// Trains a student without writing anything.
pub fn train_student(config: &RunConfig, target: &SplitDataset, panel: Option<&TeacherPanel>) -> Result<TrainSummary> {
    let student = init_model(&config.model, target.num_items, init_seed(config.seed))?;
    let outcome = distill_train(student, panel, target, &config.distill, &config.curriculum, &config.optim, config.seed)?;
    let report = evaluate(&outcome.model, eval_rows(target, config.eval.split), &config.eval.cutoffs)?;
    Ok(TrainSummary {
        student: outcome.model,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        report,
        num_teachers: panel.map_or(0, TeacherPanel::len),
    })
}

/// Trains a student and writes `student.ckpt`, `metrics.tsv`, `report.json`
/// and the resolved `config.json` into `out`.
pub fn train_cmd(config: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let target = load_target(config)?;
    let panel = load_panel(config)?;
    let summary = train_student(config, &target, panel.as_ref())?;
    save_checkpoint(&summary.student, out.join(STUDENT_FILE))?;
    write_file(&out.join(METRICS_FILE), crate::distill::render_log(&summary.log))?;
    write_file(&out.join(REPORT_FILE), pretty(&summary.to_json()))?;
    let resolved = serde_json::to_value(config).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&out.join(CONFIG_FILE), pretty(&resolved))?;
    info!("trained student in {} epochs, artifacts in {}", summary.log.len(), out.display());
    Ok(summary)
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// Scores a student checkpoint on the configured split. Needs only the
/// checkpoint and the target data.
pub fn evaluate_cmd(config: &RunConfig, checkpoint: &Path) -> Result<MetricReport> {
    require_inputs([
        ("data.target".to_string(), config.data.target.as_path()),
        ("--checkpoint".to_string(), checkpoint),
    ])?;
    let target = load_target(config)?;
    let model = load_checkpoint(checkpoint, &config.model)?;
    if model.vocab() != target.num_items {
        return Err(Error::invalid(format!(
            "checkpoint covers {} items, target data has {}",
            model.vocab(),
            target.num_items
        )));
    }
    evaluate(&model, eval_rows(&target, config.eval.split), &config.eval.cutoffs)
}

pub struct SweepRow {
    pub cell: SweepCell,
    pub summary: TrainSummary,
}

/// Trains one student per grid cell into `out/cell_{i}` and writes one row
/// per cell to `sweep.tsv` and `sweep.json`.
pub fn sweep_cmd(config: &RunConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let target = load_target(config)?;
    let panel = load_panel(config)?;
    let mut rows = Vec::new();
    for (i, cell) in config.sweep_cells().into_iter().enumerate() {
        let cell_config = config.with_cell(cell)?;
        info!("sweep cell {i}: {cell:?}");
        let summary = train_student(&cell_config, &target, panel.as_ref())?;
        let dir = out.join(format!("cell_{i}"));
        save_checkpoint(&summary.student, dir.join(STUDENT_FILE))?;
        write_file(&dir.join(METRICS_FILE), crate::distill::render_log(&summary.log))?;
        rows.push(SweepRow { cell, summary });
    }
    let cutoffs = &config.eval.cutoffs;
    let mut tsv = String::from("cell\ttemperature\tkd_weight\tembedding_dim\talpha\tbest_epoch");
    for k in cutoffs {
        let _ = write!(tsv, "\trecall@{k}\tndcg@{k}");
    }
    tsv.push('\n');
    let mut json_rows = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let c = row.cell;
        let _ = write!(
            tsv,
            "{i}\t{}\t{}\t{}\t{}\t{}",
            c.temperature, c.kd_weight, c.embedding_dim, c.alpha, row.summary.best_epoch
        );
        for &k in cutoffs {
            let r = row.summary.report.recall_at(k).unwrap_or(f64::NAN);
            let n = row.summary.report.ndcg_at(k).unwrap_or(f64::NAN);
            let _ = write!(tsv, "\t{r:.6}\t{n:.6}");
        }
        tsv.push('\n');
        json_rows.push(json!({
            "cell": i,
            "temperature": c.temperature,
            "kd_weight": c.kd_weight,
            "embedding_dim": c.embedding_dim,
            "alpha": c.alpha,
            "result": row.summary.to_json(),
        }));
    }
    write_file(&out.join(SWEEP_TSV), tsv)?;
    write_file(&out.join(SWEEP_JSON), pretty(&Value::Array(json_rows)))?;
    Ok(rows)
}

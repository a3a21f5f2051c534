//! Latent-dimension sweeps.
//!
//! One model is trained per `(latent_dim, seed)` on a shared dataset file.
//! Each run writes its own directory:
//!
//! ```text
//! <out>/config.json                 effective sweep configuration
//! <out>/table.csv                   one row per latent dimension (seed median)
//! <out>/runs.csv                    one row per run
//! <out>/runs/d<d>_s<seed>/curve.csv epoch,loss_ae,loss_op,alpha_scaled_ae
//! <out>/runs/d<d>_s<seed>/model.ckpt
//! <out>/runs/d<d>_s<seed>/config.json
//! <out>/runs/d<d>_s<seed>/run.json  status and epoch count
//! ```
//!
//! A diverged or panicking run is recorded and the sweep moves on.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_repr::{read_dataset, Dataset, GraphError};
use crate::operator_model::{LossRecord, TrainConfig, TrainError, Trainer, TrainingData};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: {0}")]
    Dataset(#[from] GraphError),
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub latent_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Shared hyperparameters; `latent_dim` and `rng_seed` are set per run.
    pub train: TrainConfig,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.latent_dims.contains(&0) {
            return bad("latent dimensions must be at least 1".into());
        }
        if self.latent_dims.iter().collect::<BTreeSet<_>>().len() != self.latent_dims.len() {
            return bad(format!("duplicate latent dimensions in {:?}", self.latent_dims));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed per dimension is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad(format!("duplicate seeds in {:?}", self.seeds));
        }
        self.run_config(1, 0).validate()?;
        Ok(())
    }

    pub fn run_config(&self, latent_dim: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            latent_dim,
            rng_seed: seed,
            ..self.train.clone()
        }
    }
}

pub fn run_dir_name(latent_dim: usize, seed: u64) -> String {
    format!("d{latent_dim}_s{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged(String),
    Panicked(String),
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

/// Per-run minima derived from the recorded curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub latent_dim: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub history: Vec<LossRecord>,
    /// Over all recorded epochs.
    pub min_loss_ae: Option<(f64, usize)>,
    pub min_loss_op: Option<(f64, usize)>,
    /// Over epochs where the operator trains.
    pub min_loss_op_trained: Option<(f64, usize)>,
    /// `L_OP` at the first epoch with the operator active.
    pub loss_op_at_delay: Option<f64>,
}

fn argmin(records: &[LossRecord], f: impl Fn(&LossRecord) -> f64) -> Option<(f64, usize)> {
    // First occurrence wins on ties.
    records.iter().fold(None, |best, r| match best {
        Some((v, _)) if f(r) >= v => best,
        _ => Some((f(r), r.epoch)),
    })
}

pub fn summarize_run(
    latent_dim: usize,
    seed: u64,
    operator_delay: usize,
    status: RunStatus,
    history: Vec<LossRecord>,
) -> RunSummary {
    let trained: Vec<LossRecord> = history
        .iter()
        .filter(|r| r.epoch >= operator_delay)
        .copied()
        .collect();
    RunSummary {
        latent_dim,
        seed,
        min_loss_ae: argmin(&history, |r| r.loss_ae),
        min_loss_op: argmin(&history, |r| r.loss_op),
        min_loss_op_trained: argmin(&trained, |r| r.loss_op),
        loss_op_at_delay: history
            .iter()
            .find(|r| r.epoch == operator_delay)
            .map(|r| r.loss_op),
        status,
        history,
    }
}

/// One row per latent dimension, aggregated over completed seeds by the
/// lower median, so every reported value and epoch comes from a real run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub latent_dim: usize,
    pub min_loss_ae: Option<f64>,
    pub argmin_ae_epoch: Option<usize>,
    pub min_loss_op: Option<f64>,
    pub argmin_op_epoch: Option<usize>,
    pub min_loss_op_trained: Option<f64>,
    pub loss_op_at_delay: Option<f64>,
    pub completed_runs: usize,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunSummary>,
}

fn lower_median<T: Copy>(mut items: Vec<(f64, T)>) -> Option<(f64, T)> {
    if items.is_empty() {
        return None;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(items[(items.len() - 1) / 2])
}

pub fn aggregate(latent_dims: &[usize], runs: Vec<RunSummary>) -> SweepTable {
    let rows = latent_dims
        .iter()
        .map(|&d| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.latent_dim == d).collect();
            let done: Vec<&RunSummary> =
                mine.iter().copied().filter(|r| r.status.is_completed()).collect();
            let ae = lower_median(done.iter().filter_map(|r| r.min_loss_ae).collect());
            let op = lower_median(done.iter().filter_map(|r| r.min_loss_op).collect());
            let trained = lower_median(
                done.iter()
                    .filter_map(|r| r.min_loss_op_trained.map(|(v, _)| (v, ())))
                    .collect(),
            );
            let at_delay =
                lower_median(done.iter().filter_map(|r| r.loss_op_at_delay.map(|v| (v, ()))).collect());
            SweepRow {
                latent_dim: d,
                min_loss_ae: ae.map(|x| x.0),
                argmin_ae_epoch: ae.map(|x| x.1),
                min_loss_op: op.map(|x| x.0),
                argmin_op_epoch: op.map(|x| x.1),
                min_loss_op_trained: trained.map(|x| x.0),
                loss_op_at_delay: at_delay.map(|x| x.0),
                completed_runs: done.len(),
                failed_runs: mine.len() - done.len(),
            }
        })
        .collect();
    SweepTable { rows, runs }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const TABLE_HEADER: &str = "latent_dim,min_loss_ae,argmin_ae_epoch,min_loss_op,argmin_op_epoch,min_loss_op_trained,loss_op_at_delay,completed_runs,failed_runs";
pub const RUNS_HEADER: &str = "latent_dim,seed,status,epochs,min_loss_ae,argmin_ae_epoch,min_loss_op,argmin_op_epoch,min_loss_op_trained,loss_op_at_delay";
pub const CURVE_HEADER: &str = "epoch,loss_ae,loss_op,alpha_scaled_ae";

pub fn table_csv(table: &SweepTable) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.latent_dim,
            opt(r.min_loss_ae),
            opt(r.argmin_ae_epoch),
            opt(r.min_loss_op),
            opt(r.argmin_op_epoch),
            opt(r.min_loss_op_trained),
            opt(r.loss_op_at_delay),
            r.completed_runs,
            r.failed_runs
        );
    }
    s
}

pub fn runs_csv(table: &SweepTable) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    for r in &table.runs {
        let status = match &r.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged(_) => "diverged",
            RunStatus::Panicked(_) => "panicked",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.latent_dim,
            r.seed,
            status,
            r.history.len(),
            opt(r.min_loss_ae.map(|x| x.0)),
            opt(r.min_loss_ae.map(|x| x.1)),
            opt(r.min_loss_op.map(|x| x.0)),
            opt(r.min_loss_op.map(|x| x.1)),
            opt(r.min_loss_op_trained.map(|x| x.0)),
            opt(r.loss_op_at_delay)
        );
    }
    s
}

pub fn curves_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss_ae, r.loss_op, r.alpha_scaled_ae);
    }
    s
}

pub fn export_table(table: &SweepTable, path: &Path) -> Result<(), ExperimentError> {
    write_file(path, table_csv(table))
}

pub fn export_curves(records: &[LossRecord], path: &Path) -> Result<(), ExperimentError> {
    write_file(path, curves_csv(records))
}

pub fn read_curves(path: &Path) -> Result<Vec<LossRecord>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let fail = |line: usize, message: String| ExperimentError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CURVE_HEADER => {}
        _ => return Err(fail(1, format!("expected header `{CURVE_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(fail(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| fail(i + 1, format!("{s:?}: {e}")));
        out.push(LossRecord {
            epoch: f[0].trim().parse().map_err(|e| fail(i + 1, format!("epoch: {e}")))?,
            loss_ae: num(f[1])?,
            loss_op: num(f[2])?,
            alpha_scaled_ae: num(f[3])?,
        });
    }
    Ok(out)
}

/// Dataset facts copied into checkpoints and config echoes.
pub fn dataset_echo(ds: &Dataset) -> serde_json::Value {
    serde_json::json!({
        "k": ds.k,
        "frames": ds.num_frames,
        "centers": ds.centers.len(),
        "pairs": ds.len(),
        "scaler": ds.scaler,
        "lj": ds.lj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub latent_dim: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    #[serde(flatten)]
    pub status: RunStatus,
}

/// Trains one model and writes its curve, checkpoint, config echo and status
/// into `dir`. Training failures end up in the returned status.
pub fn train_run(
    ds: &Dataset,
    cfg: &TrainConfig,
    dir: &Path,
    mut on_epoch: impl FnMut(&LossRecord),
) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let data = TrainingData::from_dataset(ds);
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "train": cfg,
            "dataset": dataset_echo(ds),
        }))
        .expect("config serializes"),
    )?;

    let mut history = Vec::new();
    let mut model = None;
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<(), TrainError> {
        let mut trainer = Trainer::new(ds.feature_dim(), cfg.clone())?;
        let result = trainer.run(&data, &mut on_epoch).map(|_| ());
        history = trainer.history.clone();
        if result.is_ok() {
            model = Some(trainer.model);
        }
        result
    }));
    let status = match outcome {
        Ok(Ok(())) => RunStatus::Completed,
        Ok(Err(e @ TrainError::Diverged { .. })) => RunStatus::Diverged(e.to_string()),
        Ok(Err(e)) => return Err(e.into()),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            RunStatus::Panicked(msg)
        }
    };

    export_curves(&history, &dir.join("curve.csv"))?;
    if let Some(m) = &model {
        let ck = m.to_checkpoint(serde_json::json!({
            "train": cfg,
            "dataset": dataset_echo(ds),
        }));
        write_file(&dir.join("model.ckpt"), ck.to_bytes())?;
    }
    let record = RunRecord {
        latent_dim: cfg.latent_dim,
        seed: cfg.rng_seed,
        epochs_completed: history.len(),
        status: status.clone(),
    };
    write_file(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("run record serializes"),
    )?;
    Ok(summarize_run(
        cfg.latent_dim,
        cfg.rng_seed,
        cfg.operator_delay_epochs,
        status,
        history,
    ))
}

/// Reads back a run directory written by [`train_run`].
pub fn load_run(dir: &Path, operator_delay: usize) -> Result<RunSummary, ExperimentError> {
    let path = dir.join("run.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let rec: RunRecord = serde_json::from_str(&text).map_err(|e| ExperimentError::Format {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let history = read_curves(&dir.join("curve.csv"))?;
    Ok(summarize_run(rec.latent_dim, rec.seed, operator_delay, rec.status, history))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(read_dataset(&text)?)
}

/// `table.csv` and `runs.csv`.
pub fn write_sweep_outputs(cfg: &SweepConfig, table: &SweepTable) -> Result<(), ExperimentError> {
    export_table(table, &cfg.output_dir.join("table.csv"))?;
    write_file(&cfg.output_dir.join("runs.csv"), runs_csv(table))
}

pub fn write_sweep_echo(cfg: &SweepConfig, ds: &Dataset) -> Result<(), ExperimentError> {
    write_file(
        &cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "sweep": cfg,
            "dataset_facts": dataset_echo(ds),
        }))
        .expect("config serializes"),
    )
}

/// Runs every `(latent_dim, seed)` in this process, in order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepTable, ExperimentError> {
    run_sweep_observed(cfg, |_, _, _| {})
}

pub fn run_sweep_observed(
    cfg: &SweepConfig,
    mut on_epoch: impl FnMut(usize, u64, &LossRecord),
) -> Result<SweepTable, ExperimentError> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    write_sweep_echo(cfg, &ds)?;
    let mut runs = Vec::new();
    for &d in &cfg.latent_dims {
        for &seed in &cfg.seeds {
            let dir = cfg.output_dir.join("runs").join(run_dir_name(d, seed));
            let rc = cfg.run_config(d, seed);
            runs.push(train_run(&ds, &rc, &dir, |r| on_epoch(d, seed, r))?);
        }
    }
    let table = aggregate(&cfg.latent_dims, runs);
    write_sweep_outputs(cfg, &table)?;
    Ok(table)
}

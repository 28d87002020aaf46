//! Experiment front-end: dataset generation, training, evaluation and
//! noise/method sweeps, writing CSV tables keyed by run id and config hash.

pub mod config;
pub mod outputs;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dura::data::{generate, load_dataset, save_dataset, DataError, GenConfig, NoisyPairedDataset, DATASET_VERSION};
use dura::metrics::EvalRow;
use dura::trainer::{best_and_last, evaluate_retrieval, Checkpoint, EpochLog, Method, TrainConfig, TrainError, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Overrides, RunConfig};
use outputs::{hist_rows, write_csv, CurveRow, EpochRow, FailureRow, HistRow, SummaryRow};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{message}; last good checkpoint: {}", checkpoint.display())]
    Divergence { message: String, checkpoint: PathBuf },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence { .. } => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::InfeasibleMargin { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::ShapeMismatch(_) | TrainError::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "dura", version, about = "Noisy-correspondence retrieval experiments on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config file; omitted sections and keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Noise rates, comma separated; single-run commands use the first.
    #[arg(long, global = true, value_delimiter = ',')]
    pub noise: Option<Vec<f64>>,
    /// Methods (`dura`, `triplet`, `tal+kfs`, ..., or `ablation` in sweeps).
    #[arg(long, global = true, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset and its manifest.
    Generate,
    /// Train one model, writing per-epoch CSV and checkpoints.
    Train {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; regenerated from the checkpoint's config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate every (seed, noise, method) cell.
    Sweep,
    /// Print the effective config as TOML.
    PrintConfig,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            noise: self.noise.clone(),
            methods: self.methods.clone(),
            threads: self.threads,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&cli.overrides())?;
    cfg.validate()?;
    match &cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Generate => cmd_generate(&cfg).map(|_| ()),
        Command::Train { dataset } => cmd_train(&cfg, dataset.as_deref()).map(|_| ()),
        Command::Eval { checkpoint, dataset } => cmd_eval(&cfg, checkpoint, dataset.as_deref()).map(|_| ()),
        Command::Sweep => cmd_sweep(&cfg).map(|_| ()),
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    Ok(&cfg.out_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io_err(&path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub requested_rho: f64,
    pub realized_rho: f64,
    pub n_pairs: usize,
    pub n_flagged: usize,
    pub n_test_pairs: usize,
    pub config: GenConfig,
}

/// Writes `dataset.bin` and `dataset.json` into the output directory.
pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let dir = prepare_out(cfg)?;
    let ds = generate(&cfg.data)?;
    save_dataset(&ds, &dir.join("dataset.bin"))?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        run_id: cfg.run_id("generate"),
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        requested_rho: cfg.data.noise_rate,
        realized_rho: ds.rho,
        n_pairs: ds.train.len(),
        n_flagged: ds.train.n_mismatched(),
        n_test_pairs: ds.test.len(),
        config: cfg.data.clone(),
    };
    write_json(&dir.join("dataset.json"), &manifest)?;
    write_config(dir, cfg)?;
    Ok(manifest)
}

/// A trainer checkpoint tagged with the run that wrote it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub run_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
}

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self).map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(path, text).map_err(io_err(path))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub logs: Vec<EpochLog>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

fn load_or_generate(path: Option<&Path>, data: &GenConfig) -> Result<NoisyPairedDataset, CliError> {
    match path {
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(generate(data)?),
    }
}

/// Trains one model. Writes `epochs.csv`, `evidence_hist.csv` and the
/// `checkpoint-last.json` / `checkpoint-best.json` pair (best by Rank-1).
/// The last checkpoint is rewritten after every completed epoch, so after a
/// divergence it holds the last good state.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let dir = prepare_out(cfg)?.to_path_buf();
    write_config(&dir, cfg)?;
    let ds = load_or_generate(dataset, &cfg.data)?;
    let run_id = cfg.run_id("train");
    let hash = cfg.hash();
    let last_path = dir.join("checkpoint-last.json");
    let best_path = dir.join("checkpoint-best.json");
    let tag = |cp: Checkpoint| RunCheckpoint {
        run_id: run_id.clone(),
        config_hash: hash.clone(),
        config: cfg.clone(),
        checkpoint: cp,
    };

    let mut trainer = Trainer::new(cfg.train.clone(), &ds)?;
    tag(trainer.checkpoint()).save(&last_path)?;
    let mut best_r1 = f64::NEG_INFINITY;
    let mut failure = None;
    while !trainer.is_done() {
        match trainer.run_epoch(&ds) {
            Ok(log) => {
                let r1 = log.eval.rank1;
                let cp = tag(trainer.checkpoint());
                cp.save(&last_path)?;
                if r1 > best_r1 {
                    best_r1 = r1;
                    cp.save(&best_path)?;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }

    let logs = trainer.logs().to_vec();
    let rows: Vec<EpochRow> = logs.iter().map(|l| EpochRow::new(&run_id, &hash, l)).collect();
    write_csv(&dir.join("epochs.csv"), &rows, &["run_id", "config_hash", "epoch"])?;
    let seed = cfg.train.seed;
    let method = cfg.train.method.name();
    let hist: Vec<HistRow> = logs
        .iter()
        .flat_map(|l| hist_rows(&run_id, &hash, seed, ds.rho, &method, l))
        .collect();
    write_csv(&dir.join("evidence_hist.csv"), &hist, &["run_id", "config_hash", "epoch"])?;

    match failure {
        None => Ok(TrainOutcome {
            run_id,
            logs,
            last_checkpoint: last_path,
            best_checkpoint: best_path,
        }),
        Some(e @ TrainError::Divergence { .. }) => Err(CliError::Divergence {
            message: e.to_string(),
            checkpoint: last_path,
        }),
        Some(e) => Err(e.into()),
    }
}

/// Evaluates text-to-image retrieval on the held-out split and writes
/// `eval.csv` (one row).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: Option<&Path>) -> Result<EvalRow, CliError> {
    let dir = prepare_out(cfg)?;
    let cp = RunCheckpoint::load(checkpoint)?;
    let ds = load_or_generate(dataset, &cp.config.data)?;
    let report = evaluate_retrieval(&cp.checkpoint.params, &ds.test)?;
    let row = EvalRow::new(&cp.run_id, ds.rho, cp.checkpoint.epoch, &report, &cp.config_hash);
    write_csv(&dir.join("eval.csv"), std::slice::from_ref(&row), &[])?;
    Ok(row)
}

/// One trained (seed, noise, method) cell of a sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub seed: u64,
    pub noise: f64,
    pub label: String,
    pub method: Method,
    pub result: Result<Vec<EpochLog>, String>,
}

/// Data and training config of one cell: each explicit sweep seed replaces
/// both config seeds.
pub fn cell_configs(cfg: &RunConfig, seed: Option<u64>, noise: f64, method: Method) -> (GenConfig, TrainConfig) {
    let mut data = cfg.data.clone();
    let mut train = cfg.train.clone();
    if let Some(s) = seed {
        data.seed = s;
        train.seed = s;
    }
    data.noise_rate = noise;
    train.method = method;
    (data, train)
}

/// Trains every cell. Cells run on a pool of `sweep.threads` workers; the
/// result order is the nested (seed, noise, method) order regardless.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let methods = cfg.sweep_methods()?;
    let seeds: Vec<Option<u64>> = if cfg.sweep.seeds.is_empty() {
        vec![None]
    } else {
        cfg.sweep.seeds.iter().copied().map(Some).collect()
    };
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &noise in &cfg.sweep.noise {
            for (label, method) in &methods {
                jobs.push((seed, noise, label.clone(), *method));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.threads)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let cells = pool.install(|| {
        jobs.into_par_iter()
            .map(|(seed, noise, label, method)| {
                let (data, train) = cell_configs(cfg, seed, noise, method);
                let result = generate(&data)
                    .map_err(|e| e.to_string())
                    .and_then(|ds| dura::trainer::train(&train, &ds).map_err(|e| e.to_string()))
                    .map(|(_, logs)| logs);
                Cell {
                    seed: train.seed,
                    noise,
                    label,
                    method,
                    result,
                }
            })
            .collect()
    });
    Ok(cells)
}

/// Runs the sweep and writes `summary.csv` (Best and Last rows per cell),
/// `curves.csv` (per-epoch metrics), `evidence_hist.csv` and `failures.csv`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let dir = prepare_out(cfg)?.to_path_buf();
    write_config(&dir, cfg)?;
    let run_id = cfg.run_id("sweep");
    let hash = cfg.hash();
    let cells = run_sweep(cfg)?;

    let mut summary = Vec::new();
    let mut curves = Vec::new();
    let mut hists = Vec::new();
    let mut failures = Vec::new();
    for c in &cells {
        let key = (run_id.as_str(), hash.as_str(), c.seed, c.noise, c.label.as_str());
        let logs = match &c.result {
            Ok(logs) => logs,
            Err(e) => {
                failures.push(FailureRow {
                    run_id: key.0,
                    config_hash: key.1,
                    seed: key.2,
                    noise: key.3,
                    method: key.4,
                    error: e.clone(),
                });
                continue;
            }
        };
        if let Some((best, last)) = best_and_last(logs) {
            for (row, l) in [("Best", best), ("Last", last)] {
                summary.push(SummaryRow {
                    run_id: key.0,
                    config_hash: key.1,
                    seed: key.2,
                    noise: key.3,
                    method: key.4,
                    row,
                    epoch: l.epoch,
                    r1: l.eval.rank1,
                    r5: l.eval.rank5,
                    r10: l.eval.rank10,
                    map: l.eval.map,
                    minp: l.eval.minp,
                });
            }
        }
        for l in logs {
            curves.push(CurveRow {
                run_id: key.0,
                config_hash: key.1,
                seed: key.2,
                noise: key.3,
                method: key.4,
                epoch: l.epoch,
                loss: l.loss,
                r1: l.eval.rank1,
                map: l.eval.map,
                minp: l.eval.minp,
                evidence_auc: l.evidence_auc,
                n_negatives: l.n_negatives,
            });
            hists.extend(hist_rows(key.0, key.1, key.2, key.3, key.4, l));
        }
    }
    let cell_cols = ["run_id", "config_hash", "seed", "noise", "method"];
    write_csv(&dir.join("summary.csv"), &summary, &cell_cols)?;
    write_csv(&dir.join("curves.csv"), &curves, &cell_cols)?;
    write_csv(&dir.join("evidence_hist.csv"), &hists, &cell_cols)?;
    write_csv(
        &dir.join("failures.csv"),
        &failures,
        &["run_id", "config_hash", "seed", "noise", "method", "error"],
    )?;
    Ok(cells)
}

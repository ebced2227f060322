//! Seeded experiment runs and their on-disk outputs.
//!
//! Layout under `<out>/<run_id>/`:
//! - `summary.json`: aggregate over seeds.
//! - `seed_<s>/metrics.csv`: `round,cum_seconds,cum_down_bytes,cum_up_bytes,train_loss,test_accuracy`,
//!   one row per evaluation, flushed as it is written.
//! - `seed_<s>/rounds.csv`: `round,client,spec_hash,recorded,loss,down_bytes,up_bytes`,
//!   one row per participating client per round.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ArchKind, ConfigError, ExperimentConfig};
use crate::data::{synthesize, DataError, FederatedDataset};
use crate::federation::{FederationError, MetricsRow, Progress, Simulation};
use crate::netsim::{convergence_time, speedup_ratio};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const METRICS_COLUMNS: [&str; 6] = ["round", "cum_seconds", "cum_down_bytes", "cum_up_bytes", "train_loss", "test_accuracy"];
pub const ROUNDS_COLUMNS: [&str; 7] = ["round", "client", "spec_hash", "recorded", "loss", "down_bytes", "up_bytes"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLogRow {
    pub round: usize,
    pub client: usize,
    pub spec_hash: String,
    pub recorded: bool,
    pub loss: f64,
    pub down_bytes: usize,
    pub up_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundLogRow>,
}

impl SeedOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.test_accuracy)
    }

    pub fn convergence_minutes(&self, target: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.cum_seconds, r.test_accuracy)).collect();
        convergence_time(&pts, target)
    }
}

/// Generates the dataset for `seed`, reshaped for the configured model.
pub fn dataset<T: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedDataset<T>, ExperimentError> {
    let data = synthesize(&cfg.data_config(), seed)?;
    Ok(match cfg.arch {
        ArchKind::Mlp => data,
        ArchKind::Cnn => {
            let arch = cfg.architecture()?;
            data.with_example_shape(arch.input_shape())?
        }
    })
}

/// Runs one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    run_seed_inner(cfg, seed, None)
}

fn run_seed_inner(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<SeedOutcome, ExperimentError> {
    cfg.validate()?;
    let arch = cfg.architecture()?;
    let data = dataset::<f64>(cfg, seed)?;
    let mut sim = Simulation::from_dataset(
        arch.clone(),
        cfg.controller(&arch),
        cfg.codecs(),
        cfg.training(),
        cfg.network(),
        &data,
        seed,
    )?;
    let train = data.pooled_train().map_err(FederationError::from)?;
    let test = data.pooled_test().map_err(FederationError::from)?;

    let mut writers = match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(io_err(d))?;
            let open = |name: &str, header: &[&str]| -> Result<csv::Writer<File>, ExperimentError> {
                let p = d.join(name);
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .from_writer(File::create(&p).map_err(io_err(&p))?);
                w.write_record(header)?;
                Ok(w)
            };
            Some((
                open("metrics.csv", &METRICS_COLUMNS)?,
                open("rounds.csv", &ROUNDS_COLUMNS)?,
            ))
        }
        None => None,
    };
    let mut round_log = Vec::new();
    let rows = sim.run(cfg.rounds, cfg.eval_every, &train, &test, |p| -> Result<(), ExperimentError> {
        match p {
            Progress::Round(r) => {
                for (e, rep) in r.events.iter().zip(&r.reports) {
                    let row = RoundLogRow {
                        round: r.metrics.round,
                        client: e.client,
                        spec_hash: e.spec_hash.clone(),
                        recorded: e.recorded,
                        loss: e.loss,
                        down_bytes: rep.down_bytes,
                        up_bytes: rep.up_bytes,
                    };
                    if let Some((_, rw)) = writers.as_mut() {
                        rw.serialize(&row)?;
                    }
                    round_log.push(row);
                }
                if let Some((_, rw)) = writers.as_mut() {
                    rw.flush().map_err(io_err(Path::new("rounds.csv")))?;
                }
            }
            Progress::Eval(row) => {
                if let Some((mw, _)) = writers.as_mut() {
                    mw.serialize(row)?;
                    mw.flush().map_err(io_err(Path::new("metrics.csv")))?;
                }
            }
        }
        Ok(())
    })?;
    Ok(SeedOutcome {
        seed,
        rows,
        rounds: round_log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub target_accuracy: f64,
    pub final_accuracy: Vec<f64>,
    pub final_accuracy_mean: f64,
    /// Sample standard deviation; absent for a single seed.
    pub final_accuracy_std: Option<f64>,
    pub convergence_minutes_per_seed: Vec<Option<f64>>,
    /// Mean over seeds, or null unless every seed reached the target.
    pub convergence_minutes: Option<f64>,
    pub cum_down_bytes_mean: f64,
    pub cum_up_bytes_mean: f64,
    pub baseline_run_id: Option<String>,
    /// Baseline convergence minutes divided by this run's.
    pub speedup_ratio: Option<f64>,
}

impl Summary {
    pub fn from_outcomes(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Self {
        let acc: Vec<f64> = outcomes.iter().map(SeedOutcome::final_accuracy).collect();
        let n = acc.len().max(1) as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let std = (acc.len() > 1).then(|| (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        let conv: Vec<Option<f64>> = outcomes.iter().map(|o| o.convergence_minutes(cfg.target_accuracy)).collect();
        let conv_mean = conv
            .iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let last = |f: fn(&MetricsRow) -> u64| outcomes.iter().map(|o| o.rows.last().map_or(0, f) as f64).sum::<f64>() / n;
        Self {
            run_id: cfg.run_id(),
            mode: cfg.mode.name().to_string(),
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            rounds: cfg.rounds,
            target_accuracy: cfg.target_accuracy,
            final_accuracy: acc,
            final_accuracy_mean: mean,
            final_accuracy_std: std,
            convergence_minutes_per_seed: conv,
            convergence_minutes: conv_mean,
            cum_down_bytes_mean: last(|r| r.cum_down_bytes),
            cum_up_bytes_mean: last(|r| r.cum_up_bytes),
            baseline_run_id: None,
            speedup_ratio: None,
        }
    }

    /// Fills the speedup fields against `baseline`. Leaves the ratio empty
    /// (with a warning) if either run never reached its target.
    pub fn compare_to(&mut self, baseline: &Summary) {
        self.baseline_run_id = Some(baseline.run_id.clone());
        match speedup_ratio(baseline.convergence_minutes, self.convergence_minutes) {
            Ok(r) => self.speedup_ratio = Some(r),
            Err(e) => {
                log::warn!("no speedup for {} vs {}: {e}", self.run_id, baseline.run_id);
                self.speedup_ratio = None;
            }
        }
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs every seed, writes per-seed CSVs and `summary.json`, and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, baseline: Option<&Summary>) -> Result<Summary, ExperimentError> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    let root = cfg.out.join(cfg.run_id());
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let one = |&seed: &u64| run_seed_inner(cfg, seed, Some(&root.join(format!("seed_{seed}"))));
    let outcomes: Vec<SeedOutcome> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(one).collect::<Result<_, _>>()?
    } else {
        cfg.seeds.iter().map(one).collect::<Result<_, _>>()?
    };
    let mut summary = Summary::from_outcomes(cfg, &outcomes);
    if let Some(b) = baseline {
        summary.compare_to(b);
    }
    let path = root.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&path))?;
    Ok(summary)
}

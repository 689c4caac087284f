//! The stages behind the CLI subcommands, each reading and writing plain
//! files in an output directory.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, RunState};
use super::config::{programmatic_oracle, RunConfig};
use super::metrics::{cal_rows, eval_rows, export_metrics, kaa_rows, MetricsRow};
use super::service::{schema_of, AnnotationService};
use crate::cal::{run_cal, CalHistory, Oracle, Pools};
use crate::error::{Error, Result};
use crate::kaa::{run_kaa, KaaHistory};
use crate::model::ModelBundle;
use crate::objectives::{evaluate_accuracy, AccuracyReport};
use crate::synthdata::{generate_bundle, load_bundle, save_bundle, DatasetBundle, Manifest, Partition, Split};

pub const FOUNDATION_FILE: &str = "foundation.kac";
pub const ADAPTED_FILE: &str = "adapted.kac";
pub const KAA_HISTORY_FILE: &str = "kaa_history.json";
pub const CAL_HISTORY_FILE: &str = "cal_history.json";
pub const EVAL_FILE: &str = "eval.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// A run trace on disk, tagged so `export-metrics` can read any of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HistoryFile {
    Kaa { seed: u64, history: KaaHistory },
    Cal { seed: u64, history: CalHistory },
    Eval { seed: u64, split: String, report: AccuracyReport },
}

impl HistoryFile {
    pub fn rows(&self) -> Vec<MetricsRow> {
        match self {
            HistoryFile::Kaa { seed, history } => kaa_rows(history, *seed),
            HistoryFile::Cal { seed, history } => cal_rows(history, *seed),
            HistoryFile::Eval { seed, split, report } => eval_rows(report, split, *seed),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn open_bundle(dir: &Path) -> Result<DatasetBundle> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "bundle directory not found"),
        ));
    }
    load_bundle(dir)
}

pub fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Manifest> {
    let bundle = generate_bundle(&cfg.synth, seed)?;
    ensure_dir(out)?;
    save_bundle(&bundle, out)
}

pub struct KaaOutcome {
    pub checkpoint: Checkpoint,
    pub history: KaaHistory,
}

/// Trains the foundation model and writes its checkpoint, history and
/// metrics to `out`.
pub fn train_kaa(bundle_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<KaaOutcome> {
    let data = open_bundle(bundle_dir)?;
    let (model, history) = run_kaa(&data, &cfg.kaa)?;
    let checkpoint = Checkpoint {
        bundle: model,
        run: RunState {
            t: history.cycles.last().map_or(0, |c| c.t),
            i: history.iterations.last().map_or(0, |r| r.i),
            j: 0,
        },
        rng: RngState::from_seed(cfg.kaa.seed),
        config_hash: cfg.hash()?,
    };
    ensure_dir(out)?;
    save_checkpoint(&checkpoint, &out.join(FOUNDATION_FILE))?;
    let file = HistoryFile::Kaa {
        seed: cfg.kaa.seed,
        history,
    };
    file.save(&out.join(KAA_HISTORY_FILE))?;
    export_metrics(&file.rows(), &out.join(METRICS_FILE))?;
    let HistoryFile::Kaa { history, .. } = file else { unreachable!() };
    Ok(KaaOutcome { checkpoint, history })
}

#[derive(Clone, Debug)]
pub enum OracleMode {
    /// Answers from the bundle's ground truth.
    Auto,
    /// A human labels through the HTTP service on `addr`.
    Serve { addr: SocketAddr, timeout: Option<Duration> },
}

impl std::str::FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "serve" => Ok(Self::Serve {
                addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
                timeout: None,
            }),
            _ => Err(Error::Config(format!("unknown oracle mode {s:?} (expected auto or serve)"))),
        }
    }
}

pub struct CalOutcome {
    pub model: ModelBundle<f32>,
    pub history: CalHistory,
}

fn write_cal(out: &Path, model: &ModelBundle<f32>, history: &CalHistory, base: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let checkpoint = Checkpoint {
        bundle: model.clone(),
        run: RunState {
            j: history.records.last().map_or(0, |r| r.iteration as u64),
            ..base.run
        },
        rng: RngState::from_seed(cfg.cal.seed),
        config_hash: cfg.hash()?,
    };
    save_checkpoint(&checkpoint, &out.join(ADAPTED_FILE))?;
    let file = HistoryFile::Cal {
        seed: cfg.cal.seed,
        history: history.clone(),
    };
    file.save(&out.join(CAL_HISTORY_FILE))?;
    export_metrics(&file.rows(), &out.join(METRICS_FILE))
}

/// Adapts the foundation at `checkpoint` with consistency-based active
/// learning. On failure the completed iterations are still written.
pub fn run_cal_stage(
    bundle_dir: &Path,
    checkpoint: &Path,
    cfg: &RunConfig,
    oracle: &OracleMode,
    out: &Path,
) -> Result<CalOutcome> {
    let data = open_bundle(bundle_dir)?;
    let base = load_checkpoint(checkpoint, Some(&cfg.hash()?))?;
    if base.bundle.config.class_counts != data.config.class_counts() {
        return Err(Error::Config(format!(
            "checkpoint heads {:?} do not match the bundle's classes {:?}",
            base.bundle.config.class_counts,
            data.config.class_counts()
        )));
    }
    ensure_dir(out)?;
    let service;
    let mut auto;
    let mut served;
    let oracle: &mut dyn Oracle = match oracle {
        OracleMode::Auto => {
            auto = programmatic_oracle(&data, cfg.decline_rate, cfg.cal.seed)?;
            &mut auto
        }
        OracleMode::Serve { addr, timeout } => {
            let pool = data
                .examples
                .iter()
                .filter(|e| matches!(e.partition, Partition::Subset { split: Split::Train, .. }))
                .count();
            let total: usize = cfg.cal.resolve_budgets(pool).iter().sum();
            service = AnnotationService::start(*addr, schema_of(&data.config), total)?;
            eprintln!("annotation service at {}", service.base_url());
            served = service.oracle(&data, cfg.cal.seed, *timeout);
            &mut served
        }
    };
    let mut pools = Pools::from_bundle(&data, cfg.cal.kappa, cfg.cal.seed, oracle)?;
    let budgets = cfg.cal.resolve_budgets(pools.unlabeled().len());
    match run_cal(&base.bundle, &data, &mut pools, &budgets, oracle, &cfg.cal) {
        Ok(run) => {
            write_cal(out, &run.model, &run.history, &base, cfg)?;
            Ok(CalOutcome {
                model: run.model,
                history: run.history,
            })
        }
        Err(abort) => {
            write_cal(out, &abort.partial.model, &abort.partial.history, &base, cfg)?;
            Err(abort.error)
        }
    }
}

/// Accuracy of `model` on every example of `split`: `train`, `val` and
/// `test` pool the single-label subsets (only each subset's own task is
/// scored), `joint` scores every task of the joint pool.
pub fn evaluate_split(model: &ModelBundle<f32>, data: &DatasetBundle, split: &str) -> Result<AccuracyReport> {
    let examples: Vec<_> = match split {
        "joint" => data.joint(),
        _ => {
            let s = Split::ALL
                .into_iter()
                .find(|s| s.name() == split)
                .ok_or_else(|| Error::Config(format!("unknown split {split:?} (expected train, val, test or joint)")))?;
            data.examples
                .iter()
                .filter(|e| matches!(e.partition, Partition::Subset { split, .. } if split == s))
                .collect()
        }
    };
    let images: Vec<&[f32]> = examples.iter().map(|e| e.image.as_slice()).collect();
    let labels: Vec<Vec<i32>> = examples.iter().map(|e| e.visible_labels()).collect();
    let tasks: Vec<usize> = (0..model.num_tasks()).collect();
    evaluate_accuracy(model, &images, &labels, &tasks)
}

pub fn eval_stage(bundle_dir: &Path, checkpoint: &Path, split: &str, seed: u64, out: &Path) -> Result<AccuracyReport> {
    let data = open_bundle(bundle_dir)?;
    let ck = load_checkpoint(checkpoint, None)?;
    let report = evaluate_split(&ck.bundle, &data, split)?;
    ensure_dir(out)?;
    let file = HistoryFile::Eval {
        seed,
        split: split.into(),
        report: report.clone(),
    };
    file.save(&out.join(EVAL_FILE))?;
    export_metrics(&file.rows(), &out.join(METRICS_FILE))?;
    Ok(report)
}

/// Merges the rows of every history file into one CSV.
pub fn export_histories(histories: &[PathBuf], out: &Path) -> Result<usize> {
    let mut rows = Vec::new();
    for p in histories {
        rows.extend(HistoryFile::load(p)?.rows());
    }
    export_metrics(&rows, out)?;
    Ok(rows.len())
}

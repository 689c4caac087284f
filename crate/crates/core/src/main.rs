use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use kaa_cal::cal::Sampler;
use kaa_cal::harness::config::RunConfig;
use kaa_cal::harness::gradcheck::{check_model_gradients, Precision};
use kaa_cal::harness::pipeline::{
    eval_stage, export_histories, gen_data, run_cal_stage, train_kaa, OracleMode, FOUNDATION_FILE,
};
use kaa_cal::{Error, Result};

#[derive(Parser)]
#[command(name = "kaa-cal", version, about = "Cyclical knowledge accumulation and consistency-based active learning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file for export-metrics).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData,
    /// Train the foundation model with cyclical knowledge accumulation.
    TrainKaa {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Adapt a foundation checkpoint with active learning.
    RunCal {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated per-iteration budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long)]
        sampler: Option<Sampler>,
        #[arg(long, default_value = "auto")]
        oracle: String,
        /// Listen address of the annotation service.
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Seconds to wait for one annotation batch.
        #[arg(long)]
        annotation_timeout: Option<u64>,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check analytic gradients of the training losses on a toy model.
    GradCheck {
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Write metrics CSV from saved run histories.
    ExportMetrics {
        #[arg(long = "history", required = true)]
        histories: Vec<PathBuf>,
    },
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let seed = common.seed.unwrap_or(cfg.kaa.seed);
    match cli.command {
        Command::GenData => {
            let out = out_dir(common);
            let m = gen_data(&cfg, seed, &out)?;
            println!("wrote bundle {} ({} blobs)", out.display(), m.blobs.len());
        }
        Command::TrainKaa { bundle } => {
            let out = out_dir(common);
            let r = train_kaa(&bundle, &cfg, &out)?;
            let last = r.history.cycles.last().map_or(0.0, |c| c.foundation_average());
            println!(
                "wrote {} after {} cycles, val accuracy {last:.4}",
                out.join(FOUNDATION_FILE).display(),
                r.history.cycles.len()
            );
        }
        Command::RunCal {
            bundle,
            checkpoint,
            budgets,
            sampler,
            oracle,
            listen,
            annotation_timeout,
        } => {
            let mut cfg = cfg;
            if let Some(b) = budgets {
                cfg.cal.budgets = Some(b);
            }
            if let Some(s) = sampler {
                cfg.cal.sampler = s;
            }
            cfg.validate()?;
            let mode = match oracle.parse::<OracleMode>()? {
                OracleMode::Serve { .. } => OracleMode::Serve {
                    addr: listen,
                    timeout: annotation_timeout.map(Duration::from_secs),
                },
                m => m,
            };
            let r = run_cal_stage(&bundle, &checkpoint, &cfg, &mode, &out_dir(common))?;
            for rec in &r.history.records {
                println!(
                    "iteration {} labeled {} test accuracy {:.4}",
                    rec.iteration,
                    rec.labeled_count,
                    rec.average()
                );
            }
        }
        Command::Eval {
            bundle,
            checkpoint,
            split,
        } => {
            let r = eval_stage(&bundle, &checkpoint, &split, seed, &out_dir(common))?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::GradCheck { precision } => {
            let r = check_model_gradients(precision, seed)?;
            println!(
                "max relative error {:.3e} (tolerance {:.0e}, {} coordinates)",
                r.max_relative_error(),
                r.tolerance,
                r.coords_checked
            );
            if !r.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:.3e} > {:.0e}",
                    r.max_relative_error(),
                    r.tolerance
                )));
            }
        }
        Command::ExportMetrics { histories } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));
            let n = export_histories(&histories, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

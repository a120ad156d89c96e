use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use cpl_core::diagnostics::{conformal_calibrate, ConformalQuantiles};
use cpl_core::reference::build_dataset;
use cpl_core::trainer::{run_training_with, single_threaded};
use cpl_core::{evaluate_one_step, evaluate_rollout, Checkpoint, Dataset, MetricsRecord, RunConfig, Stepper};

const SINGLE_THREAD_ENV: &str = "CPL_SINGLE_THREAD";

#[derive(Parser)]
#[command(name = "cpl", version, about = "Constraint-projected learning for 1-D viscous Burgers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fine reference and write a coarse dataset.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the snapshots as CSV next to the dataset.
        #[arg(long)]
        export_csv: bool,
    },
    /// Train a predictor; writes the checkpoint, `<out>.best` and `<out>.metrics.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// One-step metrics and conformal thresholds.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluation settings (projection chain, bounds, coverage target).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Autoregressive rollout metrics per step.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a report directory as CSV or JSON.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    kind: String,
    checkpoint: String,
    dataset: String,
    horizon: usize,
    sequences: usize,
    model: MetricsRecord,
    classical: MetricsRecord,
    conformal: ConformalQuantiles,
}

fn single_thread_requested() -> bool {
    std::env::var(SINGLE_THREAD_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate_data(config: &Path, out: &Path, export_csv: bool) -> anyhow::Result<()> {
    let cfg = load_config(Some(config))?;
    let data = build_dataset(&cfg.scenarios(), cfg.seq_len)?;
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    info!("{} sequences x {} snapshots, N={}, dt={:e}", data.len(), data.seq_len, data.n_cells(), data.mesh.dt);
    if export_csv {
        data.export_csv(&with_suffix(out, ".csv"))?;
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(Some(config))?;
    let dataset = Dataset::load(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let mut tc = cfg.train_config();
    tc.deterministic |= single_thread_requested();
    let resume = resume.map(Checkpoint::load).transpose()?;
    let (params, report) = run_training_with(&dataset, &tc, resume, |epoch, ck| {
        info!("epoch {epoch}: checkpoint");
        ck.save(out)
    })?;
    if let Some(reason) = &report.aborted {
        log::warn!("training stopped early: {reason}");
    }
    Checkpoint { params, step_count: report.step_count }.save(out)?;
    if let Some(best) = &report.best_params {
        Checkpoint { params: best.clone(), step_count: report.step_count }.save(&with_suffix(out, ".best"))?;
        info!("best validation MSE {:e} at epoch {:?}", report.best_val_mse, report.best_epoch);
    }
    report.save_csv(&with_suffix(out, ".metrics.csv"))?;
    Ok(())
}

fn write_report(dir: &Path, records: &[MetricsRecord], summary: &Summary) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    data: &Path,
    report: &Path,
    config: Option<&Path>,
    horizon: Option<usize>,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let ec = cfg.eval_config();
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let dataset = Dataset::load(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let model = Stepper::Model(&ck.params);
    let classical = Stepper::Classical(ck.params.arch.scheme());
    let one = evaluate_one_step(model, &dataset, &ec)?;
    let roll_h = horizon.unwrap_or(dataset.seq_len - 1);
    if roll_h == 0 || roll_h >= dataset.seq_len {
        bail!("horizon {roll_h} outside 1..{}", dataset.seq_len);
    }
    let roll = evaluate_rollout(model, &dataset, roll_h, &ec)?;
    let conformal = conformal_calibrate(&one.abs_errors[0], &roll.abs_errors, cfg.coverage_target)?;
    let (kind, records, baseline) = match horizon {
        None => ("evaluate", one.records, evaluate_one_step(classical, &dataset, &ec)?.records),
        Some(h) => ("rollout", roll.records, evaluate_rollout(classical, &dataset, h, &ec)?.records),
    };
    let agg = *records.last().expect("aggregate row");
    info!("{kind}: mse {:e}, mae {:e}, mass drift {:e}, q_global {:e}", agg.mse_cpl, agg.mae_cpl, agg.mass_drift, conformal.q_global);
    let summary = Summary {
        kind: kind.into(),
        checkpoint: checkpoint.display().to_string(),
        dataset: data.display().to_string(),
        horizon: roll_h,
        sequences: dataset.len(),
        model: agg,
        classical: *baseline.last().expect("aggregate row"),
        conformal,
    };
    write_report(report, &records, &summary)
}

fn report(dir: &Path, format: Format) -> anyhow::Result<()> {
    let text = fs::read_to_string(dir.join("summary.json")).with_context(|| format!("no summary.json in {}", dir.display()))?;
    let summary: Summary = serde_json::from_str(&text)?;
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let rows = rdr.deserialize().collect::<Result<Vec<MetricsRecord>, _>>()?;
    let stdout = std::io::stdout();
    match format {
        Format::Json => {
            let doc = serde_json::json!({ "summary": summary, "steps": rows });
            serde_json::to_writer_pretty(stdout.lock(), &doc)?;
            println!();
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(stdout.lock());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { config, out, export_csv } => generate_data(&config, &out, export_csv),
        Command::Train { config, data, out, resume } => train(&config, &data, &out, resume.as_deref()),
        Command::Evaluate { checkpoint, data, report, config } => evaluate(&checkpoint, &data, &report, config.as_deref(), None),
        Command::Rollout { checkpoint, data, horizon, report, config } => {
            evaluate(&checkpoint, &data, &report, config.as_deref(), Some(horizon))
        }
        Command::Report { input, format } => report(&input, format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = if single_thread_requested() {
        single_threaded(|| run(cli)).map_err(anyhow::Error::from).and_then(|r| r)
    } else {
        run(cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line interface: training, evaluation, multi-seed experiments,
//! ablations, and plot-ready reports.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tricrlad::checkpoint::Checkpoint;
use tricrlad::config::RunConfig;
use tricrlad::dataset::load_table;
use tricrlad::error::{Error, Result};
use tricrlad::harness;
use tricrlad::trainer;

#[derive(Parser)]
#[command(
    name = "tricrlad",
    about = "Semi-supervised anomaly detection for tabular sensor signals via causal reinforcement learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override any config key, e.g. --set gamma=0.95 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for pair in &self.overrides {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a single seed and write its checkpoint and step log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed to train; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a trained checkpoint and report AUC-ROC.
    Eval {
        /// Checkpoint file produced by `train` or `experiment`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Delimited text dataset with a 0/1 label column.
        #[arg(long)]
        data: PathBuf,
        /// Label column name.
        #[arg(long, default_value = "label")]
        label_col: String,
        /// Cell delimiter.
        #[arg(long, default_value = ",")]
        delimiter: String,
        /// Write per-point scores (id,score) to this file.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Write per-point feature embeddings to this file.
        #[arg(long)]
        export_embeddings: Option<PathBuf>,
    },
    /// Train every configured seed and aggregate metrics.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a multi-seed experiment with one ablation flag enabled.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of: fixed_threshold, simple_reward, no_causal.
        #[arg(long)]
        flag: String,
    },
    /// Emit plot-ready data from a step log.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum ReportKind {
    /// Histogram of unlabeled-pool visit counts.
    Diversity {
        #[arg(long)]
        log: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold trace over steps.
    Threshold {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_delimiter(s: &str) -> Result<char> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::config("delimiter must be a single character".to_string())),
    }
}

fn with_output(
    path: &Option<PathBuf>,
    f: impl FnOnce(&mut dyn std::io::Write) -> Result<()>,
) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = std::io::BufWriter::new(std::fs::File::create(p)?);
            f(&mut file)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let cfg = config.load()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let out = trainer::train(&cfg, seed)?;
            println!("seed {}: test AUC-ROC {:.4}", out.seed, out.test_auc);
            println!("checkpoint: {}", out.checkpoint_path.display());
            if let Some(log) = &out.step_log_path {
                println!("step log:   {}", log.display());
            }
            println!("runtime:    {:.1}s", out.runtime_seconds);
        }
        Command::Eval {
            checkpoint,
            data,
            label_col,
            delimiter,
            scores_out,
            export_embeddings,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scorer = harness::Scorer::from_checkpoint(&ckpt)?;
            let dataset = load_table(&data, &label_col, parse_delimiter(&delimiter)?)?;
            let scores = scorer.score(&dataset)?;
            let auc = harness::auc_roc(&scores, &dataset.labels())?;
            println!("{}: {} points, test AUC-ROC {:.4}", dataset.name, dataset.len(), auc);

            if let Some(path) = &scores_out {
                with_output(&Some(path.clone()), |w| {
                    writeln!(w, "id,score")?;
                    for (p, s) in dataset.points.iter().zip(&scores) {
                        writeln!(w, "{},{}", p.id, s)?;
                    }
                    Ok(())
                })?;
                println!("scores written to {}", path.display());
            }
            if let Some(path) = &export_embeddings {
                let embeddings = scorer.embeddings(&dataset)?;
                with_output(&Some(path.clone()), |w| {
                    harness::write_embeddings(&dataset, &embeddings, w)
                })?;
                println!("embeddings written to {}", path.display());
            }
        }
        Command::Experiment { config } => {
            let cfg = config.load()?;
            let metrics = harness::run_experiment(&cfg)?;
            for r in &metrics.seed_results {
                println!("seed {}: AUC {:.4}", r.seed, r.test_auc);
            }
            println!(
                "{} [{}]: mean AUC {:.4} ± {:.4} over {} seeds ({:.1}s)",
                metrics.dataset,
                metrics.ablation,
                metrics.mean_auc,
                metrics.std_auc,
                metrics.seed_results.len(),
                metrics.runtime_seconds
            );
        }
        Command::Ablate { config, flag } => {
            let mut cfg = config.load()?;
            cfg.ablation.enable(&flag)?;
            let metrics = harness::run_experiment(&cfg)?;
            println!(
                "{} [{}]: mean AUC {:.4} ± {:.4} over {} seeds",
                metrics.dataset,
                metrics.ablation,
                metrics.mean_auc,
                metrics.std_auc,
                metrics.seed_results.len()
            );
        }
        Command::Report { kind } => match kind {
            ReportKind::Diversity { log, out } => {
                let records = harness::read_step_log(&log)?;
                with_output(&out, |w| harness::write_diversity_report(&records, w))?;
            }
            ReportKind::Threshold { log, out } => {
                let records = harness::read_step_log(&log)?;
                with_output(&out, |w| harness::write_threshold_report(&records, w))?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

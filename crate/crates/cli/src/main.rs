use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use memaudit_cli::commands;
use memaudit_cli::config::{ConfigError, ExperimentConfig};
use memaudit_cli::gpt2_table;

/// Fine-tuning memorization workbench: trains a mini transformer under
/// selectable trainable-parameter strategies and audits memorization with
/// membership inference and canary exposure.
#[derive(Parser)]
#[command(name = "memaudit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: pretrain reference, fine-tune grid, attacks, reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip grid cells that already completed.
        #[arg(long)]
        resume: bool,
        /// Parallel worker threads for grid cells (overrides run.workers).
        #[arg(long)]
        workers: Option<usize>,
        /// Master seed (overrides run.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the reference model only.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a single (strategy, lr, repeat) fine-tuning cell.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Membership inference of a checkpoint against a reference checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Write the attack report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pareto frontier and phase segmentation from a metrics.csv.
    Analyze {
        #[arg(long)]
        metrics: PathBuf,
        /// Also write pareto.svg / phases.txt / metrics.csv here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-merge per-cell outputs into the top-level reports.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Trainable-parameter counts.
    CountParams {
        /// Print the exact table at the GPT-2 base shape.
        #[arg(long)]
        gpt2_table: bool,
        /// Print counts for the model and strategies of this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic email-like corpus file.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit codes: 0 ok, 1 config error, 2 runtime failure in ≥1 cell, 3 I/O.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<memaudit_core::Error>() {
            if matches!(core, memaudit_core::Error::Io { .. }) {
                return 3;
            }
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn load_config(path: &PathBuf, seed: Option<u64>, workers: Option<usize>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(w) = workers {
        if w == 0 {
            return Err(ConfigError::Invalid {
                path: path.display().to_string(),
                msg: "--workers must be positive".into(),
            }
            .into());
        }
        cfg.workers = w;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Run {
            config,
            resume,
            workers,
            seed,
        } => {
            let cfg = load_config(&config, seed, workers)?;
            let summary = commands::cmd_run(&cfg, resume)?;
            println!(
                "run complete: {} cells ({} run, {} skipped, {} failed) -> {}",
                summary.cells_total,
                summary.cells_run,
                summary.cells_skipped,
                summary.failures.len(),
                summary.out_dir.display()
            );
            if !summary.failures.is_empty() {
                for f in &summary.failures {
                    eprintln!("failed: {f}");
                }
                return Ok(2);
            }
            Ok(0)
        }
        Cmd::Pretrain { config, seed } => {
            let cfg = load_config(&config, seed, None)?;
            let path = commands::cmd_pretrain(&cfg)?;
            println!("reference written to {}", path.display());
            Ok(0)
        }
        Cmd::Finetune {
            config,
            strategy,
            lr,
            repeat,
            seed,
        } => {
            let cfg = load_config(&config, seed, None)?;
            let traj = commands::cmd_finetune(&cfg, &strategy, lr, repeat)?;
            let last = traj.records.last();
            println!(
                "finetune {} lr={lr} rep={repeat}: {} epochs, final val ppl {:.3}",
                traj.strategy,
                traj.records.len(),
                last.map_or(f64::NAN, |r| r.val_ppl)
            );
            Ok(0)
        }
        Cmd::Attack {
            config,
            model,
            reference,
            out,
        } => {
            let cfg = load_config(&config, None, None)?;
            let report = commands::cmd_attack(&cfg, &model, &reference, out.as_deref())?;
            println!(
                "recall {:.4} realized_fpr {:.4} log_threshold {:.6} members {} nonmembers {}",
                report.recall,
                report.realized_fpr,
                report.log_threshold,
                report.n_members,
                report.n_nonmembers
            );
            Ok(0)
        }
        Cmd::Analyze { metrics, out_dir } => {
            let frontier = commands::cmd_analyze(&metrics, out_dir.as_deref())?;
            println!("pareto frontier ({} points):", frontier.len());
            for p in &frontier {
                println!(
                    "  {} lr={} epoch={} val_ppl={:.4} recall={:.2}%",
                    p.strategy,
                    p.lr,
                    p.epoch,
                    p.val_ppl,
                    p.mia_recall.unwrap_or(f64::NAN) * 100.0
                );
            }
            Ok(0)
        }
        Cmd::Report { config } => {
            let cfg = load_config(&config, None, None)?;
            let dir = commands::cmd_report(&cfg)?;
            println!("reports written to {}", dir.display());
            Ok(0)
        }
        Cmd::CountParams { gpt2_table: table, config } => {
            if table {
                print!("{}", gpt2_table::gpt2_table());
            }
            if let Some(path) = &config {
                let cfg = load_config(path, None, None)?;
                // Vocabulary size depends on the data; report with a
                // placeholder consistent with the configured tokenizer cap.
                let model_cfg = cfg.model_config(match cfg.tokenizer {
                    memaudit_core::data::TokenizeMode::Char => 128,
                    memaudit_core::data::TokenizeMode::Word { max_vocab } => max_vocab + 13,
                });
                print!("{}", gpt2_table::table_for(&model_cfg, &cfg.strategies)?);
            }
            if !table && config.is_none() {
                print!("{}", gpt2_table::gpt2_table());
            }
            Ok(0)
        }
        Cmd::GenCorpus { out, docs, seed } => {
            commands::cmd_gen_corpus(&out, docs, seed)?;
            println!("wrote {docs} documents to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

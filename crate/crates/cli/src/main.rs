use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::error;

use selfrobust_core::advrobust::AttackConfig;
use selfrobust_core::harness::config::ExperimentKind;
use selfrobust_core::harness::run::{
    eval_adv_checkpoint, eval_corruptions_checkpoint, init_thread_pool, run_experiment,
};
use selfrobust_core::harness::ExperimentConfig;
use selfrobust_core::report::EvalReport;

#[derive(Parser)]
#[command(name = "selfrobust", version, about = "Self-supervised auxiliary losses for robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train a model and evaluate it.
    TrainAdv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model against PGD.
    EvalAdv {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated ε values in units of 1/255.
        #[arg(long, value_delimiter = ',')]
        eps_sweep: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Step size in units of 1/256.
        #[arg(long, default_value_t = 2.0)]
        alpha_256: f64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on every corruption and severity.
    EvalCorruptions {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the label-corruption sweep.
    RunLabelnoise {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the one-class detection protocol.
    RunOod {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model and evaluate it on the corruption grid.
    RunCorruptions {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a report JSON file.
    Report {
        path: PathBuf,
        /// Print the CSV table instead of a summary.
        #[arg(long)]
        csv: bool,
    },
}

fn run_kind(config: &Path, expected: ExperimentKind) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.kind != expected {
        bail!(
            "{} has kind {:?}; this subcommand runs {:?}",
            config.display(),
            cfg.kind,
            expected
        );
    }
    let out = run_experiment(config)?;
    println!("{}", out.report.to_json()?);
    eprintln!("artifacts in {}", out.dir.display());
    Ok(())
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    let json = report.to_json()?;
    match out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn summarize(report: &EvalReport, csv: bool) -> String {
    if csv {
        if let Some(g) = &report.corruption {
            return g.to_csv();
        }
        if let Some(c) = &report.label_noise {
            return c.to_csv();
        }
        if let Some(d) = &report.detection {
            return d.to_csv();
        }
    }
    let mut lines = vec![format!("experiment: {}", report.experiment)];
    if let Some(a) = report.clean_accuracy {
        lines.push(format!("clean accuracy: {a:.4}"));
    }
    for r in &report.robust {
        lines.push(format!(
            "robust accuracy at eps {:.2}/255 ({} steps): {:.4}",
            r.epsilon * 255.0,
            r.steps,
            r.accuracy
        ));
    }
    if let Some(g) = &report.corruption {
        for (k, v) in &g.per_kind {
            lines.push(format!("{k}: {v:.4}"));
        }
        lines.push(format!("mean corruption accuracy: {:.4}", g.grand_mean));
    }
    if let Some(c) = &report.label_noise {
        lines.push(format!("mean error over {} strengths: {:.4}", c.strengths.len(), c.mean_error));
    }
    if let Some(d) = &report.detection {
        for m in &d.methods {
            lines.push(format!("{}: mean AUROC {:.4}", m.method, m.mean_auroc));
        }
    }
    lines.extend(report.notes.iter().map(|n| format!("note: {n}")));
    lines.join("\n")
}

fn main_inner(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::TrainAdv { config } => run_kind(&config, ExperimentKind::Adv),
        Command::RunLabelnoise { config } => run_kind(&config, ExperimentKind::Labelnoise),
        Command::RunOod { config } => run_kind(&config, ExperimentKind::Ood),
        Command::RunCorruptions { config } => run_kind(&config, ExperimentKind::Corruptions),
        Command::EvalAdv {
            ckpt,
            eps_sweep,
            steps,
            alpha_256,
            out,
        } => {
            let base = AttackConfig {
                steps,
                alpha: alpha_256 / 256.0,
                ..AttackConfig::eval_20()
            };
            emit(&eval_adv_checkpoint(&ckpt, &base, &eps_sweep)?, out.as_deref())
        }
        Command::EvalCorruptions { ckpt, out } => {
            emit(&eval_corruptions_checkpoint(&ckpt)?, out.as_deref())
        }
        Command::Report { path, csv } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            println!("{}", summarize(&EvalReport::from_json(&text)?, csv));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

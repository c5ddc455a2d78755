use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eve_lm::config::RunConfig;
use eve_lm::mceval::EvalConfig;
use eve_lm::run;
use eve_lm::{Error, Result};

/// Environment variable that overrides the output directory.
const OUT_ENV: &str = "EVELM_OUT";

#[derive(Parser)]
#[command(
    name = "evelm",
    version,
    about = "Train and evaluate variational-FFN language models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and keep the best checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on its validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to evaluate on instead of the training run's.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Monte Carlo samples for extended metrics.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a matched pair and emit a comparison table and plots.
    Compare {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        eve: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render summary tables from run logs.
    Report {
        /// Run directory, or a directory of run directories.
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>, fallback: &str) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .or(flag)
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(c) => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            let out = out_dir(c.out, Some(&cfg), &format!("runs/{}", cfg.name));
            let s = run::train(&cfg, &out)?;
            println!(
                "selected epoch {} ({}={:.4}); report written to {}",
                s.selected_epoch,
                cfg.train.select_by.name(),
                s.epochs[s.selected_epoch - 1].metric(cfg.train.select_by),
                out.join(run::REPORT_JSON).display()
            );
            println!("{}", serde_json::to_string_pretty(&s.report)?);
            if !s.report.run.finite_ok {
                return Err(Error::NumericGuard(
                    "final report contains non-finite metrics",
                ));
            }
        }
        Cmd::Eval {
            checkpoint,
            data,
            samples,
            common,
        } => {
            let eval = match (&common.config, samples) {
                (None, None) => None,
                (cfg, m) => {
                    let mut e = match cfg {
                        Some(p) => RunConfig::load(p)?.eval,
                        None => EvalConfig::default(),
                    };
                    if let Some(m) = m {
                        e.mc_samples = m;
                    }
                    Some(e)
                }
            };
            let report = run::evaluate_checkpoint(&checkpoint, data.as_deref(), eval)?;
            let out = out_dir(common.out, None, "eval");
            std::fs::create_dir_all(&out)?;
            run::write_report(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.run.finite_ok {
                return Err(Error::NumericGuard("report contains non-finite metrics"));
            }
        }
        Cmd::Compare {
            det,
            eve,
            seed,
            out,
        } => {
            let a = load_config(Some(&det), seed)?;
            let b = load_config(Some(&eve), seed)?;
            let out = out_dir(out, None, "runs/compare");
            let s = run::compare(&a, &b, &out)?;
            print!("{}", run::compare_table(&s.rows));
            println!("plots written to {}", out.display());
        }
        Cmd::Report { dir, out } => {
            let text = run::render_report(&dir)?;
            let path = out.unwrap_or_else(|| dir.join("report.md"));
            std::fs::write(&path, &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

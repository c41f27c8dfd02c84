use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use spikeseg::config::RunConfig;
use spikeseg::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "spikeseg", about = "Spiking U-Net segmentation experiments")]
struct Cli {
    /// key=value run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fold to run; all folds when omitted.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate synthetic phantom volumes.
    GenData,
    /// Train the ANN U-Net.
    TrainAnn,
    /// Convert the trained ANN into a threshold-balanced SNN.
    Convert,
    /// Fine-tune the converted SNN with surrogate-gradient BPTT.
    Finetune,
    /// Train an SNN from random initialization.
    TrainDirect,
    /// Evaluate all available models on the test subjects.
    Eval,
    /// Aggregate folds into summary tables.
    Report,
    /// gen-data, then every fold stage, then report.
    All,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let folds: Vec<usize> = match cli.fold {
        Some(f) => vec![f],
        None => (0..cfg.folds).collect(),
    };
    let p = Pipeline::new(cfg.clone(), cfg.out_dir.clone())?;
    std::fs::create_dir_all(&p.out)?;
    std::fs::write(p.out.join("run.cfg"), cfg.to_text())?;
    match cli.command {
        Command::GenData => {
            let files = p.gen_data()?;
            log::info!("wrote {} volumes to {}", files.len(), p.data_dir().display());
        }
        Command::Report => {
            let dir = p.report()?;
            println!("{}", dir.join("table1.csv").display());
        }
        Command::All => {
            p.gen_data()?;
            for &f in &folds {
                p.run_fold(f, true)?;
            }
            p.report()?;
        }
        cmd => {
            for &f in &folds {
                match cmd {
                    Command::TrainAnn => {
                        p.train_ann(f)?;
                    }
                    Command::Convert => {
                        p.convert(f)?;
                    }
                    Command::Finetune => {
                        p.finetune(f)?;
                    }
                    Command::TrainDirect => {
                        p.train_direct(f)?;
                    }
                    Command::Eval => {
                        for (m, d2, d3) in p.eval(f)? {
                            println!("fold {f} {m}: dice2d {d2:.2} dice3d {d3:.2}");
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SPIKESEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

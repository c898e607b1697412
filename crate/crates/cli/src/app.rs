//! Command-line front end shared by the `cpe` binary and in-process callers.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cpe_core::corpus::TaskKind;
use cpe_core::pooling::PoolingKind;
use cpe_core::training::Objective;

use crate::pipeline::{self, Metric};
use crate::ExperimentConfig;

#[derive(Parser)]
#[command(name = "cpe", version, about = "Chunk prediction encoder toolkit")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set pretrain.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic topic corpus to corpus.jsonl.
    GenSynthetic,
    /// Pretrain the encoder; writes checkpoint.bin and pretrain_log.tsv.
    Pretrain {
        #[arg(long)]
        objective: Option<Objective>,
    },
    /// Embed every document; writes embeddings.tsv.
    Embed {
        #[arg(long)]
        pooling: Option<PoolingKind>,
        /// Use a freshly initialized encoder instead of checkpoint.bin.
        #[arg(long)]
        random_init: bool,
    },
    /// Train the MLP head on frozen embeddings; writes clf.bin.
    TrainClf {
        #[arg(long, value_parser = pipeline::parse_task)]
        task: Option<TaskKind>,
    },
    /// Score the held-out split; writes metrics.txt.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "f1")]
        metrics: Vec<Metric>,
    },
    /// Pretrain, embed, classify and score once per chunk length; writes sweep.tsv.
    SweepChunk {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Run the arms concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

/// Runs one command and returns the summary it reports.
pub fn run(cli: Cli) -> Result<String> {
    let mut out = String::new();
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenSynthetic => {
            let path = pipeline::gen_synthetic_cmd(&cfg)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Pretrain { objective } => {
            if let Some(o) = objective {
                cfg.pretrain.objective = o;
            }
            let report = pipeline::pretrain_cmd(&cfg)?;
            let epochs = report.steps.last().map_or(0, |s| s.epoch);
            for e in 1..=epochs {
                writeln!(out, "epoch {e}\tmean loss {}", report.epoch_mean(e).unwrap_or(f64::NAN))?;
            }
            writeln!(
                out,
                "{} steps over {} documents ({} skipped as too short)",
                report.steps.len(),
                report.used,
                report.skipped
            )?;
        }
        Command::Embed { pooling, random_init } => {
            if let Some(p) = pooling {
                cfg.embed.pooling = p;
            }
            let rows = pipeline::embed_cmd(&cfg, random_init)?;
            writeln!(out, "embedded {} documents", rows.len())?;
        }
        Command::TrainClf { task } => {
            let report = pipeline::train_clf_cmd(&cfg, task)?;
            if let Some(loss) = report.epoch_losses.last() {
                writeln!(out, "final epoch loss {loss}")?;
            }
        }
        Command::Eval { metrics } => {
            for (name, value) in pipeline::eval_cmd(&cfg, &metrics)? {
                writeln!(out, "{name}\t{value}")?;
            }
        }
        Command::SweepChunk { sizes, parallel } => {
            if let Some(s) = sizes {
                cfg.sweep.sizes = s;
            }
            cfg.sweep.parallel |= parallel;
            cfg.validate()?;
            writeln!(out, "chunk_len\tmacro_f1\tmicro_f1")?;
            for r in pipeline::sweep_chunk_cmd(&cfg)? {
                writeln!(out, "{}\t{}\t{}", r.chunk_len, r.macro_f1, r.micro_f1)?;
            }
        }
    }
    Ok(out)
}

/// Parses `args` (program name first) and runs the command, as the binary would.
pub fn run_args<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

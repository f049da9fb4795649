//! Verb-style command line over the `tsgen-core` pipeline.
//!
//! Every verb except `summary` takes `--config`, optional `--seed`, repeated
//! `--set key=value` overrides and an output root. Each run writes into a
//! fresh directory `<verb>-<timestamp>-<seed>` that starts with the resolved
//! `config.toml`.
//!
//! Exit codes: 0 on success, 1 for validation or runtime failures, 2 for
//! usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tsgen_core::config::{self, RunConfig};
use tsgen_core::eval::{self, ResultRow};

mod commands;

pub use commands::RESULTS_FILE;

#[derive(Debug, Parser)]
#[command(name = "tsgen", version, about = "Generative time-series classification pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write the synthetic corpus described by `data.synthetic`.
    GenData(Common),
    /// Train one VQ tokenizer per domain of `data.root`.
    TrainTokenizer(Common),
    /// Cross-domain pre-training of the decoder.
    Pretrain(Common),
    /// Fine-tune on `checkpoints.domain`, then evaluate on its test split.
    Finetune(Common),
    /// Evaluate `checkpoints.model` on its fine-tuned domain or, for a
    /// pretrained checkpoint, on every domain.
    Evaluate(Common),
    /// Run the ablation grid in `grid`.
    Grid(Common),
    /// Per-domain token frequency tables.
    Stats(Common),
    /// Mean-pooled decoder states of test prompts, projected to 2-D.
    ExportEmbeddings(Common),
    /// Token-by-token dump of the first training prompt of `checkpoints.domain`.
    DumpPrompt(Common),
    /// Render the results table of a finished run directory.
    Summary {
        run_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_name = "DIR", env = "INSTRUCTTIME_OUT", default_value = "runs")]
    out: PathBuf,
}

/// Parse `argv` (including the program name), run the verb and return the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, common) = match cli.verb {
        Verb::Summary { run_dir } => {
            return match print_summary(&run_dir) {
                Ok(text) => {
                    print!("{text}");
                    0
                }
                Err(e) => {
                    eprintln!("error [summary]: {e:#}");
                    1
                }
            };
        }
        Verb::GenData(c) => ("gen-data", c),
        Verb::TrainTokenizer(c) => ("train-tokenizer", c),
        Verb::Pretrain(c) => ("pretrain", c),
        Verb::Finetune(c) => ("finetune", c),
        Verb::Evaluate(c) => ("evaluate", c),
        Verb::Grid(c) => ("grid", c),
        Verb::Stats(c) => ("stats", c),
        Verb::ExportEmbeddings(c) => ("export-embeddings", c),
        Verb::DumpPrompt(c) => ("dump-prompt", c),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match resolve_config(&common.config, &overrides).and_then(|c| {
        commands::validate(name, &c)?;
        Ok(c)
    }) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error [config]: {e:#}");
            return 1;
        }
    };
    let outcome = create_run_dir(&common.out, name, cfg.seed).and_then(|dir| {
        fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
        commands::execute(name, &cfg, &dir)?;
        Ok(dir)
    });
    match outcome {
        Ok(dir) => {
            println!("{name}: wrote {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error [{name}]: {e:#}");
            1
        }
    }
}

/// Read `path` and apply `overrides` on top of the built-in defaults.
pub fn resolve_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(config::resolve(&text, overrides)?)
}

/// New run directory under `out`. Existing directories are never reused: a
/// second run in the same second gets a numeric suffix.
fn create_run_dir(out: &Path, verb: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{verb}-{stamp}-{seed}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}.{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Aligned text table of the results CSV in `run_dir`, accuracy before F1.
pub fn print_summary(run_dir: &Path) -> Result<String> {
    let path = run_dir.join(RESULTS_FILE);
    if !path.is_file() {
        anyhow::bail!("{} has no {RESULTS_FILE}", run_dir.display());
    }
    let rows = eval::read_results_csv(&path)?;
    Ok(render_table(&rows))
}

fn render_table(rows: &[ResultRow]) -> String {
    if rows.is_empty() {
        return "no results\n".into();
    }
    let metric = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let header = ["domain", "setting", "K", "fraction", "accuracy", "f1"].map(String::from);
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.domain.clone(),
                r.setting.clone(),
                r.k.to_string(),
                r.fraction.to_string(),
                metric(r.accuracy),
                metric(r.f1),
            ]
        })
        .collect();
    let mut widths = header.clone().map(|h| h.len());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let cells: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

//! Command-line front end: `generate`, `run`, `sweep` and `report`.
//!
//! Exit codes: 0 when the run met its stopping rule (or the command had no
//! run to judge), 2 when it hit the iteration cap or failed numerically,
//! 1 on configuration or I/O errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{DatasetSource, RunConfig};
use crate::data;
use crate::error::{FedError, Result};
use crate::harness::{self, RunOutput, RunStatus, RunSummary, SweepCell};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fedadmm", version, about = "Federated learning simulator with inexact ADMM and baselines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set k0=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write CSV shards plus a manifest.
    Generate(ConfigArgs),
    /// Run one algorithm and write its trace and summary.
    Run(ConfigArgs),
    /// Run a grid of instances and write median summaries.
    Sweep(ConfigArgs),
    /// Render a sweep summary CSV as a text table.
    Report {
        /// Path to a sweep summary CSV.
        summary: PathBuf,
    },
}

/// Parse arguments and execute; returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate(args) => cmd_generate(&RunConfig::load(&args.config, &args.overrides)?, out),
        Command::Run(args) => cmd_run(&RunConfig::load(&args.config, &args.overrides)?, out),
        Command::Sweep(args) => cmd_sweep(&RunConfig::load(&args.config, &args.overrides)?, out),
        Command::Report { summary } => cmd_report(&summary, out),
    }
}

/// Write the dataset described by `cfg` to `output_dir`.
pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    if cfg.dataset != DatasetSource::Synthetic {
        return Err(FedError::Config("generate needs dataset = \"synthetic\"".into()));
    }
    let spec = cfg.gen_spec(cfg.m, cfg.n, cfg.seed);
    let dataset = data::generate_linreg(&spec)?;
    let manifest = data::export_dataset(&dataset, &cfg.output_dir, cfg.seed, Some(&spec))?;
    writeln!(
        out,
        "wrote {} shards (d = {}, n = {}) to {}",
        manifest.m,
        manifest.d,
        manifest.n,
        cfg.output_dir.display()
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a RunConfig,
    summary: &'a RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a RunSummary>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    omegas: &'a [(u64, Vec<usize>)],
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &RunOutput, reference: Option<&RunSummary>) -> Result<()> {
    let name = run.summary.algorithm.as_str();
    run.trace.write_csv(fs::File::create(dir.join(format!("trace_{name}.csv")))?)?;
    let file = SummaryFile {
        config: cfg,
        summary: &run.summary,
        reference,
        omegas: &run.omegas,
    };
    fs::write(
        dir.join(format!("summary_{name}.json")),
        serde_json::to_string_pretty(&file)? + "\n",
    )?;
    Ok(())
}

fn status_code(status: RunStatus) -> i32 {
    if status.converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    }
}

/// Run the configured algorithm; baselines are preceded by the FedADMM
/// reference run on the same instance.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let dataset = cfg.dataset()?;
    let opts = cfg.run_options()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;

    let admm = harness::run_fedadmm(&dataset, &opts)?;
    write_run(&cfg.output_dir, cfg, &admm, None)?;
    let run = if cfg.algorithm == crate::AlgorithmKind::FedAdmm {
        admm
    } else {
        match admm.summary.f_final {
            Some(f_ref) if admm.summary.status.converged() => {
                let run = harness::run_baseline(&dataset, cfg.algorithm, &opts, f_ref)?;
                write_run(&cfg.output_dir, cfg, &run, Some(&admm.summary))?;
                run
            }
            _ => {
                writeln!(
                    out,
                    "fedadmm reference run ended with {}; cannot evaluate {}",
                    admm.summary.status.as_str(),
                    cfg.algorithm
                )?;
                return Ok(EXIT_NOT_CONVERGED);
            }
        }
    };
    let s = &run.summary;
    writeln!(
        out,
        "{}: {} after {} iterations, CR {}, f = {}",
        s.algorithm,
        s.status.as_str(),
        s.iterations,
        s.cr,
        s.f_final.map_or_else(|| "n/a".to_string(), |f| format!("{f:.10}")),
    )?;
    if let Some(e) = &s.error {
        writeln!(out, "error: {e}")?;
    }
    Ok(status_code(s.status))
}

pub const SWEEP_CSV: &str = "sweep_summary.csv";
pub const SWEEP_JSON: &str = "sweep_summary.json";

#[derive(Serialize)]
struct SweepFile<'a> {
    config: &'a RunConfig,
    cells: &'a [SweepCell],
}

pub fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let spec = cfg.sweep_spec();
    let cells = harness::median_sweep(
        &spec,
        cfg.workers(),
        |n, m, seed| cfg.build_dataset(m, n, seed),
        |rho, k0, seed| cfg.run_options_for(rho, k0, seed).expect("validated configuration"),
    )?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    harness::write_sweep_csv(&cells, fs::File::create(cfg.output_dir.join(SWEEP_CSV))?)?;
    fs::write(
        cfg.output_dir.join(SWEEP_JSON),
        serde_json::to_string_pretty(&SweepFile { config: cfg, cells: &cells })? + "\n",
    )?;
    writeln!(out, "wrote {} cells to {}", cells.len(), cfg.output_dir.join(SWEEP_CSV).display())?;
    Ok(EXIT_OK)
}

/// Render a CSV file as an aligned text table.
pub fn render_table(path: &Path) -> Result<String> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = vec![reader.headers()?.iter().map(str::to_string).collect::<Vec<_>>()];
    for record in reader.records() {
        rows.push(record?.iter().map(str::to_string).collect());
    }
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        text.push_str(line.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            text.push_str(&rule.join("  "));
            text.push('\n');
        }
    }
    Ok(text)
}

pub fn cmd_report(path: &Path, out: &mut dyn Write) -> Result<i32> {
    out.write_all(render_table(path)?.as_bytes())?;
    Ok(EXIT_OK)
}

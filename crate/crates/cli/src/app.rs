//! Command-line surface: argument definitions and dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{from_table, parse_config, parse_table, ExperimentConfig};
use crate::experiment::{
    build_instance, check_any_finished, constants_report, execute, write_outputs, CliError, Variant, VariantResult,
};
use crate::grid::{expand, parse_axis, set_path};

#[derive(Debug, Parser)]
#[command(name = "bilevel", version, about = "Stochastic bilevel optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Seeds to run, replacing the config's list. Repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory, replacing the config's.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full-batch sampling and no wall-clock column, for reproducible output.
    #[arg(long)]
    pub deterministic: bool,
    /// Worker threads; all cores by default.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration over its seeds.
    Run(RunArgs),
    /// Run the Cartesian product of `--grid` overrides.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// `key=a,b,c` with a dotted key such as `algorithm.alpha`. Repeatable.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Print measured problem constants and the step sizes they admit.
    Constants {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the generated problem instance as text.
    Dump {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.deterministic {
        cfg.deterministic = true;
        cfg.record_time = false;
    }
}

fn finish(results: &[VariantResult], dir: &Path, with_time: bool) -> Result<(), CliError> {
    let written = write_outputs(results, dir, with_time)?;
    let mut out = std::io::stdout().lock();
    for r in results {
        let failed = r.outcomes.iter().filter(|o| o.result.is_err()).count();
        let _ = writeln!(out, "{}: {} seeds, {} failed", r.name, r.outcomes.len(), failed);
    }
    if let Some(summary) = written.last() {
        let _ = writeln!(out, "summary: {}", summary.display());
    }
    check_any_finished(results)
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = parse_config(&read(&args.config)?)?;
    apply_overrides(&mut cfg, args);
    let variant = Variant {
        name: cfg.algorithm.spec().name(),
        config: cfg.clone(),
    };
    let results = execute(&[variant], args.jobs)?;
    finish(&results, &cfg.output_dir, cfg.record_time)
}

/// Builds the sweep variants: each grid point applied to the base document.
pub fn sweep_variants(text: &str, grid: &[String], args: &RunArgs) -> Result<Vec<Variant>, CliError> {
    let base = parse_table(text)?;
    // Validate the base alone so its errors are not blamed on the grid.
    parse_config(text)?;
    let axes = grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<_>, _>>()?;
    let mut variants = Vec::new();
    for (label, assigns) in expand(&axes) {
        let mut table = base.clone();
        for (key, value) in assigns {
            set_path(&mut table, &key, value)?;
        }
        let mut cfg = from_table(table)?;
        apply_overrides(&mut cfg, args);
        variants.push(Variant {
            name: format!("{}_{}", cfg.algorithm.spec().name(), label),
            config: cfg,
        });
    }
    Ok(variants)
}

fn sweep(args: &RunArgs, grid: &[String]) -> Result<(), CliError> {
    let text = read(&args.config)?;
    let variants = sweep_variants(&text, grid, args)?;
    let mut base = parse_config(&text)?;
    apply_overrides(&mut base, args);
    let results = execute(&variants, args.jobs)?;
    finish(&results, &base.output_dir, base.record_time)
}

fn constants(config: &Path, seed: u64) -> Result<(), CliError> {
    let cfg = parse_config(&read(config)?)?;
    print!("{}", constants_report(&cfg, seed)?);
    Ok(())
}

fn dump(config: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = parse_config(&read(config)?)?;
    let inst = build_instance(&cfg, seed)?;
    let io_err = |source| CliError::Io {
        path: out.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(fs::File::create(out).map_err(io_err)?);
    inst.write_text(&mut w).and_then(|_| w.flush()).map_err(io_err)
}

/// Runs a parsed command line and returns the process exit code.
pub fn main(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep { run, grid } => sweep(run, grid),
        Command::Constants { config, seed } => constants(config, *seed),
        Command::Dump { config, seed, out } => dump(config, *seed, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

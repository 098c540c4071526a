//! Running configured experiments and writing traces and summaries.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bilevel_core::algorithms::{Init, RunOptions, RunTrace};
use bilevel_core::hyperclean::{generate_blobs, HypercleanProblem, REFERENCE_LOWER_STEPS};
use bilevel_core::oracle::{HypergradientReference, Vector};
use bilevel_core::synthetic::{generate_dataset, SyntheticProblem};
use bilevel_core::textfmt;
use bilevel_core::theory::{measure_profile, theorem1_params, theorem2_params};
use bilevel_core::{BilevelProblem, Oracle, RngStream, Sampler};

use crate::config::{ConfigError, ExperimentConfig, ProblemKind};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    /// The problem or algorithm rejected its inputs.
    Setup(bilevel_core::Error),
    /// Every run failed numerically.
    Diverged(String),
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Setup(_) => EXIT_VALIDATION,
            CliError::Diverged(_) => EXIT_DIVERGENCE,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Setup(e) => write!(f, "{e}"),
            CliError::Diverged(msg) => write!(f, "all runs failed: {msg}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

pub enum Instance {
    Synthetic(SyntheticProblem),
    Hyperclean(HypercleanProblem),
}

impl Instance {
    pub fn upper_dim(&self) -> usize {
        match self {
            Instance::Synthetic(p) => p.upper_dim(),
            Instance::Hyperclean(p) => p.upper_dim(),
        }
    }

    pub fn lower_dim(&self) -> usize {
        match self {
            Instance::Synthetic(p) => p.lower_dim(),
            Instance::Hyperclean(p) => p.lower_dim(),
        }
    }

    pub fn write_text<W: Write>(&self, w: W) -> io::Result<()> {
        match self {
            Instance::Synthetic(p) => textfmt::write_synthetic(p, w),
            Instance::Hyperclean(p) => textfmt::write_hyperclean(p, w),
        }
    }
}

/// Loads or generates the problem instance for one seed. Data comes from
/// stream 0 of the data seed; sampling uses stream 1 of the run seed.
pub fn build_instance(cfg: &ExperimentConfig, seed: u64) -> Result<Instance, CliError> {
    let pc = &cfg.problem;
    if let Some(path) = &pc.file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        return match pc.kind {
            ProblemKind::Synthetic => textfmt::parse_synthetic(&text).map(Instance::Synthetic),
            ProblemKind::Hyperclean => textfmt::parse_hyperclean(&text).map(Instance::Hyperclean),
        }
        .map_err(CliError::Setup);
    }
    let mut rng = RngStream::new(pc.data_seed.unwrap_or(seed), 0);
    match pc.kind {
        ProblemKind::Synthetic => {
            let w0 = Vector::from_vec(pc.w0_full());
            generate_dataset(&mut rng, &w0, &pc.synthetic()).map(Instance::Synthetic)
        }
        ProblemKind::Hyperclean => generate_blobs(&mut rng, &pc.blobs()).map(Instance::Hyperclean),
    }
    .map_err(CliError::Setup)
}

fn init_for(cfg: &ExperimentConfig, inst: &Instance) -> Result<Init, CliError> {
    let mut init = Init::zeros(inst.upper_dim(), inst.lower_dim());
    if !cfg.init.x0.is_empty() {
        if cfg.init.x0.len() != inst.upper_dim() {
            return Err(CliError::Config(ConfigError::Invalid {
                key: "init.x0".into(),
                message: format!("has length {}, the problem needs {}", cfg.init.x0.len(), inst.upper_dim()),
            }));
        }
        init.x0 = Vector::from_vec(cfg.init.x0.clone());
    }
    Ok(init)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Result<RunTrace, String>,
    /// Problem-specific end-of-run metrics, in a fixed order per kind.
    pub metrics: Vec<(&'static str, f64)>,
}

fn drive<P>(cfg: &ExperimentConfig, problem: &P, init: &Init, seed: u64) -> Result<RunTrace, bilevel_core::Error>
where
    P: BilevelProblem + HypergradientReference,
{
    let rng = RngStream::new(seed, 1);
    let mut sampler = if cfg.deterministic {
        Sampler::full_batch(rng)
    } else {
        Sampler::stochastic(rng)
    };
    let opts = RunOptions {
        record_every: cfg.record_every,
        budget: cfg.budget,
    };
    let mut oracle = Oracle::new(problem);
    cfg.algorithm.spec().run(&mut oracle, init, &mut sampler, &opts)
}

fn hyperclean_metrics(p: &HypercleanProblem, x: &Vector) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    if let Ok(y) = p.solve_lower(x, REFERENCE_LOWER_STEPS) {
        if let Ok((acc, f1)) = p.eval_metrics(x, &y) {
            out.push(("test_accuracy", acc));
            out.push(("test_macro_f1", f1));
        }
    }
    let (corrupted, clean) = p.weight_means(x);
    out.push(("weight_corrupted", corrupted));
    out.push(("weight_clean", clean));
    out
}

/// Runs one seed. Numerical failures land in the outcome, not the error.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, CliError> {
    let inst = build_instance(cfg, seed)?;
    let init = init_for(cfg, &inst)?;
    let (result, metrics) = match &inst {
        Instance::Synthetic(p) => (drive(cfg, p, &init, seed), Vec::new()),
        Instance::Hyperclean(p) => {
            let r = drive(cfg, p, &init, seed);
            let m = r.as_ref().map(|t| hyperclean_metrics(p, &t.x)).unwrap_or_default();
            (r, m)
        }
    };
    let result = match result {
        Ok(t) => Ok(t),
        Err(e @ (bilevel_core::Error::InvalidArgument(_) | bilevel_core::Error::Unsupported(_))) => {
            return Err(CliError::Setup(e))
        }
        Err(e) => Err(e.to_string()),
    };
    Ok(SeedOutcome { seed, result, metrics })
}

/// A named configuration within an experiment.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub outcomes: Vec<SeedOutcome>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '-' })
        .collect()
}

pub fn trace_file_name(variant: &str, seed: u64) -> String {
    format!("{}_seed{seed}.csv", sanitize(variant))
}

/// Runs every (variant, seed) pair on a pool of `jobs` threads (all cores
/// when `None`). Results come back in variant then seed order.
pub fn execute(variants: &[Variant], jobs: Option<usize>) -> Result<Vec<VariantResult>, CliError> {
    let work: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Setup(bilevel_core::Error::InvalidArgument(e.to_string())))?;
    let outcomes: Vec<Result<SeedOutcome, CliError>> =
        pool.install(|| work.par_iter().map(|&(i, s)| run_seed(&variants[i].config, s)).collect());
    let mut results: Vec<VariantResult> = variants
        .iter()
        .map(|v| VariantResult {
            name: v.name.clone(),
            outcomes: Vec::new(),
        })
        .collect();
    for (&(i, _), o) in work.iter().zip(outcomes) {
        results[i].outcomes.push(o?);
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Stats { mean, min, max })
    }
}

fn stat_cells(s: Option<Stats>) -> String {
    match s {
        Some(s) => format!("{:e},{:e},{:e}", s.mean, s.min, s.max),
        None => ",,".into(),
    }
}

const BASE_COLUMNS: [&str; 5] = ["final_grad_norm", "final_phi", "total_units", "iterations", "wall_s"];

/// Writes one row per variant with mean/min/max over the seeds that
/// finished. Failed seeds are counted and listed in the last column.
pub fn write_summary<W: Write>(results: &[VariantResult], with_time: bool, mut w: W) -> io::Result<()> {
    let mut metric_names: Vec<&'static str> = Vec::new();
    for r in results {
        for o in &r.outcomes {
            for (name, _) in &o.metrics {
                if !metric_names.contains(name) {
                    metric_names.push(name);
                }
            }
        }
    }
    let mut header = vec!["variant".to_string(), "seeds".into(), "failed".into()];
    for c in BASE_COLUMNS.iter().chain(&metric_names) {
        for s in ["mean", "min", "max"] {
            header.push(format!("{c}_{s}"));
        }
    }
    header.push("failures".into());
    writeln!(w, "{}", header.join(","))?;

    for r in results {
        let done: Vec<&RunTrace> = r.outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
        let column = |f: &dyn Fn(&RunTrace) -> f64| Stats::of(&done.iter().map(|t| f(t)).collect::<Vec<_>>());
        let mut cells = vec![
            r.name.clone(),
            r.outcomes.len().to_string(),
            (r.outcomes.len() - done.len()).to_string(),
            stat_cells(column(&|t| t.last().grad_norm)),
            stat_cells(column(&|t| t.last().phi)),
            stat_cells(column(&|t| t.last().counters.total() as f64)),
            stat_cells(column(&|t| t.iterations as f64)),
            stat_cells(column(&|t| if with_time { t.last().elapsed_s } else { 0.0 })),
        ];
        for name in &metric_names {
            let vals: Vec<f64> = r
                .outcomes
                .iter()
                .filter_map(|o| o.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v))
                .collect();
            cells.push(stat_cells(Stats::of(&vals)));
        }
        let failures: Vec<String> = r
            .outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().err().map(|e| format!("seed {}: {}", o.seed, e)))
            .collect();
        cells.push(failures.join("; ").replace([',', '\n'], " "));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes one trace per (variant, seed) and `summary.csv` into `dir`.
/// Returns the paths written.
pub fn write_outputs(results: &[VariantResult], dir: &Path, with_time: bool) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for r in results {
        for o in &r.outcomes {
            if let Ok(trace) = &o.result {
                let path = dir.join(trace_file_name(&r.name, o.seed));
                let mut w = create(&path)?;
                trace
                    .write_csv(&mut w, with_time)
                    .and_then(|_| w.flush())
                    .map_err(|e| CliError::io(&path, e))?;
                written.push(path);
            }
        }
    }
    let path = dir.join("summary.csv");
    let mut w = create(&path)?;
    write_summary(results, with_time, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Fails with a divergence error only when no run finished.
pub fn check_any_finished(results: &[VariantResult]) -> Result<(), CliError> {
    let all: Vec<&SeedOutcome> = results.iter().flat_map(|r| &r.outcomes).collect();
    if !all.is_empty() && all.iter().all(|o| o.result.is_err()) {
        let first = all[0].result.as_ref().err().cloned().unwrap_or_default();
        return Err(CliError::Diverged(first));
    }
    Ok(())
}

/// The `constants` report for a synthetic instance.
pub fn constants_report(cfg: &ExperimentConfig, seed: u64) -> Result<String, CliError> {
    let inst = build_instance(cfg, seed)?;
    let Instance::Synthetic(p) = inst else {
        return Err(CliError::Setup(bilevel_core::Error::Unsupported(
            "constants are only measured for the synthetic problem".into(),
        )));
    };
    let profile = measure_profile(&p, cfg.theory.radius).map_err(CliError::Setup)?;
    let opts = cfg.theory.options();
    let mut out = format!("profile\n{profile}\n");
    match theorem1_params(&profile, &opts) {
        Ok(t) => out.push_str(&format!("\nconstant-step regime, J = {}\n{t}\n", opts.j)),
        Err(e) => out.push_str(&format!("\nconstant-step regime: not applicable ({e})\n")),
    }
    match theorem2_params(&profile, &opts) {
        Ok(t) => out.push_str(&format!("\nequal-step regime\n{t}\n")),
        Err(e) => out.push_str(&format!("\nequal-step regime: not applicable ({e})\n")),
    }
    Ok(out)
}

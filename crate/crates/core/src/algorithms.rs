//! Outer-loop drivers: the generic double loop, SSGD, and the stocBiO, BSA
//! and TTSA baselines.

use std::io::{self, Write};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimators::{
    assemble_hypergradient, estimate, estimate_ns, ll_sgd, ll_sgd_schedule, sgd_linear_solve, EstimatorConfig, Method,
    WarmState,
};
use crate::oracle::{check_finite, BilevelProblem, ComplexityCounters, HypergradientReference, Oracle, Sampler, Vector};

/// Batch sizes: `s` for lower steps, `d` for Hessian-vector products, `d_g`
/// for the Jacobian term and `d_f` for upper partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batches {
    pub s: usize,
    pub d: usize,
    pub d_g: usize,
    pub d_f: usize,
}

impl Batches {
    pub fn uniform(b: usize) -> Self {
        Self { s: b, d: b, d_g: b, d_f: b }
    }

    fn validate(&self) -> Result<()> {
        if self.s == 0 || self.d == 0 || self.d_g == 0 || self.d_f == 0 {
            return Err(Error::invalid("batch sizes S, D, D_g and D_f must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Init {
    pub x0: Vector,
    pub y0: Vector,
    pub v0: Vector,
}

impl Init {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            x0: Vector::zeros(p),
            y0: Vector::zeros(q),
            v0: Vector::zeros(q),
        }
    }

    fn check<P: BilevelProblem + ?Sized>(&self, problem: &P) -> Result<()> {
        if self.x0.len() != problem.upper_dim() {
            return Err(Error::invalid(format!(
                "x0 has dimension {}, problem expects {}",
                self.x0.len(),
                problem.upper_dim()
            )));
        }
        if self.y0.len() != problem.lower_dim() || self.v0.len() != problem.lower_dim() {
            return Err(Error::invalid(format!(
                "y0 and v0 must have dimension {}",
                problem.lower_dim()
            )));
        }
        check_finite(&self.x0, 0, "x0")?;
        check_finite(&self.y0, 0, "y0")?;
        check_finite(&self.v0, 0, "v0")
    }
}

/// The generic double loop with a pluggable estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Algorithm1Config {
    pub k: usize,
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub s: usize,
    pub estimator: EstimatorConfig,
    /// Start each lower loop from the previous lower iterate instead of `y0`.
    pub warm_start_y: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsgdConfig {
    pub k: usize,
    pub t: usize,
    pub j: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub batches: Batches,
}

/// Warm-started lower loop with a fresh Neumann-series estimate each step.
#[derive(Debug, Clone, PartialEq)]
pub struct StocBioConfig {
    pub k: usize,
    pub t: usize,
    pub j: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub batches: Batches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Bsa,
    Ttsa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub k: usize,
    /// Neumann-series depth of the hypergradient estimate.
    pub j: usize,
    pub eta: f64,
}

impl ScheduleConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("d_alpha", self.d_alpha), ("d_beta", self.d_beta), ("eta", self.eta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k == 0 || self.j == 0 {
            return Err(Error::invalid("K and J must be at least 1"));
        }
        Ok(())
    }
}

/// `α_k = d_α / √(1 + k)`.
pub fn bsa_alpha(d_alpha: f64, k: usize) -> f64 {
    d_alpha / ((1 + k) as f64).sqrt()
}

/// `T_k = ⌈√(k + 1)⌉`, in integer arithmetic.
pub fn bsa_inner_steps(k: usize) -> usize {
    let n = k + 1;
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

/// Inner step size `β_t = d_β / (t + 2)`.
pub fn bsa_beta(d_beta: f64, t: usize) -> f64 {
    d_beta / (t + 2) as f64
}

/// `α_k = d_α / (1 + k)^{3/5}`.
pub fn ttsa_alpha(d_alpha: f64, k: usize) -> f64 {
    d_alpha / ((1 + k) as f64).powf(0.6)
}

/// `β_k = d_β / (1 + k)^{2/5}`.
pub fn ttsa_beta(d_beta: f64, k: usize) -> f64 {
    d_beta / ((1 + k) as f64).powf(0.4)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub elapsed_s: f64,
    pub phi: f64,
    pub grad_norm: f64,
    pub counters: ComplexityCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub x: Vector,
    pub y: Vector,
    pub v: Vector,
    /// Outer iterations actually performed.
    pub iterations: usize,
}

pub const TRACE_HEADER: &str = "iter,elapsed_s,phi,grad_norm,gc_f,gc_g,jv_g,hv_g";

impl RunTrace {
    /// Writes the trace as delimited text. Without `with_time` the elapsed
    /// column is written as `0` so equal runs give equal bytes.
    pub fn write_csv<W: Write>(&self, mut w: W, with_time: bool) -> io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.records {
            let t = if with_time { r.elapsed_s } else { 0.0 };
            writeln!(
                w,
                "{},{},{:e},{:e},{},{},{},{}",
                r.iter, t, r.phi, r.grad_norm, r.counters.gc_f, r.counters.gc_g, r.counters.jv_g, r.counters.hv_g
            )?;
        }
        Ok(())
    }

    pub fn first(&self) -> &TraceRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("traces always hold the initial record")
    }

    /// Total counter units spent when `‖∇Φ‖` first drops to `fraction` of
    /// its initial value, if it does.
    pub fn units_to_threshold(&self, fraction: f64) -> Option<u64> {
        let target = fraction * self.first().grad_norm;
        self.records
            .iter()
            .find(|r| r.grad_norm <= target)
            .map(|r| r.counters.total())
    }

    pub fn reaches(&self, fraction: f64) -> bool {
        self.units_to_threshold(fraction).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Record every `m`-th outer iteration; the last one is always recorded.
    pub record_every: usize,
    /// Stop once the total counter units reach this value.
    pub budget: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            record_every: 1,
            budget: None,
        }
    }
}

struct Recorder<'r> {
    start: Instant,
    opts: &'r RunOptions,
    records: Vec<TraceRecord>,
}

impl<'r> Recorder<'r> {
    fn new(opts: &'r RunOptions) -> Result<Self> {
        if opts.record_every == 0 {
            return Err(Error::invalid("record_every must be at least 1"));
        }
        Ok(Self {
            start: Instant::now(),
            opts,
            records: Vec::new(),
        })
    }

    fn record<P>(&mut self, oracle: &Oracle<'_, P>, k: usize, x: &Vector, force: bool) -> Result<()>
    where
        P: BilevelProblem + HypergradientReference + ?Sized,
    {
        if !force && !k.is_multiple_of(self.opts.record_every) {
            return Ok(());
        }
        if self.records.last().is_some_and(|r| r.iter == k) {
            return Ok(());
        }
        let problem = oracle.problem();
        let phi = problem.phi(x)?;
        let grad_norm = problem.grad_phi(x)?.norm();
        self.records.push(TraceRecord {
            iter: k,
            elapsed_s: self.start.elapsed().as_secs_f64(),
            phi,
            grad_norm,
            counters: oracle.counters(),
        });
        Ok(())
    }

    fn over_budget<P: BilevelProblem + ?Sized>(&self, oracle: &Oracle<'_, P>) -> bool {
        self.opts.budget.is_some_and(|b| oracle.counters().total() >= b)
    }

    fn finish(self, x: Vector, y: Vector, v: Vector, iterations: usize) -> RunTrace {
        RunTrace {
            records: self.records,
            x,
            y,
            v,
            iterations,
        }
    }
}

fn check_steps(pairs: &[(&str, f64)]) -> Result<()> {
    for (name, v) in pairs {
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be non-negative and finite, got {v}")));
        }
    }
    Ok(())
}

fn step_x(x: &mut Vector, alpha: f64, h: &Vector, k: usize) -> Result<()> {
    x.axpy(-alpha, h, 1.0);
    check_finite(x, k, &format!("upper iterate (alpha = {alpha})"))
}

/// The generic double loop: lower SGD, an estimator, then an upper step.
pub fn run_algorithm1<P>(
    oracle: &mut Oracle<'_, P>,
    cfg: &Algorithm1Config,
    init: &Init,
    sampler: &mut Sampler,
    opts: &RunOptions,
) -> Result<RunTrace>
where
    P: BilevelProblem + HypergradientReference + ?Sized,
{
    cfg.estimator.validate()?;
    check_steps(&[("alpha", cfg.alpha)])?;
    if !(cfg.beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {}", cfg.beta)));
    }
    if cfg.s == 0 {
        return Err(Error::invalid("batch size S must be at least 1"));
    }
    init.check(oracle.problem())?;
    let mut rec = Recorder::new(opts)?;
    let mut x = init.x0.clone();
    let mut state = WarmState::new(init.y0.clone(), init.v0.clone());
    let record_tape = cfg.estimator.method == Method::StochasticBp;
    let mut done = 0;
    for k in 0..cfg.k {
        rec.record(oracle, k, &x, k == 0)?;
        if rec.over_budget(oracle) {
            break;
        }
        let h = (|| -> Result<Vector> {
            let y0 = if cfg.warm_start_y { &state.y } else { &init.y0 };
            let (y, tape) = ll_sgd(oracle, &x, y0, cfg.t, cfg.beta, cfg.s, sampler, record_tape)?;
            let h = estimate(&cfg.estimator, oracle, &x, &y, tape.as_ref(), &mut state, sampler)?;
            state.y = y;
            Ok(h)
        })()
        .map_err(|e| e.at_outer_iteration(k))?;
        step_x(&mut x, cfg.alpha, &h, k)?;
        done = k + 1;
    }
    rec.record(oracle, done, &x, true)?;
    Ok(rec.finish(x, state.y, state.v, done))
}

/// SSGD: upper step with the carried estimate, warm-started lower and
/// linear-system loops, then assembly of the next estimate.
pub fn run_ssgd<P>(
    oracle: &mut Oracle<'_, P>,
    cfg: &SsgdConfig,
    init: &Init,
    sampler: &mut Sampler,
    opts: &RunOptions,
) -> Result<RunTrace>
where
    P: BilevelProblem + HypergradientReference + ?Sized,
{
    cfg.batches.validate()?;
    if cfg.k == 0 || cfg.t == 0 || cfg.j == 0 {
        return Err(Error::invalid("K, T and J must be at least 1"));
    }
    check_steps(&[("alpha", cfg.alpha)])?;
    for (name, v) in [("beta", cfg.beta), ("eta", cfg.eta)] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    init.check(oracle.problem())?;
    let b = cfg.batches;
    let mut rec = Recorder::new(opts)?;
    let mut x = init.x0.clone();
    let mut state = WarmState::new(init.y0.clone(), init.v0.clone());
    let mut h = assemble_hypergradient(oracle, &x, &state.y, &state.v, b.d_f, b.d_g, sampler)?;
    let mut done = 0;
    for k in 0..cfg.k {
        rec.record(oracle, k, &x, k == 0)?;
        if rec.over_budget(oracle) {
            break;
        }
        step_x(&mut x, cfg.alpha, &h, k)?;
        let inner = (|| -> Result<()> {
            let (y, _) = ll_sgd(oracle, &x, &state.y, cfg.t, cfg.beta, b.s, sampler, false)?;
            sgd_linear_solve(oracle, &x, &y, &mut state, cfg.j, cfg.eta, b.d_f, b.d, sampler, true)?;
            state.y = y;
            if k + 1 < cfg.k {
                h = assemble_hypergradient(oracle, &x, &state.y, &state.v, b.d_f, b.d_g, sampler)?;
            }
            Ok(())
        })();
        inner.map_err(|e| e.at_outer_iteration(k))?;
        done = k + 1;
    }
    rec.record(oracle, done, &x, true)?;
    Ok(rec.finish(x, state.y, state.v, done))
}

pub fn run_stocbio<P>(
    oracle: &mut Oracle<'_, P>,
    cfg: &StocBioConfig,
    init: &Init,
    sampler: &mut Sampler,
    opts: &RunOptions,
) -> Result<RunTrace>
where
    P: BilevelProblem + HypergradientReference + ?Sized,
{
    cfg.batches.validate()?;
    if cfg.k == 0 || cfg.t == 0 || cfg.j == 0 {
        return Err(Error::invalid("K, T and J must be at least 1"));
    }
    check_steps(&[("alpha", cfg.alpha)])?;
    for (name, v) in [("beta", cfg.beta), ("eta", cfg.eta)] {
        if !(v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    init.check(oracle.problem())?;
    let b = cfg.batches;
    let mut rec = Recorder::new(opts)?;
    let mut x = init.x0.clone();
    let mut y = init.y0.clone();
    let mut done = 0;
    for k in 0..cfg.k {
        rec.record(oracle, k, &x, k == 0)?;
        if rec.over_budget(oracle) {
            break;
        }
        let h = (|| -> Result<Vector> {
            let (yt, _) = ll_sgd(oracle, &x, &y, cfg.t, cfg.beta, b.s, sampler, false)?;
            y = yt;
            estimate_ns(oracle, &x, &y, cfg.j, cfg.eta, b.d_f, b.d_g, b.d, sampler)
        })()
        .map_err(|e| e.at_outer_iteration(k))?;
        step_x(&mut x, cfg.alpha, &h, k)?;
        done = k + 1;
    }
    rec.record(oracle, done, &x, true)?;
    let v = Vector::zeros(y.len());
    Ok(rec.finish(x, y, v, done))
}

/// Double loop with decaying step sizes, growing cold-started lower loops
/// and unit batches.
pub fn run_bsa<P>(
    oracle: &mut Oracle<'_, P>,
    sched: &ScheduleConfig,
    init: &Init,
    sampler: &mut Sampler,
    opts: &RunOptions,
) -> Result<RunTrace>
where
    P: BilevelProblem + HypergradientReference + ?Sized,
{
    if sched.kind != ScheduleKind::Bsa {
        return Err(Error::invalid("run_bsa needs a BSA schedule"));
    }
    sched.validate()?;
    init.check(oracle.problem())?;
    let mut rec = Recorder::new(opts)?;
    let mut x = init.x0.clone();
    let mut y = init.y0.clone();
    let beta = |t: usize| bsa_beta(sched.d_beta, t);
    let mut done = 0;
    for k in 0..sched.k {
        rec.record(oracle, k, &x, k == 0)?;
        if rec.over_budget(oracle) {
            break;
        }
        let h = (|| -> Result<Vector> {
            let (yt, _) = ll_sgd_schedule(oracle, &x, &init.y0, bsa_inner_steps(k), &beta, 1, sampler, false)?;
            y = yt;
            estimate_ns(oracle, &x, &y, sched.j, sched.eta, 1, 1, 1, sampler)
        })()
        .map_err(|e| e.at_outer_iteration(k))?;
        step_x(&mut x, bsa_alpha(sched.d_alpha, k), &h, k)?;
        done = k + 1;
    }
    rec.record(oracle, done, &x, true)?;
    let v = Vector::zeros(y.len());
    Ok(rec.finish(x, y, v, done))
}

/// Single loop: one lower step and one upper step per iteration on two
/// decaying timescales, unit batches.
pub fn run_ttsa<P>(
    oracle: &mut Oracle<'_, P>,
    sched: &ScheduleConfig,
    init: &Init,
    sampler: &mut Sampler,
    opts: &RunOptions,
) -> Result<RunTrace>
where
    P: BilevelProblem + HypergradientReference + ?Sized,
{
    if sched.kind != ScheduleKind::Ttsa {
        return Err(Error::invalid("run_ttsa needs a TTSA schedule"));
    }
    sched.validate()?;
    init.check(oracle.problem())?;
    let mut rec = Recorder::new(opts)?;
    let mut x = init.x0.clone();
    let mut y = init.y0.clone();
    let mut done = 0;
    for k in 0..sched.k {
        rec.record(oracle, k, &x, k == 0)?;
        if rec.over_budget(oracle) {
            break;
        }
        let h = (|| -> Result<Vector> {
            let (yt, _) = ll_sgd(oracle, &x, &y, 1, ttsa_beta(sched.d_beta, k), 1, sampler, false)?;
            y = yt;
            estimate_ns(oracle, &x, &y, sched.j, sched.eta, 1, 1, 1, sampler)
        })()
        .map_err(|e| e.at_outer_iteration(k))?;
        step_x(&mut x, ttsa_alpha(sched.d_alpha, k), &h, k)?;
        done = k + 1;
    }
    rec.record(oracle, done, &x, true)?;
    let v = Vector::zeros(y.len());
    Ok(rec.finish(x, y, v, done))
}

/// Any of the drivers above, for callers that pick the algorithm at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmSpec {
    Algorithm1(Algorithm1Config),
    Ssgd(SsgdConfig),
    StocBio(StocBioConfig),
    Schedule(ScheduleConfig),
}

impl AlgorithmSpec {
    pub fn name(&self) -> String {
        match self {
            AlgorithmSpec::Algorithm1(c) => format!("alg1-{}", c.estimator.method.name()),
            AlgorithmSpec::Ssgd(_) => "ssgd".into(),
            AlgorithmSpec::StocBio(_) => "stocbio".into(),
            AlgorithmSpec::Schedule(s) => match s.kind {
                ScheduleKind::Bsa => "bsa".into(),
                ScheduleKind::Ttsa => "ttsa".into(),
            },
        }
    }

    pub fn run<P>(&self, oracle: &mut Oracle<'_, P>, init: &Init, sampler: &mut Sampler, opts: &RunOptions) -> Result<RunTrace>
    where
        P: BilevelProblem + HypergradientReference + ?Sized,
    {
        match self {
            AlgorithmSpec::Algorithm1(c) => run_algorithm1(oracle, c, init, sampler, opts),
            AlgorithmSpec::Ssgd(c) => run_ssgd(oracle, c, init, sampler, opts),
            AlgorithmSpec::StocBio(c) => run_stocbio(oracle, c, init, sampler, opts),
            AlgorithmSpec::Schedule(s) => match s.kind {
                ScheduleKind::Bsa => run_bsa(oracle, s, init, sampler, opts),
                ScheduleKind::Ttsa => run_ttsa(oracle, s, init, sampler, opts),
            },
        }
    }
}

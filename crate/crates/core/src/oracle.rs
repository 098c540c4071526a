//! Sampled derivative oracles shared by every problem and algorithm.
//!
//! A [`BilevelProblem`] exposes per-sample derivative products of the upper
//! objective `F(x, y; ξ)` and the lower objective `G(x, y; ζ)`. The [`Oracle`]
//! wrapper turns those into batch means and counts every per-sample
//! evaluation, so that a run's cost can be read off in the units used by the
//! complexity analysis (partial derivatives, Jacobian-vector products and
//! Hessian-vector products of single samples).

use std::ops::{Add, Sub};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense real vector used for `x` (dimension p) and `y`, `v` (dimension q).
pub type Vector = DVector<f64>;

/// Iterates whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Deterministic random stream identified by `(seed, stream)`.
///
/// Two streams built from the same pair produce bit-identical draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// A sibling stream with the same seed and a different id.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(&mut self.rng)
    }
}

/// A multiset of sample indices into a finite dataset of size `population`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    indices: Vec<usize>,
    population: usize,
}

impl BatchSpec {
    pub fn new(indices: Vec<usize>, population: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("batch must contain at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= population) {
            return Err(Error::invalid(format!(
                "batch index {bad} out of range for dataset of size {population}"
            )));
        }
        Ok(Self {
            indices,
            population,
        })
    }

    /// Every index of the dataset exactly once.
    pub fn full(population: usize) -> Result<Self> {
        Self::new((0..population).collect(), population)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn population(&self) -> usize {
        self.population
    }
}

/// Draws `batch_size` indices uniformly with replacement from `[0, dataset_size)`.
pub fn sample_batch(rng: &mut RngStream, dataset_size: usize, batch_size: usize) -> Result<BatchSpec> {
    if dataset_size == 0 {
        return Err(Error::invalid("dataset_size must be positive"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let indices = (0..batch_size).map(|_| rng.index(dataset_size)).collect();
    BatchSpec::new(indices, dataset_size)
}

/// Source of sample batches for one run.
///
/// In full-batch mode every request returns the whole dataset and the random
/// stream is never touched, which makes all algorithms deterministic.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: RngStream,
    full_batch: bool,
}

impl Sampler {
    pub fn stochastic(rng: RngStream) -> Self {
        Self {
            rng,
            full_batch: false,
        }
    }

    pub fn full_batch(rng: RngStream) -> Self {
        Self {
            rng,
            full_batch: true,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.full_batch
    }

    pub fn draw(&mut self, population: usize, size: usize) -> Result<BatchSpec> {
        if self.full_batch {
            BatchSpec::full(population)
        } else {
            sample_batch(&mut self.rng, population, size)
        }
    }

    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.rng
    }
}

/// Per-sample work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ComplexityCounters {
    /// Partial derivatives of F.
    pub gc_f: u64,
    /// Partial derivatives of G.
    pub gc_g: u64,
    /// Jacobian-vector products of G.
    pub jv_g: u64,
    /// Hessian-vector products of G.
    pub hv_g: u64,
}

impl ComplexityCounters {
    pub fn total(&self) -> u64 {
        self.gc_f + self.gc_g + self.jv_g + self.hv_g
    }

    pub fn dominates(&self, earlier: &Self) -> bool {
        self.gc_f >= earlier.gc_f
            && self.gc_g >= earlier.gc_g
            && self.jv_g >= earlier.jv_g
            && self.hv_g >= earlier.hv_g
    }
}

impl Add for ComplexityCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            gc_f: self.gc_f + o.gc_f,
            gc_g: self.gc_g + o.gc_g,
            jv_g: self.jv_g + o.jv_g,
            hv_g: self.hv_g + o.hv_g,
        }
    }
}

impl Sub for ComplexityCounters {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            gc_f: self.gc_f - o.gc_f,
            gc_g: self.gc_g - o.gc_g,
            jv_g: self.jv_g - o.jv_g,
            hv_g: self.hv_g - o.hv_g,
        }
    }
}

/// Per-sample derivative products of a stochastic bilevel problem
///
/// `min_x f(x, y*(x))` with `y*(x) = argmin_y g(x, y)`, where `f` is the mean
/// of `F(·; ξ_i)` over the upper dataset and `g` the mean of `G(·; ζ_i)` over
/// the lower dataset.
///
/// Every method accumulates `weight * value` into `out`, so batch means are
/// formed without temporaries.
pub trait BilevelProblem {
    /// Dimension p of the upper variable.
    fn upper_dim(&self) -> usize;
    /// Dimension q of the lower variable.
    fn lower_dim(&self) -> usize;
    /// Number of samples ξ defining `f`.
    fn upper_samples(&self) -> usize;
    /// Number of samples ζ defining `g`.
    fn lower_samples(&self) -> usize;

    /// `∇_x F(x, y; ξ_i)`, length p.
    fn add_grad_x_upper(&self, x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector);
    /// `∇_y F(x, y; ξ_i)`, length q.
    fn add_grad_y_upper(&self, x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector);
    /// `∇_y G(x, y; ζ_i)`, length q.
    fn add_grad_y_lower(&self, x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector);
    /// `∇²_y G(x, y; ζ_i) · v`, length q.
    fn add_hvp_lower(&self, x: &Vector, y: &Vector, i: usize, v: &Vector, weight: f64, out: &mut Vector);
    /// `∇_x ∇_y G(x, y; ζ_i) · v`, length p.
    fn add_jvp_lower(&self, x: &Vector, y: &Vector, i: usize, v: &Vector, weight: f64, out: &mut Vector);
}

/// Exact (non-sampled) reference values used for traces and checks.
pub trait HypergradientReference {
    /// `Φ(x) = f(x, y*(x))`.
    fn phi(&self, x: &Vector) -> Result<f64>;
    /// `∇Φ(x)`.
    fn grad_phi(&self, x: &Vector) -> Result<Vector>;
}

/// Counting batch oracle over a borrowed problem.
///
/// One oracle belongs to one run; the problem itself may be shared.
#[derive(Debug)]
pub struct Oracle<'a, P: ?Sized> {
    problem: &'a P,
    counters: ComplexityCounters,
}

impl<'a, P: BilevelProblem + ?Sized> Oracle<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self {
            problem,
            counters: ComplexityCounters::default(),
        }
    }

    pub fn problem(&self) -> &'a P {
        self.problem
    }

    pub fn upper_dim(&self) -> usize {
        self.problem.upper_dim()
    }

    pub fn lower_dim(&self) -> usize {
        self.problem.lower_dim()
    }

    pub fn upper_samples(&self) -> usize {
        self.problem.upper_samples()
    }

    pub fn lower_samples(&self) -> usize {
        self.problem.lower_samples()
    }

    pub fn counters(&self) -> ComplexityCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = ComplexityCounters::default();
    }

    fn check_upper(&self, batch: &BatchSpec) {
        assert_eq!(
            batch.population(),
            self.problem.upper_samples(),
            "batch drawn from a population that is not the upper dataset"
        );
    }

    fn check_lower(&self, batch: &BatchSpec) {
        assert_eq!(
            batch.population(),
            self.problem.lower_samples(),
            "batch drawn from a population that is not the lower dataset"
        );
    }

    pub fn grad_x_f(&mut self, x: &Vector, y: &Vector, batch: &BatchSpec) -> Vector {
        self.check_upper(batch);
        let w = 1.0 / batch.len() as f64;
        let mut out = Vector::zeros(self.problem.upper_dim());
        for &i in batch.indices() {
            self.problem.add_grad_x_upper(x, y, i, w, &mut out);
        }
        self.counters.gc_f += batch.len() as u64;
        out
    }

    pub fn grad_y_f(&mut self, x: &Vector, y: &Vector, batch: &BatchSpec) -> Vector {
        self.check_upper(batch);
        let w = 1.0 / batch.len() as f64;
        let mut out = Vector::zeros(self.problem.lower_dim());
        for &i in batch.indices() {
            self.problem.add_grad_y_upper(x, y, i, w, &mut out);
        }
        self.counters.gc_f += batch.len() as u64;
        out
    }

    pub fn grad_y_g(&mut self, x: &Vector, y: &Vector, batch: &BatchSpec) -> Vector {
        self.check_lower(batch);
        let w = 1.0 / batch.len() as f64;
        let mut out = Vector::zeros(self.problem.lower_dim());
        for &i in batch.indices() {
            self.problem.add_grad_y_lower(x, y, i, w, &mut out);
        }
        self.counters.gc_g += batch.len() as u64;
        out
    }

    pub fn hvp_yy_g(&mut self, x: &Vector, y: &Vector, batch: &BatchSpec, v: &Vector) -> Vector {
        self.check_lower(batch);
        let w = 1.0 / batch.len() as f64;
        let mut out = Vector::zeros(self.problem.lower_dim());
        for &i in batch.indices() {
            self.problem.add_hvp_lower(x, y, i, v, w, &mut out);
        }
        self.counters.hv_g += batch.len() as u64;
        out
    }

    pub fn jvp_xy_g(&mut self, x: &Vector, y: &Vector, batch: &BatchSpec, v: &Vector) -> Vector {
        self.check_lower(batch);
        let w = 1.0 / batch.len() as f64;
        let mut out = Vector::zeros(self.problem.upper_dim());
        for &i in batch.indices() {
            self.problem.add_jvp_lower(x, y, i, v, w, &mut out);
        }
        self.counters.jv_g += batch.len() as u64;
        out
    }
}

/// Full-batch derivative products evaluated without counting.
///
/// Used by reference computations (closed-form checks, trace metrics) that
/// must not be charged to a run's budget.
pub mod exact {
    use super::*;

    fn mean_over(n: usize, dim: usize, mut f: impl FnMut(usize, f64, &mut Vector)) -> Vector {
        let w = 1.0 / n as f64;
        let mut out = Vector::zeros(dim);
        for i in 0..n {
            f(i, w, &mut out);
        }
        out
    }

    pub fn grad_x_f<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> Vector {
        mean_over(p.upper_samples(), p.upper_dim(), |i, w, o| p.add_grad_x_upper(x, y, i, w, o))
    }

    pub fn grad_y_f<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> Vector {
        mean_over(p.upper_samples(), p.lower_dim(), |i, w, o| p.add_grad_y_upper(x, y, i, w, o))
    }

    pub fn grad_y_g<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> Vector {
        mean_over(p.lower_samples(), p.lower_dim(), |i, w, o| p.add_grad_y_lower(x, y, i, w, o))
    }

    pub fn hvp_yy_g<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector, v: &Vector) -> Vector {
        mean_over(p.lower_samples(), p.lower_dim(), |i, w, o| p.add_hvp_lower(x, y, i, v, w, o))
    }

    pub fn jvp_xy_g<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector, v: &Vector) -> Vector {
        mean_over(p.lower_samples(), p.upper_dim(), |i, w, o| p.add_jvp_lower(x, y, i, v, w, o))
    }

    /// Dense `∇²_y g(x, y)` assembled column by column from Hessian-vector products.
    pub fn hessian_yy_g<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> nalgebra::DMatrix<f64> {
        let q = p.lower_dim();
        let mut h = nalgebra::DMatrix::zeros(q, q);
        let mut e = Vector::zeros(q);
        for j in 0..q {
            e[j] = 1.0;
            h.set_column(j, &hvp_yy_g(p, x, y, &e));
            e[j] = 0.0;
        }
        h
    }

    /// Dense `∇_x ∇_y g(x, y)` (p × q) assembled from Jacobian-vector products.
    pub fn jacobian_xy_g<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> nalgebra::DMatrix<f64> {
        let q = p.lower_dim();
        let mut jac = nalgebra::DMatrix::zeros(p.upper_dim(), q);
        let mut e = Vector::zeros(q);
        for j in 0..q {
            e[j] = 1.0;
            jac.set_column(j, &jvp_xy_g(p, x, y, &e));
            e[j] = 0.0;
        }
        jac
    }

    /// Implicit-differentiation hypergradient `∇_x f − ∇_x∇_y g · [∇²_y g]⁻¹ ∇_y f`
    /// at the given `(x, y)`, with a dense symmetric positive-definite solve.
    pub fn aid_hypergradient<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> Result<Vector> {
        let v = aid_linear_solution(p, x, y)?;
        Ok(grad_x_f(p, x, y) - jvp_xy_g(p, x, y, &v))
    }

    /// `v = [∇²_y g]⁻¹ ∇_y f` at `(x, y)`.
    pub fn aid_linear_solution<P: BilevelProblem + ?Sized>(p: &P, x: &Vector, y: &Vector) -> Result<Vector> {
        let h = hessian_yy_g(p, x, y);
        let rhs = grad_y_f(p, x, y);
        let chol = nalgebra::Cholesky::new(h)
            .ok_or_else(|| Error::Numerical("lower-level Hessian is not positive definite".into()))?;
        Ok(chol.solve(&rhs))
    }
}

/// Fails when `v` holds a non-finite entry or has exploded past [`DIVERGENCE_NORM`].
pub fn check_finite(v: &Vector, iteration: usize, what: &str) -> Result<()> {
    let norm = v.norm();
    if !norm.is_finite() || v.iter().any(|e| !e.is_finite()) {
        return Err(Error::Divergence {
            iteration,
            detail: format!("{what} has a non-finite entry"),
        });
    }
    if norm > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            iteration,
            detail: format!("{what} norm {norm:.3e} exceeds {DIVERGENCE_NORM:e}"),
        });
    }
    Ok(())
}

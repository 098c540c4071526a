//! Hypergradient estimators and the shared lower-level SGD loop.
//!
//! All three estimators approximate
//! `∇Φ(x) = ∇_x f − ∇_x∇_y g · [∇²_y g]⁻¹ ∇_y f`
//! from sampled derivative products:
//!
//! * [`Method::StochasticBp`] differentiates through the recorded lower-level
//!   trajectory, replaying it backwards without materializing matrices.
//! * [`Method::StochasticNs`] truncates the Neumann series of the inverse
//!   Hessian after `J` terms.
//! * [`Method::SgdEstimation`] runs `J` SGD steps on
//!   `½ vᵀ∇²_y g v − vᵀ∇_y f`, optionally warm-started from the previous call.

use crate::error::{Error, Result};
use crate::oracle::{check_finite, BatchSpec, BilevelProblem, Oracle, Sampler, Vector};
use crate::theory::LipschitzProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    StochasticBp,
    StochasticNs,
    SgdEstimation,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::StochasticBp => "stochastic-bp",
            Method::StochasticNs => "stochastic-ns",
            Method::SgdEstimation => "sgd-estimation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Inner steps of the NS and SGD estimators; unused by BP.
    pub j: usize,
    pub eta: f64,
    /// Carry `v` across calls. Only the SGD estimator keeps `v`.
    pub warm_start: bool,
    pub d_f: usize,
    pub d_g: usize,
    pub d: usize,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j == 0 {
            return Err(Error::invalid("J must be at least 1"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.d_f == 0 || self.d_g == 0 || self.d == 0 {
            return Err(Error::invalid("batch sizes D_f, D_g and D must be at least 1"));
        }
        if self.warm_start && self.method != Method::SgdEstimation {
            return Err(Error::invalid(format!(
                "warm_start only applies to sgd-estimation, not {}",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// Lower iterate and linear-system iterate carried between outer iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmState {
    pub y: Vector,
    pub v: Vector,
    /// When set, debug builds assert `‖v‖ ≤ v_bound` after every inner step.
    pub v_bound: Option<f64>,
}

impl WarmState {
    pub fn new(y: Vector, v: Vector) -> Self {
        Self { y, v, v_bound: None }
    }

    pub fn zeros(q: usize) -> Self {
        Self::new(Vector::zeros(q), Vector::zeros(q))
    }

    pub fn with_v_bound(mut self, bound: f64) -> Self {
        self.v_bound = Some(bound);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapeStep {
    pub batch: BatchSpec,
    /// Iterate the step was taken from.
    pub iterate: Vector,
    pub step_size: f64,
}

/// Record of a lower-level SGD run, replayed by [`estimate_bp`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BpTape {
    pub steps: Vec<TapeStep>,
}

impl BpTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `T` SGD steps on `g(x, ·)` with constant step size `beta`.
#[allow(clippy::too_many_arguments)]
pub fn ll_sgd<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y0: &Vector,
    t: usize,
    beta: f64,
    s: usize,
    sampler: &mut Sampler,
    record_tape: bool,
) -> Result<(Vector, Option<BpTape>)> {
    ll_sgd_schedule(oracle, x, y0, t, &|_| beta, s, sampler, record_tape)
}

/// Like [`ll_sgd`] with step size `beta(t)` at inner step `t`.
#[allow(clippy::too_many_arguments)]
pub fn ll_sgd_schedule<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y0: &Vector,
    t: usize,
    beta: &dyn Fn(usize) -> f64,
    s: usize,
    sampler: &mut Sampler,
    record_tape: bool,
) -> Result<(Vector, Option<BpTape>)> {
    if y0.len() != oracle.lower_dim() {
        return Err(Error::InvalidState(format!(
            "lower iterate has dimension {}, problem expects {}",
            y0.len(),
            oracle.lower_dim()
        )));
    }
    let mut tape = record_tape.then(BpTape::default);
    let mut y = y0.clone();
    for step in 0..t {
        let b = beta(step);
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::invalid(format!("lower step size must be positive, got {b}")));
        }
        let batch = sampler.draw(oracle.lower_samples(), s)?;
        let g = oracle.grad_y_g(x, &y, &batch);
        if let Some(tape) = tape.as_mut() {
            tape.steps.push(TapeStep {
                batch,
                iterate: y.clone(),
                step_size: b,
            });
        }
        y.axpy(-b, &g, 1.0);
        check_finite(&y, step, &format!("lower iterate (beta = {b})"))?;
    }
    Ok((y, tape))
}

/// Backpropagation through the recorded lower-level trajectory.
///
/// With `A_t = Π_{i=t+1}^{T−1} (I − β_i ∇²_y G(x, y_i; S_i))` applied
/// right-to-left, returns
/// `∇_x F(x, y_T; D_F) − Σ_t β_t ∇_x∇_y G(x, y_t; S_t) A_t ∇_y F(x, y_T; D_F)`.
pub fn estimate_bp<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    tape: &BpTape,
    d_f: usize,
    sampler: &mut Sampler,
) -> Result<Vector> {
    let q = oracle.lower_dim();
    if y_t.len() != q || tape.steps.iter().any(|s| s.iterate.len() != q) {
        return Err(Error::InvalidState("tape does not match the problem's lower dimension".into()));
    }
    if tape.steps.iter().any(|s| s.batch.population() != oracle.lower_samples()) {
        return Err(Error::InvalidState("tape batches were drawn from another dataset".into()));
    }
    let df = sampler.draw(oracle.upper_samples(), d_f)?;
    let grad_x = oracle.grad_x_f(x, y_t, &df);
    let mut w = oracle.grad_y_f(x, y_t, &df);
    let mut acc = Vector::zeros(oracle.upper_dim());
    for (t, step) in tape.steps.iter().enumerate().rev() {
        acc.axpy(step.step_size, &oracle.jvp_xy_g(x, &step.iterate, &step.batch, &w), 1.0);
        if t > 0 {
            let hw = oracle.hvp_yy_g(x, &step.iterate, &step.batch, &w);
            w.axpy(-step.step_size, &hw, 1.0);
            check_finite(&w, t, "backpropagated adjoint")?;
        }
    }
    let h = grad_x - acc;
    check_finite(&h, 0, "hypergradient estimate")?;
    Ok(h)
}

/// Truncated Neumann-series estimator.
///
/// `v = η Σ_{j<J} Π (I − η ∇²_y G(x, y_T; B_i)) ∇_y F(x, y_T; D_F)`, evaluated
/// in Horner form with `J − 1` Hessian-vector products; `D_F` serves both
/// upper partial derivatives.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ns<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    j: usize,
    eta: f64,
    d_f: usize,
    d_g: usize,
    d: usize,
    sampler: &mut Sampler,
) -> Result<Vector> {
    let v = ns_direction(oracle, x, y_t, j, eta, d_f, d, sampler)?;
    let dg = sampler.draw(oracle.lower_samples(), d_g)?;
    let h = v.grad_x - oracle.jvp_xy_g(x, y_t, &dg, &v.v);
    check_finite(&h, 0, "hypergradient estimate")?;
    Ok(h)
}

struct NsDirection {
    v: Vector,
    grad_x: Vector,
}

#[allow(clippy::too_many_arguments)]
fn ns_direction<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    j: usize,
    eta: f64,
    d_f: usize,
    d: usize,
    sampler: &mut Sampler,
) -> Result<NsDirection> {
    if j == 0 {
        return Err(Error::invalid("J must be at least 1"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let df = sampler.draw(oracle.upper_samples(), d_f)?;
    let grad_x = oracle.grad_x_f(x, y_t, &df);
    let g = oracle.grad_y_f(x, y_t, &df);
    let mut v = g.clone();
    for i in 1..j {
        let b = sampler.draw(oracle.lower_samples(), d)?;
        let hv = oracle.hvp_yy_g(x, y_t, &b, &v);
        v.axpy(-eta, &hv, 1.0);
        v += &g;
        check_finite(&v, i, &format!("Neumann partial sum (eta = {eta})"))?;
    }
    v *= eta;
    Ok(NsDirection { v, grad_x })
}

/// SGD on the linear system `∇²_y g v = ∇_y f`, then assembly.
///
/// Starts from `state.v` when `warm_start`, else from zero, and stores the
/// final `v` back into `state`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sgd<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    state: &mut WarmState,
    j: usize,
    eta: f64,
    d_f: usize,
    d_g: usize,
    d: usize,
    sampler: &mut Sampler,
    warm_start: bool,
) -> Result<Vector> {
    sgd_linear_solve(oracle, x, y_t, state, j, eta, d_f, d, sampler, warm_start)?;
    assemble_hypergradient(oracle, x, y_t, &state.v, d_f, d_g, sampler)
}

/// The `v` loop of the SGD estimator without the final assembly.
#[allow(clippy::too_many_arguments)]
pub fn sgd_linear_solve<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    state: &mut WarmState,
    j: usize,
    eta: f64,
    d_f: usize,
    d: usize,
    sampler: &mut Sampler,
    warm_start: bool,
) -> Result<()> {
    if j == 0 {
        return Err(Error::invalid("J must be at least 1"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    if state.v.len() != oracle.lower_dim() {
        return Err(Error::InvalidState("carried v has the wrong dimension".into()));
    }
    let mut v = if warm_start {
        state.v.clone()
    } else {
        Vector::zeros(oracle.lower_dim())
    };
    for step in 0..j {
        let b = sampler.draw(oracle.lower_samples(), d)?;
        let dfj = sampler.draw(oracle.upper_samples(), d_f)?;
        let hv = oracle.hvp_yy_g(x, y_t, &b, &v);
        let g = oracle.grad_y_f(x, y_t, &dfj);
        v.axpy(-eta, &hv, 1.0);
        v.axpy(eta, &g, 1.0);
        check_finite(&v, step, &format!("linear-system iterate (eta = {eta})"))?;
        if let Some(bound) = state.v_bound {
            debug_assert!(
                v.norm() <= bound * (1.0 + 1e-9),
                "‖v‖ = {} exceeds M/μ = {bound}",
                v.norm()
            );
        }
    }
    state.v = v;
    Ok(())
}

/// `∇_x F(x, y; D_F) − ∇_x∇_y G(x, y; D_G) v` with independent batches.
pub fn assemble_hypergradient<P: BilevelProblem + ?Sized>(
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y: &Vector,
    v: &Vector,
    d_f: usize,
    d_g: usize,
    sampler: &mut Sampler,
) -> Result<Vector> {
    if x.len() != oracle.upper_dim() || y.len() != oracle.lower_dim() || v.len() != oracle.lower_dim() {
        return Err(Error::InvalidState("iterate dimensions do not match the problem".into()));
    }
    let df = sampler.draw(oracle.upper_samples(), d_f)?;
    let dg = sampler.draw(oracle.lower_samples(), d_g)?;
    let h = oracle.grad_x_f(x, y, &df) - oracle.jvp_xy_g(x, y, &dg, v);
    check_finite(&h, 0, "hypergradient estimate")?;
    Ok(h)
}

/// Runs the configured estimator at `(x, y_T)`.
///
/// `tape` is required for BP; `state.v` is read and written by the SGD
/// estimator only.
pub fn estimate<P: BilevelProblem + ?Sized>(
    cfg: &EstimatorConfig,
    oracle: &mut Oracle<'_, P>,
    x: &Vector,
    y_t: &Vector,
    tape: Option<&BpTape>,
    state: &mut WarmState,
    sampler: &mut Sampler,
) -> Result<Vector> {
    match cfg.method {
        Method::StochasticBp => {
            let tape = tape.ok_or_else(|| Error::InvalidState("BP estimator needs a recorded tape".into()))?;
            estimate_bp(oracle, x, y_t, tape, cfg.d_f, sampler)
        }
        Method::StochasticNs => estimate_ns(oracle, x, y_t, cfg.j, cfg.eta, cfg.d_f, cfg.d_g, cfg.d, sampler),
        Method::SgdEstimation => estimate_sgd(
            oracle,
            x,
            y_t,
            state,
            cfg.j,
            cfg.eta,
            cfg.d_f,
            cfg.d_g,
            cfg.d,
            sampler,
            cfg.warm_start,
        ),
    }
}

/// Inputs to [`bias_bound`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasInputs {
    pub t: usize,
    pub j: usize,
    pub eta: f64,
    pub beta: f64,
    /// `‖y_T − y*(x)‖`.
    pub dist_y: f64,
    /// `‖y_t − y*(x)‖` for `t = 0..T`, used by BP only.
    pub trajectory: Vec<f64>,
    /// `‖v⁰ − v*‖` for SGD estimation, `‖∇_x∇_y g [∇²_y g]⁻¹‖` for BP and NS.
    pub dist_v0: f64,
}

/// Upper bound on `‖∇Φ(x) − E[h]‖` for each estimator.
///
/// Only valid for `μ < 1`, `L < 1` and `β = η`; other inputs are refused.
pub fn bias_bound(profile: &LipschitzProfile, method: Method, inp: &BiasInputs) -> Result<f64> {
    let LipschitzProfile { m, l, tau, rho, mu, .. } = *profile;
    if !(mu < 1.0) {
        return Err(Error::invalid(format!("bias bound needs mu < 1, got mu = {mu}")));
    }
    if !(l < 1.0) {
        return Err(Error::invalid(format!("bias bound needs L < 1, got L = {l}")));
    }
    if inp.beta != inp.eta {
        return Err(Error::invalid(format!(
            "bias bound needs beta = eta, got beta = {} and eta = {}",
            inp.beta, inp.eta
        )));
    }
    if !(inp.eta > 0.0) {
        return Err(Error::invalid("bias bound needs eta > 0"));
    }
    let c = 1.0 - inp.eta * mu;
    let geometric = |n: usize| (0..n).map(|t| c.powi(t as i32)).sum::<f64>();
    let bound = match method {
        Method::StochasticBp => {
            if inp.trajectory.len() != inp.t {
                return Err(Error::invalid(format!(
                    "BP bias bound needs {} trajectory distances, got {}",
                    inp.t,
                    inp.trajectory.len()
                )));
            }
            let tail: f64 = (0..inp.t)
                .map(|t| c.powi(t as i32) * inp.trajectory[inp.t - 1 - t])
                .sum();
            l * (1.0 + l / mu) * inp.dist_y
                + m * c.powi(inp.t as i32) * inp.dist_v0
                + m * inp.eta * (l * rho / mu + tau) * tail
        }
        Method::StochasticNs => {
            l * (1.0 + l / mu) * inp.dist_y
                + m * c.powi(inp.j as i32) * inp.dist_v0
                + m * inp.eta * (l * rho / mu + tau) * geometric(inp.j) * inp.dist_y
        }
        Method::SgdEstimation => {
            (l + m * tau / mu) * inp.dist_y
                + l * c.powi(inp.j as i32) * inp.dist_v0
                + l * inp.eta * (m * rho / mu + l) * geometric(inp.j) * inp.dist_y
        }
    };
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact, RngStream};
    use crate::synthetic::{generate_dataset, SyntheticConfig, SyntheticProblem};
    use nalgebra::DMatrix;

    fn small(seed: u64, p: usize) -> SyntheticProblem {
        let w0 = Vector::from_fn(p, |i, _| 1.0 + i as f64);
        let cfg = SyntheticConfig {
            n_train: 40,
            n_val: 30,
            feature_variance: 1.0,
            ..Default::default()
        };
        generate_dataset(&mut RngStream::new(seed, 0), &w0, &cfg).unwrap()
    }

    fn full() -> Sampler {
        Sampler::full_batch(RngStream::new(0, 0))
    }

    fn rand_vec(seed: u64, n: usize) -> Vector {
        let mut r = RngStream::new(seed, 9);
        Vector::from_fn(n, |_, _| r.standard_normal())
    }

    fn max_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.max()
    }

    #[test]
    fn zero_steps_is_identity() {
        let p = small(1, 3);
        let mut o = Oracle::new(&p);
        let y0 = rand_vec(2, 3);
        let (y, tape) = ll_sgd(&mut o, &rand_vec(3, 3), &y0, 0, 0.1, 5, &mut full(), true).unwrap();
        assert_eq!(y, y0);
        assert!(tape.unwrap().is_empty());
        assert_eq!(o.counters().total(), 0);
    }

    #[test]
    fn full_batch_lower_loop_contracts() {
        let p = small(4, 4);
        let x = rand_vec(5, 4);
        let ystar = p.y_star(&x).unwrap();
        let h = exact::hessian_yy_g(&p, &x, &ystar);
        let beta = 1.0 / max_eig(&h);
        let y0 = Vector::zeros(4);
        let mut o = Oracle::new(&p);
        let (y, _) = ll_sgd(&mut o, &x, &y0, 500, beta, 1, &mut full(), false).unwrap();
        assert!((&y - &ystar).norm() <= 1e-6 * (&y0 - &ystar).norm() + 1e-10);
    }

    #[test]
    fn divergent_step_names_step_size() {
        let p = small(4, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(1, 3);
        let err = ll_sgd(&mut o, &x, &Vector::zeros(3), 2000, 50.0, 1, &mut full(), false).unwrap_err();
        match err {
            Error::Divergence { detail, .. } => assert!(detail.contains("beta = 50"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bp_with_empty_tape_is_upper_partial() {
        let p = small(6, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(7, 3);
        let y = rand_vec(8, 3);
        let h = estimate_bp(&mut o, &x, &y, &BpTape::default(), 1, &mut full()).unwrap();
        assert_eq!(h, exact::grad_x_f(&p, &x, &y));
    }

    #[test]
    fn bp_single_step() {
        let p = small(6, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(7, 3);
        let y0 = rand_vec(8, 3);
        let (yt, tape) = ll_sgd(&mut o, &x, &y0, 1, 0.2, 1, &mut full(), true).unwrap();
        let h = estimate_bp(&mut o, &x, &yt, &tape.unwrap(), 1, &mut full()).unwrap();
        let want = exact::grad_x_f(&p, &x, &yt) - exact::jvp_xy_g(&p, &x, &y0, &exact::grad_y_f(&p, &x, &yt)) * 0.2;
        assert!((h - want).norm() < 1e-12);
    }

    #[test]
    fn bp_matches_dense_product() {
        let p = small(9, 3);
        let x = rand_vec(10, 3);
        let beta = 0.05;
        for t in [0usize, 1, 5, 20, 50] {
            let mut o = Oracle::new(&p);
            let (yt, tape) = ll_sgd(&mut o, &x, &Vector::zeros(3), t, beta, 1, &mut full(), true).unwrap();
            let h = estimate_bp(&mut o, &x, &yt, &tape.unwrap(), 1, &mut full()).unwrap();
            // dense: Σ_t β J A_t g, J = -rI, H constant
            let hm = exact::hessian_yy_g(&p, &x, &yt);
            let jm = exact::jacobian_xy_g(&p, &x, &yt);
            let g = exact::grad_y_f(&p, &x, &yt);
            let step = DMatrix::identity(3, 3) - &hm * beta;
            let mut sum = DMatrix::zeros(3, 3);
            let mut power = DMatrix::identity(3, 3);
            for _ in 0..t {
                sum += &power;
                power = &power * &step;
            }
            let want = exact::grad_x_f(&p, &x, &yt) - &jm * (sum * g) * beta;
            assert!((&h - &want).norm() < 1e-10 * (1.0 + want.norm()), "T = {t}");
        }
    }

    #[test]
    fn ns_single_term() {
        let p = small(11, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(1, 3);
        let y = rand_vec(2, 3);
        let h = estimate_ns(&mut o, &x, &y, 1, 0.1, 1, 1, 1, &mut full()).unwrap();
        let v = exact::grad_y_f(&p, &x, &y) * 0.1;
        let want = exact::grad_x_f(&p, &x, &y) - exact::jvp_xy_g(&p, &x, &y, &v);
        assert!((h - want).norm() < 1e-14);
        assert_eq!(o.counters().hv_g, 0);
    }

    #[test]
    fn ns_matches_dense_truncation() {
        let p = small(12, 4);
        let x = rand_vec(3, 4);
        let y = rand_vec(4, 4);
        let hm = exact::hessian_yy_g(&p, &x, &y);
        let eta = 0.5 / max_eig(&hm);
        let g = exact::grad_y_f(&p, &x, &y);
        let step = DMatrix::identity(4, 4) - &hm * eta;
        for j in 1..=20 {
            let mut sum = Vector::zeros(4);
            let mut term = g.clone();
            for _ in 0..j {
                sum += &term;
                term = &step * term;
            }
            let v = sum * eta;
            let want = exact::grad_x_f(&p, &x, &y) - exact::jvp_xy_g(&p, &x, &y, &v);
            let mut o = Oracle::new(&p);
            let h = estimate_ns(&mut o, &x, &y, j, eta, 1, 1, 1, &mut full()).unwrap();
            assert!((h - &want).norm() < 1e-10 * (1.0 + want.norm()), "J = {j}");
            let n = p.val().len() as u64;
            assert_eq!(o.counters().gc_f, 2 * n);
            assert_eq!(o.counters().hv_g, (j as u64 - 1) * p.train().len() as u64);
        }
    }

    #[test]
    fn ns_long_series_reaches_aid() {
        let p = small(13, 3);
        let x = rand_vec(5, 3);
        let y = p.y_star(&x).unwrap();
        let eta = 1.0 / max_eig(&exact::hessian_yy_g(&p, &x, &y));
        let mut o = Oracle::new(&p);
        let h = estimate_ns(&mut o, &x, &y, 5000, eta, 1, 1, 1, &mut full()).unwrap();
        let want = p.grad_phi_true(&x).unwrap();
        assert!((h - &want).norm() < 1e-8 * (1.0 + want.norm()));
    }

    /// Two-dimensional lower problem with Hessian diag(2, 4) and ∇_y f = (2, 4).
    struct Diagonal;

    impl BilevelProblem for Diagonal {
        fn upper_dim(&self) -> usize {
            1
        }
        fn lower_dim(&self) -> usize {
            2
        }
        fn upper_samples(&self) -> usize {
            1
        }
        fn lower_samples(&self) -> usize {
            1
        }
        fn add_grad_x_upper(&self, _: &Vector, _: &Vector, _: usize, _: f64, _: &mut Vector) {}
        fn add_grad_y_upper(&self, _: &Vector, _: &Vector, _: usize, w: f64, out: &mut Vector) {
            out[0] += 2.0 * w;
            out[1] += 4.0 * w;
        }
        fn add_grad_y_lower(&self, _: &Vector, y: &Vector, _: usize, w: f64, out: &mut Vector) {
            out[0] += 2.0 * w * y[0];
            out[1] += 4.0 * w * y[1];
        }
        fn add_hvp_lower(&self, _: &Vector, _: &Vector, _: usize, v: &Vector, w: f64, out: &mut Vector) {
            out[0] += 2.0 * w * v[0];
            out[1] += 4.0 * w * v[1];
        }
        fn add_jvp_lower(&self, _: &Vector, _: &Vector, _: usize, _: &Vector, _: f64, _: &mut Vector) {}
    }

    #[test]
    fn sgd_solves_diagonal_system() {
        let mut o = Oracle::new(&Diagonal);
        let mut st = WarmState::zeros(2);
        let x = Vector::zeros(1);
        let y = Vector::zeros(2);
        sgd_linear_solve(&mut o, &x, &y, &mut st, 200, 0.2, 1, 1, &mut full(), false).unwrap();
        assert!((st.v - Vector::from_vec(vec![1.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn sgd_single_step_from_zero() {
        let p = small(14, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(1, 3);
        let y = rand_vec(2, 3);
        let mut st = WarmState::new(Vector::zeros(3), rand_vec(3, 3));
        let h = estimate_sgd(&mut o, &x, &y, &mut st, 1, 0.1, 1, 1, 1, &mut full(), false).unwrap();
        let v = exact::grad_y_f(&p, &x, &y) * 0.1;
        assert!((&st.v - &v).norm() < 1e-14);
        let want = exact::grad_x_f(&p, &x, &y) - exact::jvp_xy_g(&p, &x, &y, &v);
        assert!((h - want).norm() < 1e-14);
    }

    #[test]
    fn sgd_contraction_rate() {
        let p = small(15, 4);
        let x = rand_vec(6, 4);
        let y = rand_vec(7, 4);
        let hm = exact::hessian_yy_g(&p, &x, &y);
        let eig = hm.clone().symmetric_eigen().eigenvalues;
        let (mu, l) = (eig.min(), eig.max());
        let eta = 1.0 / l;
        let target = hm.cholesky().unwrap().solve(&exact::grad_y_f(&p, &x, &y));
        let v0 = rand_vec(8, 4) * 3.0;
        for j in 1..=50 {
            let mut st = WarmState::new(Vector::zeros(4), v0.clone());
            let mut o = Oracle::new(&p);
            sgd_linear_solve(&mut o, &x, &y, &mut st, j, eta, 1, 1, &mut full(), true).unwrap();
            let lhs = (&st.v - &target).norm();
            let rhs = (1.0 - eta * mu).powi(j as i32) * (&v0 - &target).norm();
            assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-14, "J = {j}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn assemble_with_zero_v() {
        let p = small(16, 3);
        let mut o = Oracle::new(&p);
        let x = rand_vec(1, 3);
        let y = rand_vec(2, 3);
        let h = assemble_hypergradient(&mut o, &x, &y, &Vector::zeros(3), 1, 1, &mut full()).unwrap();
        assert_eq!(h, exact::grad_x_f(&p, &x, &y));
        let v = rand_vec(3, 3);
        let h = assemble_hypergradient(&mut o, &x, &y, &v, 1, 1, &mut full()).unwrap();
        assert!((h - (exact::grad_x_f(&p, &x, &y) + &v * p.r())).norm() < 1e-14);
    }

    #[test]
    fn assemble_at_solution_is_true_hypergradient() {
        let p = small(17, 5);
        let x = rand_vec(4, 5);
        let y = p.y_star(&x).unwrap();
        let v = exact::aid_linear_solution(&p, &x, &y).unwrap();
        let mut o = Oracle::new(&p);
        let h = assemble_hypergradient(&mut o, &x, &y, &v, 1, 1, &mut full()).unwrap();
        let want = p.grad_phi_true(&x).unwrap();
        assert!((h - &want).norm() <= 1e-8 * want.norm().max(1.0));
    }

    #[test]
    fn stochastic_ns_is_unbiased() {
        let p = small(18, 3);
        let x = rand_vec(1, 3);
        let y = rand_vec(2, 3);
        let (j, eta) = (3usize, 0.05);
        let mut o = Oracle::new(&p);
        let det = estimate_ns(&mut o, &x, &y, j, eta, p.val().len(), p.train().len(), p.train().len(), &mut full())
            .unwrap();
        // deterministic full-batch expectation; stochastic mean over seeds
        let n = 10_000;
        let mut sum = Vector::zeros(3);
        let mut sumsq = Vector::zeros(3);
        for seed in 0..n {
            let mut s = Sampler::stochastic(RngStream::new(seed, 1));
            let h = estimate_ns(&mut o, &x, &y, j, eta, 2, 2, 2, &mut s).unwrap();
            sumsq += h.component_mul(&h);
            sum += h;
        }
        let mean = &sum / n as f64;
        for k in 0..3 {
            let var = sumsq[k] / n as f64 - mean[k] * mean[k];
            let se = (var / n as f64).sqrt();
            assert!((mean[k] - det[k]).abs() <= 4.0 * se + 1e-12, "coord {k}");
        }
    }

    #[test]
    fn warm_start_beats_cold_at_fixed_x() {
        let p = small(19, 3);
        let x = rand_vec(1, 3);
        let y = p.y_star(&x).unwrap();
        let target = p.grad_phi_true(&x).unwrap();
        let eta = 0.5 / max_eig(&exact::hessian_yy_g(&p, &x, &y));
        let run = |warm: bool| {
            let mut o = Oracle::new(&p);
            let mut st = WarmState::zeros(3);
            let mut h = Vector::zeros(3);
            for _ in 0..3 {
                h = estimate_sgd(&mut o, &x, &y, &mut st, 1, eta, 1, 1, 1, &mut full(), warm).unwrap();
            }
            (h - &target).norm()
        };
        let mut o = Oracle::new(&p);
        let ns = (estimate_ns(&mut o, &x, &y, 1, eta, 1, 1, 1, &mut full()).unwrap() - &target).norm();
        let cold = run(false);
        assert!((cold - ns).abs() < 1e-12);
        assert!(run(true) < cold);
    }

    #[test]
    fn invalid_configs() {
        let base = EstimatorConfig {
            method: Method::StochasticNs,
            j: 3,
            eta: 0.1,
            warm_start: false,
            d_f: 5,
            d_g: 5,
            d: 5,
        };
        assert!(base.validate().is_ok());
        assert!(EstimatorConfig { j: 0, ..base.clone() }.validate().is_err());
        assert!(EstimatorConfig { eta: 0.0, ..base.clone() }.validate().is_err());
        assert!(EstimatorConfig {
            warm_start: true,
            ..base.clone()
        }
        .validate()
        .is_err());
    }

    fn profile(m: f64, l: f64, tau: f64, rho: f64, mu: f64) -> LipschitzProfile {
        LipschitzProfile {
            m,
            l,
            tau,
            rho,
            mu,
            ..Default::default()
        }
    }

    #[test]
    fn bias_bound_vanishes_at_solution() {
        let pr = profile(0.5, 0.9, 0.1, 0.2, 0.3);
        let inp = BiasInputs {
            t: 3,
            j: 4,
            eta: 0.5,
            beta: 0.5,
            dist_y: 0.0,
            trajectory: vec![0.0; 3],
            dist_v0: 0.0,
        };
        assert_eq!(bias_bound(&pr, Method::SgdEstimation, &inp).unwrap(), 0.0);
    }

    #[test]
    fn bias_bound_large_j_limit() {
        let (m, l, tau, rho, mu) = (0.5, 0.9, 0.1, 0.2, 0.3);
        let pr = profile(m, l, tau, rho, mu);
        let inp = BiasInputs {
            t: 1,
            j: 5000,
            eta: 0.5,
            beta: 0.5,
            dist_y: 0.7,
            trajectory: vec![0.7],
            dist_v0: 1.3,
        };
        let got = bias_bound(&pr, Method::SgdEstimation, &inp).unwrap();
        let want = (l + m * tau / mu + l * (m * rho / mu + l) / mu) * 0.7;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn bias_bound_refuses_out_of_regime() {
        let inp = BiasInputs {
            t: 1,
            j: 1,
            eta: 0.5,
            beta: 0.5,
            dist_y: 0.1,
            trajectory: vec![0.1],
            dist_v0: 0.1,
        };
        let msg = |e: Error| e.to_string();
        assert!(msg(bias_bound(&profile(1.0, 0.9, 0.0, 0.0, 1.0), Method::StochasticNs, &inp).unwrap_err()).contains("mu"));
        assert!(msg(bias_bound(&profile(1.0, 1.5, 0.0, 0.0, 0.5), Method::StochasticNs, &inp).unwrap_err()).contains("L < 1"));
        let skew = BiasInputs { beta: 0.4, ..inp };
        assert!(msg(bias_bound(&profile(1.0, 0.9, 0.0, 0.0, 0.5), Method::StochasticNs, &skew).unwrap_err()).contains("beta"));
    }
}

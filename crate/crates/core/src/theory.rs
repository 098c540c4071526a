//! Analytical constants and step-size prescriptions for SSGD.

use std::fmt;

use crate::error::{Error, Result};
use crate::synthetic::SyntheticProblem;

/// Smoothness and noise constants of a bilevel problem.
///
/// `m`: Lipschitz constant of `f`; `l`: Lipschitz constant of `∇f` and `∇g`;
/// `tau`: of `∇_x∇_y g`; `rho`: of `∇²_y g`; `mu`: strong convexity of
/// `g(x, ·)`. The `sigma_*` fields bound the per-sample variances of
/// `∇F`, `∇_y G`, `∇_x∇_y G` and `∇²_y G`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LipschitzProfile {
    pub m: f64,
    pub l: f64,
    pub tau: f64,
    pub rho: f64,
    pub mu: f64,
    pub sigma_f2: f64,
    pub sigma_g2: f64,
    pub sigma_g1_2: f64,
    pub sigma_g2_2: f64,
}

impl LipschitzProfile {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.m,
            self.l,
            self.tau,
            self.rho,
            self.mu,
            self.sigma_f2,
            self.sigma_g2,
            self.sigma_g1_2,
            self.sigma_g2_2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("profile constants must be finite"));
        }
        for (name, v) in [("M", self.m), ("L", self.l), ("mu", self.mu)] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("rho", self.rho),
            ("sigma_f2", self.sigma_f2),
            ("sigma_g2", self.sigma_g2),
            ("sigma_g1_2", self.sigma_g1_2),
            ("sigma_g2_2", self.sigma_g2_2),
        ] {
            if v < 0.0 {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.mu > self.l {
            return Err(Error::invalid(format!("mu = {} exceeds L = {}", self.mu, self.l)));
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }
}

/// Constants of the synthetic problem for `‖x‖ ≤ radius`.
///
/// The second derivatives of `g` are constant, so `tau = rho = 0`. The
/// variance bounds hold uniformly over the lower iterates `y*(x)` reachable
/// from the ball, and are computed by exact enumeration of the datasets.
pub fn measure_profile(problem: &SyntheticProblem, radius: f64) -> Result<LipschitzProfile> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("domain radius must be positive, got {radius}")));
    }
    let r = problem.r();
    let tr = problem.train_spectrum();
    let val = problem.val_spectrum();
    let (tr_min, tr_max) = (tr[0], *tr.last().unwrap());
    let val_max = *val.last().unwrap();

    let mu = tr_min + r;
    // Hessian of g in (x, y) is [[rI, −rI], [−rI, A_tr + rI]].
    let l_g = (tr_max + 2.0 * r + (tr_max * tr_max + 4.0 * r * r).sqrt()) / 2.0;
    let l_f = (6.0 * radius).max(val_max);
    let l = l_g.max(l_f);

    let y_radius = (problem.b_tr().norm() + r * radius) / mu;
    let grad_x = 3.0 * radius * radius;
    let grad_y = val_max * y_radius + problem.b_val().norm();
    let m = (grad_x * grad_x + grad_y * grad_y).sqrt();

    let (hess_var_tr, cross_var_tr) = centered_moments(problem.train(), problem.a_tr(), problem.b_tr());
    let (hess_var_val, cross_var_val) = centered_moments(problem.val(), problem.a_val(), problem.b_val());
    // ‖(U_i − A) y − (v_i u_i − b)‖² ≤ 2‖U_i − A‖²‖y‖² + 2‖v_i u_i − b‖²
    let sigma_g2 = 2.0 * hess_var_tr * y_radius * y_radius + 2.0 * cross_var_tr;
    let sigma_f2 = 2.0 * hess_var_val * y_radius * y_radius + 2.0 * cross_var_val;

    let profile = LipschitzProfile {
        m,
        l,
        tau: 0.0,
        rho: 0.0,
        mu,
        sigma_f2,
        sigma_g2,
        sigma_g1_2: 0.0,
        sigma_g2_2: hess_var_tr,
    };
    profile.validate()?;
    Ok(profile)
}

/// `(mean ‖u uᵀ − A‖_F², mean ‖v u − b‖²)` over a dataset.
fn centered_moments(
    set: &crate::synthetic::RegressionSet,
    a: &nalgebra::DMatrix<f64>,
    b: &crate::oracle::Vector,
) -> (f64, f64) {
    let n = set.len() as f64;
    let a_frob2 = a.norm_squared();
    let (mut hess, mut cross) = (0.0, 0.0);
    for i in 0..set.len() {
        let u = crate::oracle::Vector::from_column_slice(set.feature(i));
        let uu = u.norm_squared();
        let uau = u.dot(&(a * &u));
        hess += uu * uu - 2.0 * uau + a_frob2;
        let t = set.target(i);
        cross += t * t * uu - 2.0 * t * u.dot(b) + b.norm_squared();
    }
    ((hess / n).max(0.0), (cross / n).max(0.0))
}

/// Smoothness constant of `Φ`.
pub fn l_phi(p: &LipschitzProfile) -> f64 {
    let LipschitzProfile { m, l, tau, rho, mu, .. } = *p;
    l + (2.0 * l * l + tau * m * m) / mu
        + (rho * l * m + l * l * l + tau * m * l) / (mu * mu)
        + rho * l * l * m / (mu * mu * mu)
}

/// `C_1 = Mρ/μ² + L/μ`.
pub fn c1(p: &LipschitzProfile) -> f64 {
    p.m * p.rho / (p.mu * p.mu) + p.l / p.mu
}

/// `C̄_1 = L + Mτ/μ`.
pub fn c1_bar(p: &LipschitzProfile) -> f64 {
    p.l + p.m * p.tau / p.mu
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingConstants {
    pub c21: f64,
    pub c22: f64,
    pub c23: f64,
    pub c24: f64,
}

pub fn coupling_constants(p: &LipschitzProfile, eta: f64, r_w: f64, j: usize) -> CouplingConstants {
    let c1 = c1(p);
    let k = 1.0 + 1.0 / r_w;
    CouplingConstants {
        c21: (1.0 - eta * p.mu).powi(j as i32) * (1.0 + r_w).powi(2),
        c22: k * (2.0 + 8.0 * p.l * p.l / (p.mu * p.mu)) * c1 * c1,
        c23: k * (5.0 + r_w) * c1 * c1,
        c24: k * (9.0 + 8.0 * r_w) * c1 * c1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions {
    /// Multiplies the order-only prescription of `ρ_2`.
    pub rho2_scale: f64,
    /// Inner-loop length at which `C_21` is evaluated. `J = 1` is the worst case.
    pub j: usize,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self { rho2_scale: 1.0, j: 1 }
    }
}

/// Step sizes and constants for arbitrary `T, J ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Params {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub r_v: f64,
    pub r_w: f64,
    pub rho_y: f64,
    pub rho_1: f64,
    pub rho_2: f64,
    pub l_31: f64,
    pub l_phi: f64,
    pub c1_bar: f64,
    pub constants: CouplingConstants,
    /// The three quantities `alpha` is the minimum of.
    pub alpha_candidates: [f64; 3],
    pub j: usize,
}

pub fn theorem1_params(p: &LipschitzProfile, opts: &TheoryOptions) -> Result<Theorem1Params> {
    p.validate()?;
    check_options(opts)?;
    let (l, mu) = (p.l, p.mu);
    let eta = 1.0 / (2.0 * l);
    let beta = 3.0 / (2.0 * (l + mu));
    let r_v = 2.0 * mu * l / (l * l + mu * mu);
    let r_w = eta * mu / (7.0 * (2.0 - eta * mu));
    let rho_y = 2.0 * beta * mu * l / (mu + l);
    let rho_2 = opts.rho2_scale * p.kappa().powi(-4);
    let constants = coupling_constants(p, eta, r_w, opts.j);
    let CouplingConstants { c22, c23, c24, .. } = constants;
    let gap = rho_y * (1.0 + r_v) - r_v;
    if !(gap > 0.0) {
        return Err(Error::InvalidState(format!(
            "rho_y (1 + r_v) - r_v = {gap} is not positive, so rho_1 is undefined"
        )));
    }
    let rho_1 = 2.0 * rho_2 * ((1.0 + r_w) * c23 + 2.0 * c24) / gap;
    let l_phi = l_phi(p);
    let l_31 = l_phi / 2.0 + 2.0 * ((rho_1 + c24 * rho_2) * (2.0 / r_v) * (l * l) / (mu * mu) + (1.0 + r_w) * c22 * rho_2);
    let c1_bar = c1_bar(p);
    let alpha_candidates = [
        1.0 / (2.0 * l_31),
        rho_2 * eta * mu / (4.0 * l * l),
        ((1.0 + r_w) * c23 + 2.0 * c24) * rho_2 / (c1_bar * c1_bar),
    ];
    let alpha = alpha_candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let out = Theorem1Params {
        alpha,
        beta,
        eta,
        r_v,
        r_w,
        rho_y,
        rho_1,
        rho_2,
        l_31,
        l_phi,
        c1_bar,
        constants,
        alpha_candidates,
        j: opts.j,
    };
    ensure_positive(&[
        ("alpha", alpha),
        ("r_w", r_w),
        ("rho_1", rho_1),
        ("rho_2", rho_2),
        ("L_31", l_31),
        ("C_21", constants.c21),
    ])?;
    Ok(out)
}

/// Step sizes, constants and minimal loop lengths for the `O(κ)` regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Params {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub r_v: f64,
    pub r_w: f64,
    pub rho_1: f64,
    pub rho_2: f64,
    pub l_31: f64,
    pub l_phi: f64,
    pub c1_bar: f64,
    pub constants: CouplingConstants,
    pub alpha_candidates: [f64; 3],
    /// Real-valued lower bound on `T`.
    pub t_bound: f64,
    /// Real-valued lower bound on `J`.
    pub j_bound: f64,
    pub t_min: usize,
    pub j_min: usize,
}

pub fn theorem2_params(p: &LipschitzProfile, opts: &TheoryOptions) -> Result<Theorem2Params> {
    p.validate()?;
    check_options(opts)?;
    let (l, mu) = (p.l, p.mu);
    let (r_v, r_w) = (1.0, 1.0);
    let eta = 1.0 / (2.0 * l);
    let beta = eta;
    let rho_2 = opts.rho2_scale * p.kappa().powi(-3);
    let constants = coupling_constants(p, eta, r_w, opts.j);
    let CouplingConstants { c22, c23, c24, .. } = constants;
    let rho_1 = 2.0 * rho_2 * (1.0 + r_w) * c23;
    let l_phi = l_phi(p);
    let l_31 = l_phi / 2.0 + 2.0 * (rho_1 * l * l / (4.0 * mu * mu) + rho_2 * (1.0 + r_w) * c22);
    let c1_bar = c1_bar(p);
    let alpha_candidates = [
        1.0 / (2.0 * l_31),
        rho_2 / (4.0 * l * l),
        0.5 * rho_2 * (1.0 + r_w) * c23 / (c1_bar * c1_bar),
    ];
    let alpha = alpha_candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let t_bound = (rho_1 / (8.0 * (rho_1 + c24 * rho_2))).ln() / (l / (mu + l)).ln();
    let j_bound = (1.0 / (4.0 * (1.0 + r_w) * (1.0 + r_w))).ln() / (1.0 - eta * mu).ln();
    ensure_positive(&[
        ("alpha", alpha),
        ("rho_1", rho_1),
        ("rho_2", rho_2),
        ("L_31", l_31),
        ("T bound", t_bound),
        ("J bound", j_bound),
    ])?;
    Ok(Theorem2Params {
        alpha,
        beta,
        eta,
        r_v,
        r_w,
        rho_1,
        rho_2,
        l_31,
        l_phi,
        c1_bar,
        constants,
        alpha_candidates,
        t_bound,
        j_bound,
        t_min: tolerant_ceil(t_bound).max(1),
        j_min: tolerant_ceil(j_bound).max(1),
    })
}

/// Ceiling that ignores rounding noise just above an integer.
fn tolerant_ceil(v: f64) -> usize {
    let nearest = v.round();
    if (v - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as usize
    } else {
        v.ceil() as usize
    }
}

fn check_options(opts: &TheoryOptions) -> Result<()> {
    if !(opts.rho2_scale > 0.0) || !opts.rho2_scale.is_finite() {
        return Err(Error::invalid(format!("rho2_scale must be positive, got {}", opts.rho2_scale)));
    }
    if opts.j == 0 {
        return Err(Error::invalid("J must be at least 1"));
    }
    Ok(())
}

fn ensure_positive(values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::Numerical(format!("{name} evaluated to {v}")));
        }
    }
    Ok(())
}

impl fmt::Display for LipschitzProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "M           {:.6e}", self.m)?;
        writeln!(f, "L           {:.6e}", self.l)?;
        writeln!(f, "tau         {:.6e}", self.tau)?;
        writeln!(f, "rho         {:.6e}", self.rho)?;
        writeln!(f, "mu          {:.6e}", self.mu)?;
        writeln!(f, "kappa       {:.6e}", self.kappa())?;
        writeln!(f, "sigma_f^2   {:.6e}", self.sigma_f2)?;
        writeln!(f, "sigma_g^2   {:.6e}", self.sigma_g2)?;
        writeln!(f, "sigma_g1^2  {:.6e}", self.sigma_g1_2)?;
        write!(f, "sigma_g2^2  {:.6e}", self.sigma_g2_2)
    }
}

impl fmt::Display for Theorem1Params {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eta         {:.6e}", self.eta)?;
        writeln!(f, "beta        {:.6e}", self.beta)?;
        writeln!(f, "alpha       {:.6e}", self.alpha)?;
        writeln!(f, "r_v         {:.6e}", self.r_v)?;
        writeln!(f, "r_w         {:.6e}", self.r_w)?;
        writeln!(f, "rho_y       {:.6e}", self.rho_y)?;
        writeln!(f, "rho_1       {:.6e}", self.rho_1)?;
        writeln!(f, "rho_2       {:.6e}", self.rho_2)?;
        writeln!(f, "L_Phi       {:.6e}", self.l_phi)?;
        writeln!(f, "L_31        {:.6e}", self.l_31)?;
        writeln!(f, "{:<12}{:.6e}", format!("C_21 (J={})", self.j), self.constants.c21)?;
        writeln!(f, "C_22        {:.6e}", self.constants.c22)?;
        writeln!(f, "C_23        {:.6e}", self.constants.c23)?;
        write!(f, "C_24        {:.6e}", self.constants.c24)
    }
}

impl fmt::Display for Theorem2Params {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eta         {:.6e}", self.eta)?;
        writeln!(f, "beta        {:.6e}", self.beta)?;
        writeln!(f, "alpha       {:.6e}", self.alpha)?;
        writeln!(f, "rho_1       {:.6e}", self.rho_1)?;
        writeln!(f, "rho_2       {:.6e}", self.rho_2)?;
        writeln!(f, "L_Phi       {:.6e}", self.l_phi)?;
        writeln!(f, "L_31        {:.6e}", self.l_31)?;
        writeln!(f, "T_min       {} ({:.4})", self.t_min, self.t_bound)?;
        write!(f, "J_min       {} ({:.4})", self.j_min, self.j_bound)
    }
}

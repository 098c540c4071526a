//! Quadratic bilevel test problem with closed-form solution map.
//!
//! Upper objective: `f(x, y) = mean_val ½(yᵀu_i − v_i)² + ‖x‖³`.
//! Lower objective: `g(x, y) = mean_tr ½(yᵀu_i − v_i)² + (r/2)‖y − x‖²`.
//!
//! With `A = mean u uᵀ` and `b = mean v u` over each split,
//! `y*(x) = (A_tr + rI)⁻¹(b_tr + r x)` and
//! `∇Φ(x) = r (A_tr + rI)⁻¹ (A_val y*(x) − b_val) + 3‖x‖ x`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::oracle::{BilevelProblem, HypergradientReference, RngStream, Vector};

/// Row-major set of `(u_i, v_i)` regression pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSet {
    dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl RegressionSet {
    pub fn new(dim: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != dim * targets.len() {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains a non-finite value"));
        }
        Ok(Self {
            dim,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    /// `(mean u uᵀ, mean v u, mean ½v²)`.
    pub fn moments(&self) -> (DMatrix<f64>, Vector, f64) {
        let n = self.len() as f64;
        let u = DMatrix::from_row_slice(self.len(), self.dim, &self.features);
        let t = Vector::from_column_slice(&self.targets);
        let gram = (u.transpose() * &u) / n;
        let cross = (u.transpose() * &t) / n;
        let half_sq = self.targets.iter().map(|v| 0.5 * v * v).sum::<f64>() / n;
        (gram, cross, half_sq)
    }

    /// Multiplies every feature and target by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            features: self.features.iter().map(|v| v * s).collect(),
            targets: self.targets.iter().map(|v| v * s).collect(),
        }
    }

    fn residual(&self, i: usize, y: &Vector) -> f64 {
        self.feature(i).iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() - self.targets[i]
    }
}

/// Generator settings; defaults reproduce the 10000/10000 split with r = 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub r: f64,
    /// Per-coordinate variance of the random part `e_i` of each feature vector.
    pub feature_variance: f64,
    /// Variance of the additive target noise.
    pub noise_variance: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_val: 10_000,
            r: 0.5,
            feature_variance: 0.01,
            noise_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    r: f64,
    w0: Vector,
    train: RegressionSet,
    val: RegressionSet,
    a_tr: DMatrix<f64>,
    b_tr: Vector,
    a_val: DMatrix<f64>,
    b_val: Vector,
    val_half_sq: f64,
    shifted_chol: Cholesky<f64, Dyn>,
}

/// Draws `u_i = (e_i, 1)` with `e_i ~ N(0, σ_e² I)` and `v_i = w0ᵀu_i + noise`;
/// the first `n_train` pairs form the training split.
pub fn generate_dataset(rng: &mut RngStream, w0: &Vector, cfg: &SyntheticConfig) -> Result<SyntheticProblem> {
    let p = w0.len();
    if p < 2 {
        return Err(Error::invalid(format!("dimension must be at least 2, got {p}")));
    }
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(Error::invalid("both splits need at least one sample"));
    }
    if cfg.feature_variance < 0.0 || cfg.noise_variance < 0.0 {
        return Err(Error::invalid("variances must be non-negative"));
    }
    let e_std = cfg.feature_variance.sqrt();
    let noise_std = cfg.noise_variance.sqrt();
    let mut draw = |n: usize| -> Result<RegressionSet> {
        let mut features = Vec::with_capacity(n * p);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let start = features.len();
            for _ in 0..p - 1 {
                features.push(e_std * rng.standard_normal());
            }
            features.push(1.0);
            let clean: f64 = features[start..].iter().zip(w0.iter()).map(|(a, b)| a * b).sum();
            targets.push(clean + noise_std * rng.standard_normal());
        }
        RegressionSet::new(p, features, targets)
    };
    let train = draw(cfg.n_train)?;
    let val = draw(cfg.n_val)?;
    SyntheticProblem::new(w0.clone(), cfg.r, train, val)
}

impl SyntheticProblem {
    pub fn new(w0: Vector, r: f64, train: RegressionSet, val: RegressionSet) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid(format!("regularization r must be positive, got {r}")));
        }
        if train.dim() != val.dim() || train.dim() != w0.len() {
            return Err(Error::invalid("train, validation and w0 dimensions disagree"));
        }
        let (a_tr, b_tr, _) = train.moments();
        let (a_val, b_val, val_half_sq) = val.moments();
        let p = w0.len();
        let shifted = &a_tr + DMatrix::identity(p, p) * r;
        let shifted_chol = Cholesky::new(shifted)
            .ok_or_else(|| Error::Numerical("A_tr + rI is not positive definite".into()))?;
        Ok(Self {
            r,
            w0,
            train,
            val,
            a_tr,
            b_tr,
            a_val,
            b_val,
            val_half_sq,
            shifted_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.w0.len()
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn w0(&self) -> &Vector {
        &self.w0
    }

    pub fn train(&self) -> &RegressionSet {
        &self.train
    }

    pub fn val(&self) -> &RegressionSet {
        &self.val
    }

    pub fn a_tr(&self) -> &DMatrix<f64> {
        &self.a_tr
    }

    pub fn b_tr(&self) -> &Vector {
        &self.b_tr
    }

    pub fn a_val(&self) -> &DMatrix<f64> {
        &self.a_val
    }

    pub fn b_val(&self) -> &Vector {
        &self.b_val
    }

    /// Same data with features and targets multiplied by `s` and a new `r`.
    pub fn rescaled(&self, s: f64, r: f64) -> Result<Self> {
        Self::new(self.w0.clone(), r, self.train.scaled(s), self.val.scaled(s))
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector has dimension {}, problem has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `(A_tr + rI)⁻¹ (b_tr + r x)` by Cholesky solve.
    pub fn y_star(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        Ok(self.shifted_chol.solve(&(&self.b_tr + x * self.r)))
    }

    pub fn grad_phi_true(&self, x: &Vector) -> Result<Vector> {
        let y = self.y_star(x)?;
        let inner = &self.a_val * &y - &self.b_val;
        Ok(self.shifted_chol.solve(&inner) * self.r + cube_norm_grad(x))
    }

    pub fn upper_value(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.a_val * y)) - self.b_val.dot(y) + self.val_half_sq + x.norm().powi(3)
    }

    pub fn phi_true(&self, x: &Vector) -> Result<f64> {
        let y = self.y_star(x)?;
        Ok(self.upper_value(x, &y))
    }

    /// Eigenvalues of `A_tr` in ascending order.
    pub fn train_spectrum(&self) -> Vec<f64> {
        ascending_eigenvalues(&self.a_tr)
    }

    pub fn val_spectrum(&self) -> Vec<f64> {
        ascending_eigenvalues(&self.a_val)
    }

    /// `(λ_max(A_tr) + r) / (λ_min(A_tr) + r)`.
    pub fn lower_condition_number(&self) -> f64 {
        let s = self.train_spectrum();
        (s[s.len() - 1] + self.r) / (s[0] + self.r)
    }

    /// Smallest eigenvalue of the lower Hessian `A_tr + rI`.
    pub fn lower_strong_convexity(&self) -> f64 {
        self.train_spectrum()[0] + self.r
    }
}

fn ascending_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Gradient of `‖x‖³`, defined as zero at the origin.
pub fn cube_norm_grad(x: &Vector) -> Vector {
    x * (3.0 * x.norm())
}

impl BilevelProblem for SyntheticProblem {
    fn upper_dim(&self) -> usize {
        self.dim()
    }

    fn lower_dim(&self) -> usize {
        self.dim()
    }

    fn upper_samples(&self) -> usize {
        self.val.len()
    }

    fn lower_samples(&self) -> usize {
        self.train.len()
    }

    // The ‖x‖³ term is deterministic and attached to every sample.
    fn add_grad_x_upper(&self, x: &Vector, _y: &Vector, _i: usize, weight: f64, out: &mut Vector) {
        out.axpy(weight * 3.0 * x.norm(), x, 1.0);
    }

    fn add_grad_y_upper(&self, _x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector) {
        let res = self.val.residual(i, y);
        for (o, u) in out.iter_mut().zip(self.val.feature(i)) {
            *o += weight * res * u;
        }
    }

    fn add_grad_y_lower(&self, x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector) {
        let res = self.train.residual(i, y);
        let u = self.train.feature(i);
        for k in 0..out.len() {
            out[k] += weight * (res * u[k] + self.r * (y[k] - x[k]));
        }
    }

    fn add_hvp_lower(&self, _x: &Vector, _y: &Vector, i: usize, v: &Vector, weight: f64, out: &mut Vector) {
        let u = self.train.feature(i);
        let uv: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        for k in 0..out.len() {
            out[k] += weight * (uv * u[k] + self.r * v[k]);
        }
    }

    fn add_jvp_lower(&self, _x: &Vector, _y: &Vector, _i: usize, v: &Vector, weight: f64, out: &mut Vector) {
        out.axpy(-weight * self.r, v, 1.0);
    }
}

impl HypergradientReference for SyntheticProblem {
    fn phi(&self, x: &Vector) -> Result<f64> {
        self.phi_true(x)
    }

    fn grad_phi(&self, x: &Vector) -> Result<Vector> {
        self.grad_phi_true(x)
    }
}

//! Data hyper-cleaning on synthetic Gaussian blobs.
//!
//! The upper variable `x ∈ R^{n_tr}` holds one weight logit per training
//! sample; the lower variable `y ∈ R^{C·d}` is a linear classifier stored
//! row-major (row `c` scores class `c`). With softmax cross-entropy `L`:
//!
//! * `g(x, y) = mean_tr σ(x_i) L(y u_i, v_i) + c‖y‖²`
//! * `f(x, y) = mean_val L(y u_j, v_j)`

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::oracle::{exact, BilevelProblem, HypergradientReference, RngStream, Vector};

/// Row-major features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::invalid("feature buffer does not match label count"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains a non-finite feature"));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub features: usize,
    pub classes: usize,
    pub corruption_prob: f64,
    /// Ridge weight `c` of the lower objective.
    pub ridge: f64,
    /// Standard deviation of the class centroids around the origin;
    /// points scatter around their centroid with unit variance.
    pub centroid_scale: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 200,
            n_test: 1000,
            features: 5,
            classes: 3,
            corruption_prob: 0.3,
            ridge: 0.001,
            centroid_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HypercleanProblem {
    classes: usize,
    ridge: f64,
    corruption_prob: f64,
    train: LabeledSet,
    clean_labels: Vec<usize>,
    corrupted: Vec<bool>,
    val: LabeledSet,
    test: LabeledSet,
}

/// Samples Gaussian class blobs and corrupts each training label with
/// probability `corruption_prob` by redrawing it uniformly.
pub fn generate_blobs(rng: &mut RngStream, cfg: &BlobConfig) -> Result<HypercleanProblem> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.features == 0 || cfg.classes == 0 {
        return Err(Error::invalid("n_train, n_val, features and classes must all be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.corruption_prob) {
        return Err(Error::invalid(format!(
            "corruption_prob must lie in [0, 1], got {}",
            cfg.corruption_prob
        )));
    }
    let d = cfg.features;
    let centroids: Vec<f64> = (0..cfg.classes * d)
        .map(|_| cfg.centroid_scale * rng.standard_normal())
        .collect();
    let draw = |n: usize, rng: &mut RngStream| -> Result<LabeledSet> {
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.index(cfg.classes);
            for k in 0..d {
                features.push(centroids[c * d + k] + rng.standard_normal());
            }
            labels.push(c);
        }
        LabeledSet::new(d, features, labels)
    };
    let clean_train = draw(cfg.n_train, rng)?;
    let val = draw(cfg.n_val, rng)?;
    let test = draw(cfg.n_test, rng)?;

    let clean_labels = clean_train.labels.clone();
    let mut corrupted = vec![false; cfg.n_train];
    let mut labels = clean_labels.clone();
    for i in 0..cfg.n_train {
        if rng.uniform() < cfg.corruption_prob {
            corrupted[i] = true;
            labels[i] = rng.index(cfg.classes);
        }
    }
    let train = LabeledSet::new(d, clean_train.features, labels)?;
    HypercleanProblem::new(cfg.classes, cfg.ridge, cfg.corruption_prob, train, clean_labels, corrupted, val, test)
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_prime(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 - s)
}

/// Per-sample softmax quantities for a classifier row-major in `y`.
struct SoftmaxEval {
    probs: Vec<f64>,
    loss: f64,
}

fn softmax_eval(y: &Vector, u: &[f64], label: usize, classes: usize) -> SoftmaxEval {
    let d = u.len();
    let logits: Vec<f64> = (0..classes)
        .map(|c| (0..d).map(|k| y[c * d + k] * u[k]).sum())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = max + sum.ln() - logits[label];
    SoftmaxEval { probs, loss }
}

impl HypercleanProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        classes: usize,
        ridge: f64,
        corruption_prob: f64,
        train: LabeledSet,
        clean_labels: Vec<usize>,
        corrupted: Vec<bool>,
        val: LabeledSet,
        test: LabeledSet,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::invalid(format!("ridge weight must be positive, got {ridge}")));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation sets must be non-empty"));
        }
        if train.dim() != val.dim() || train.dim() != test.dim() {
            return Err(Error::invalid("feature dimensions of the splits disagree"));
        }
        if clean_labels.len() != train.len() || corrupted.len() != train.len() {
            return Err(Error::invalid("corruption record does not match the training set"));
        }
        let labels_ok = |s: &[usize]| s.iter().all(|&l| l < classes);
        if !labels_ok(train.labels()) || !labels_ok(val.labels()) || !labels_ok(test.labels()) || !labels_ok(&clean_labels)
        {
            return Err(Error::invalid(format!("label outside 0..{classes}")));
        }
        Ok(Self {
            classes,
            ridge,
            corruption_prob,
            train,
            clean_labels,
            corrupted,
            val,
            test,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.train.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn corruption_prob(&self) -> f64 {
        self.corruption_prob
    }

    pub fn train(&self) -> &LabeledSet {
        &self.train
    }

    pub fn val(&self) -> &LabeledSet {
        &self.val
    }

    pub fn test(&self) -> &LabeledSet {
        &self.test
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.clean_labels
    }

    pub fn corruption_mask(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn lower_value(&self, x: &Vector, y: &Vector) -> f64 {
        let n = self.train.len() as f64;
        let data: f64 = (0..self.train.len())
            .map(|i| sigmoid(x[i]) * softmax_eval(y, self.train.feature(i), self.train.label(i), self.classes).loss)
            .sum();
        data / n + self.ridge * y.norm_squared()
    }

    pub fn upper_value(&self, y: &Vector) -> f64 {
        let n = self.val.len() as f64;
        (0..self.val.len())
            .map(|j| softmax_eval(y, self.val.feature(j), self.val.label(j), self.classes).loss)
            .sum::<f64>()
            / n
    }

    /// Minimizes `g(x, ·)` by damped Newton steps from zero.
    ///
    /// Stops when the gradient norm drops below `1e-10` or after `max_steps`.
    pub fn solve_lower(&self, x: &Vector, max_steps: usize) -> Result<Vector> {
        if x.len() != self.train.len() {
            return Err(Error::invalid("x must hold one logit per training sample"));
        }
        let mut y = Vector::zeros(self.lower_dim());
        let mut value = self.lower_value(x, &y);
        for _ in 0..max_steps {
            let grad = exact::grad_y_g(self, x, &y);
            if grad.norm() < 1e-10 {
                break;
            }
            let h = exact::hessian_yy_g(self, x, &y);
            let step = nalgebra::Cholesky::new(h)
                .ok_or_else(|| Error::Numerical("lower Hessian lost positive definiteness".into()))?
                .solve(&grad);
            let mut t = 1.0;
            loop {
                let cand = &y - &step * t;
                let cand_value = self.lower_value(x, &cand);
                if cand_value <= value - 1e-4 * t * grad.dot(&step) || t < 1e-12 {
                    y = cand;
                    value = cand_value;
                    break;
                }
                t *= 0.5;
            }
        }
        Ok(y)
    }

    /// Test accuracy and macro-averaged F1 of the classifier `y`.
    ///
    /// `x` is accepted for symmetry with the bilevel pair but does not affect
    /// predictions.
    pub fn eval_metrics(&self, _x: &Vector, y: &Vector) -> Result<(f64, f64)> {
        classification_metrics(&self.test, y, self.classes)
    }

    /// Mean `σ(x_i)` over corrupted and over clean training samples.
    pub fn weight_means(&self, x: &Vector) -> (f64, f64) {
        let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0usize, 0.0, 0usize);
        for (i, &bad) in self.corrupted.iter().enumerate() {
            if bad {
                sc += sigmoid(x[i]);
                nc += 1;
            } else {
                sk += sigmoid(x[i]);
                nk += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        (mean(sc, nc), mean(sk, nk))
    }
}

/// Argmax class of `y u`, ties going to the lowest index.
pub fn predict(y: &Vector, u: &[f64], classes: usize) -> usize {
    let d = u.len();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..classes {
        let s: f64 = (0..d).map(|k| y[c * d + k] * u[k]).sum();
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

pub fn classification_metrics(set: &LabeledSet, y: &Vector, classes: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::InvalidState("evaluation set is empty".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    let mut correct = 0usize;
    for i in 0..set.len() {
        let guess = predict(y, set.feature(i), classes);
        let truth = set.label(i);
        predicted[guess] += 1;
        actual[truth] += 1;
        if guess == truth {
            tp[guess] += 1;
            correct += 1;
        }
    }
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            if tp[c] == 0 {
                return 0.0;
            }
            let precision = tp[c] as f64 / predicted[c] as f64;
            let recall = tp[c] as f64 / actual[c] as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .sum();
    Ok((correct as f64 / set.len() as f64, f1_sum / classes as f64))
}

impl BilevelProblem for HypercleanProblem {
    fn upper_dim(&self) -> usize {
        self.train.len()
    }

    fn lower_dim(&self) -> usize {
        self.classes * self.train.dim()
    }

    fn upper_samples(&self) -> usize {
        self.val.len()
    }

    fn lower_samples(&self) -> usize {
        self.train.len()
    }

    fn add_grad_x_upper(&self, _x: &Vector, _y: &Vector, _i: usize, _weight: f64, _out: &mut Vector) {}

    fn add_grad_y_upper(&self, _x: &Vector, y: &Vector, j: usize, weight: f64, out: &mut Vector) {
        let u = self.val.feature(j);
        let s = softmax_eval(y, u, self.val.label(j), self.classes);
        add_outer(out, &s.probs, self.val.label(j), u, weight);
    }

    fn add_grad_y_lower(&self, x: &Vector, y: &Vector, i: usize, weight: f64, out: &mut Vector) {
        let u = self.train.feature(i);
        let label = self.train.label(i);
        let s = softmax_eval(y, u, label, self.classes);
        add_outer(out, &s.probs, label, u, weight * sigmoid(x[i]));
        out.axpy(weight * 2.0 * self.ridge, y, 1.0);
    }

    fn add_hvp_lower(&self, x: &Vector, y: &Vector, i: usize, v: &Vector, weight: f64, out: &mut Vector) {
        let u = self.train.feature(i);
        let d = u.len();
        let s = softmax_eval(y, u, self.train.label(i), self.classes);
        // (diag(p) − ppᵀ)(V u) ⊗ u
        let vu: Vec<f64> = (0..self.classes)
            .map(|c| (0..d).map(|k| v[c * d + k] * u[k]).sum())
            .collect();
        let pv: f64 = s.probs.iter().zip(&vu).map(|(a, b)| a * b).sum();
        let w = weight * sigmoid(x[i]);
        for c in 0..self.classes {
            let t = s.probs[c] * (vu[c] - pv);
            for k in 0..d {
                out[c * d + k] += w * t * u[k];
            }
        }
        out.axpy(weight * 2.0 * self.ridge, v, 1.0);
    }

    fn add_jvp_lower(&self, x: &Vector, y: &Vector, i: usize, v: &Vector, weight: f64, out: &mut Vector) {
        let u = self.train.feature(i);
        let d = u.len();
        let label = self.train.label(i);
        let s = softmax_eval(y, u, label, self.classes);
        let dot: f64 = (0..self.classes)
            .map(|c| {
                let coef = s.probs[c] - if c == label { 1.0 } else { 0.0 };
                coef * (0..d).map(|k| v[c * d + k] * u[k]).sum::<f64>()
            })
            .sum();
        out[i] += weight * sigmoid_prime(x[i]) * dot;
    }
}

fn add_outer(out: &mut Vector, probs: &[f64], label: usize, u: &[f64], weight: f64) {
    let d = u.len();
    for (c, p) in probs.iter().enumerate() {
        let coef = weight * (p - if c == label { 1.0 } else { 0.0 });
        for k in 0..d {
            out[c * d + k] += coef * u[k];
        }
    }
}

/// Newton iterations used for the reference solution of the lower problem.
pub const REFERENCE_LOWER_STEPS: usize = 200;

impl HypergradientReference for HypercleanProblem {
    fn phi(&self, x: &Vector) -> Result<f64> {
        let y = self.solve_lower(x, REFERENCE_LOWER_STEPS)?;
        Ok(self.upper_value(&y))
    }

    fn grad_phi(&self, x: &Vector) -> Result<Vector> {
        let y = self.solve_lower(x, REFERENCE_LOWER_STEPS)?;
        exact::aid_hypergradient(self, x, &y)
    }
}

/// Dense per-sample softmax Hessian block, used by tests as an explicit oracle.
#[doc(hidden)]
pub fn dense_softmax_hessian(y: &Vector, u: &[f64], classes: usize) -> DMatrix<f64> {
    let d = u.len();
    let s = softmax_eval(y, u, 0, classes);
    DMatrix::from_fn(classes * d, classes * d, |r, c| {
        let (a, k) = (r / d, r % d);
        let (b, l) = (c / d, c % d);
        let delta = if a == b { s.probs[a] } else { 0.0 };
        (delta - s.probs[a] * s.probs[b]) * u[k] * u[l]
    })
}

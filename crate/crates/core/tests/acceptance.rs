//! End-to-end acceptance checks. Runs as a plain binary (no libtest
//! harness) so every criterion prints exactly one PASS/FAIL line.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use bilevel_core::algorithms::*;
use bilevel_core::estimators::*;
use bilevel_core::hyperclean::{generate_blobs, BlobConfig, HypercleanProblem, REFERENCE_LOWER_STEPS};
use bilevel_core::oracle::{exact, BatchSpec, HypergradientReference};
use bilevel_core::synthetic::{generate_dataset, SyntheticConfig, SyntheticProblem};
use bilevel_core::theory::*;
use bilevel_core::{BilevelProblem, Oracle, RngStream, Sampler, Vector};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn full() -> Sampler {
    Sampler::full_batch(RngStream::new(0, 0))
}

fn normal_vec(rng: &mut RngStream, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.standard_normal())
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn synthetic(seed: u64, w0: Vec<f64>, cfg: &SyntheticConfig) -> SyntheticProblem {
    generate_dataset(&mut RngStream::new(seed, 0), &Vector::from_vec(w0), cfg).unwrap()
}

fn paper_instance(seed: u64) -> SyntheticProblem {
    synthetic(seed, vec![2.0, 5.0, 7.0], &SyntheticConfig::default())
}

fn small_blobs(seed: u64) -> HypercleanProblem {
    let cfg = BlobConfig {
        n_train: 30,
        n_val: 20,
        n_test: 10,
        features: 3,
        classes: 3,
        ..Default::default()
    };
    generate_blobs(&mut RngStream::new(seed, 0), &cfg).unwrap()
}

// 1. AID assembled from full-batch pieces against the closed form, and the
// closed form against finite differences of Φ.
fn oracle_equivalence() -> Outcome {
    let mut worst_aid: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for inst in 0..20u64 {
        let p = [3, 10, 50][inst as usize % 3];
        let mut rng = RngStream::new(inst, 5);
        let w0: Vec<f64> = (0..p).map(|_| 1.0 + 3.0 * rng.uniform()).collect();
        let cfg = SyntheticConfig {
            n_train: 120,
            n_val: 80,
            feature_variance: 1.0,
            ..Default::default()
        };
        let prob = synthetic(100 + inst, w0, &cfg);
        let x = normal_vec(&mut rng, p, 0.5);
        let y = prob.y_star(&x).unwrap();

        let mut o = Oracle::new(&prob);
        let fu = BatchSpec::full(o.upper_samples()).unwrap();
        let fl = BatchSpec::full(o.lower_samples()).unwrap();
        let gx = o.grad_x_f(&x, &y, &fu);
        let gy = o.grad_y_f(&x, &y, &fu);
        let mut h = DMatrix::zeros(p, p);
        let mut jac = DMatrix::zeros(p, p);
        for i in 0..p {
            let e = Vector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
            h.set_column(i, &o.hvp_yy_g(&x, &y, &fl, &e));
            jac.set_column(i, &o.jvp_xy_g(&x, &y, &fl, &e));
        }
        let v = h.lu().solve(&gy).ok_or("singular lower Hessian")?;
        let aid = gx - jac * v;
        let truth = prob.grad_phi_true(&x).unwrap();
        worst_aid = worst_aid.max((&aid - &truth).norm() / truth.norm());

        let mut fd = Vector::zeros(p);
        for i in 0..p {
            let step = 1e-5 * x[i].abs().max(1.0);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += step;
            xm[i] -= step;
            fd[i] = (prob.phi_true(&xp).unwrap() - prob.phi_true(&xm).unwrap()) / (2.0 * step);
        }
        worst_fd = worst_fd.max((&fd - &truth).norm() / truth.norm());
    }
    check(
        worst_aid <= 1e-8 && worst_fd <= 1e-5,
        format!("max rel err AID {worst_aid:.1e} (tol 1e-8), finite differences {worst_fd:.1e} (tol 1e-5)"),
    )
}

fn dense_step(h: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
    DMatrix::identity(h.nrows(), h.ncols()) - h * step
}

// 2. Estimator algebra against dense linear algebra.
fn estimator_algebra() -> Outcome {
    let prob = small_blobs(3);
    let (p, q) = (prob.upper_dim(), prob.lower_dim());
    let mut rng = RngStream::new(11, 2);
    let x = normal_vec(&mut rng, p, 1.0);
    let y = normal_vec(&mut rng, q, 0.3);
    let hess = exact::hessian_yy_g(&prob, &x, &y);
    let jac = exact::jacobian_xy_g(&prob, &x, &y);
    let g = exact::grad_y_f(&prob, &x, &y);
    let gx = exact::grad_x_f(&prob, &x, &y);
    let (nu, nf) = (prob.upper_samples(), prob.lower_samples());

    // Neumann truncation.
    let eta = 0.5;
    let step = dense_step(&hess, eta);
    let mut ns_err: f64 = 0.0;
    for j in 1..=20 {
        let mut sum = Vector::zeros(q);
        let mut term = g.clone();
        for _ in 0..j {
            sum += &term;
            term = &step * term;
        }
        let want = &gx - &jac * (sum * eta);
        let mut o = Oracle::new(&prob);
        let got = estimate_ns(&mut o, &x, &y, j, eta, nu, nf, nf, &mut full()).map_err(|e| e.to_string())?;
        ns_err = ns_err.max(rel(&got, &want));
    }

    // Backpropagation through T full-batch lower steps.
    let beta = 0.4;
    let mut bp_err: f64 = 0.0;
    for t in [0usize, 1, 5, 20] {
        let mut traj = vec![y.clone()];
        for _ in 0..t {
            let last = traj.last().unwrap();
            traj.push(last - exact::grad_y_g(&prob, &x, last) * beta);
        }
        let y_t = traj[t].clone();
        let w = exact::grad_y_f(&prob, &x, &y_t);
        let mut want = exact::grad_x_f(&prob, &x, &y_t);
        for s in 0..t {
            // (I − βH_{s+1}) ⋯ (I − βH_{T−1}) ∇_y f
            let mut prod = DMatrix::identity(q, q);
            for y_r in &traj[s + 1..t] {
                prod *= dense_step(&exact::hessian_yy_g(&prob, &x, y_r), beta);
            }
            want -= exact::jacobian_xy_g(&prob, &x, &traj[s]) * (prod * &w) * beta;
        }
        let mut o = Oracle::new(&prob);
        let mut sm = full();
        let (y_run, tape) = ll_sgd(&mut o, &x, &y, t, beta, nf, &mut sm, true).map_err(|e| e.to_string())?;
        bp_err = bp_err.max(rel(&y_run, &y_t));
        let got = estimate_bp(&mut o, &x, &y_run, &tape.unwrap(), nu, &mut sm).map_err(|e| e.to_string())?;
        bp_err = bp_err.max(rel(&got, &want));
    }

    // SGD on the linear system contracts at rate 1 − ημ.
    let eig = hess.clone().symmetric_eigen().eigenvalues;
    let (mu, l) = (eig.min(), eig.max());
    let eta_s = 1.0 / l;
    let v_star = hess.clone().lu().solve(&g).ok_or("singular lower Hessian")?;
    let v0 = normal_vec(&mut rng, q, 2.0);
    let mut sgd_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for j in 1..=50 {
        let mut o = Oracle::new(&prob);
        let mut st = WarmState::new(y.clone(), v0.clone());
        sgd_linear_solve(&mut o, &x, &y, &mut st, j, eta_s, nu, nf, &mut full(), true).map_err(|e| e.to_string())?;
        let lhs = (&st.v - &v_star).norm();
        let rhs = (1.0 - eta_s * mu).powi(j as i32) * (&v0 - &v_star).norm();
        worst_ratio = worst_ratio.max(lhs / rhs);
        sgd_ok &= lhs <= rhs * (1.0 + 1e-9);
    }
    check(
        ns_err <= 1e-10 && bp_err <= 1e-10 && sgd_ok,
        format!("NS err {ns_err:.1e}, BP err {bp_err:.1e} (tol 1e-10), SGD worst ratio to bound {worst_ratio:.3}"),
    )
}

// 3. Measured deterministic bias below the analytic bound.
fn bias_bound_check() -> Outcome {
    let base = synthetic(
        21,
        vec![1.0, 2.0, 3.0],
        &SyntheticConfig {
            n_train: 60,
            n_val: 60,
            feature_variance: 1.0,
            ..Default::default()
        },
    );
    let scale = (0.2 / base.train_spectrum().last().unwrap()).sqrt();
    let prob = base.rescaled(scale, 0.2).unwrap();
    let radius = 0.1;
    let profile = measure_profile(&prob, radius).map_err(|e| e.to_string())?;
    if !(profile.mu < 1.0 && profile.l < 1.0) {
        return Err(format!("rescaling left mu = {}, L = {}", profile.mu, profile.l));
    }
    let eta = 0.5;
    let (nu, nf) = (prob.upper_samples(), prob.lower_samples());
    let mut rng = RngStream::new(4, 4);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let dir = normal_vec(&mut rng, 3, 1.0);
        let x = dir.normalize() * (0.8 * radius);
        let truth = prob.grad_phi_true(&x).unwrap();
        let y_star = prob.y_star(&x).unwrap();
        let hess = exact::hessian_yy_g(&prob, &x, &y_star);
        let jac = exact::jacobian_xy_g(&prob, &x, &y_star);
        let jh = (&jac * hess.clone().try_inverse().ok_or("singular")?).norm();
        let v_star = exact::aid_linear_solution(&prob, &x, &y_star).map_err(|e| e.to_string())?;
        let y0 = Vector::zeros(3);
        for t in [1usize, 2, 5, 10, 20] {
            let mut o = Oracle::new(&prob);
            let mut sm = full();
            let (y_t, tape) = ll_sgd(&mut o, &x, &y0, t, eta, nf, &mut sm, true).map_err(|e| e.to_string())?;
            let tape = tape.unwrap();
            let trajectory: Vec<f64> = tape.steps.iter().map(|s| (&s.iterate - &y_star).norm()).collect();
            let dist_y = (&y_t - &y_star).norm();
            for j in [1usize, 2, 5, 10, 20] {
                for method in [Method::StochasticBp, Method::StochasticNs, Method::SgdEstimation] {
                    let mut o = Oracle::new(&prob);
                    let mut st = WarmState::zeros(3);
                    let h = match method {
                        Method::StochasticBp => estimate_bp(&mut o, &x, &y_t, &tape, nu, &mut full()),
                        Method::StochasticNs => estimate_ns(&mut o, &x, &y_t, j, eta, nu, nf, nf, &mut full()),
                        Method::SgdEstimation => {
                            estimate_sgd(&mut o, &x, &y_t, &mut st, j, eta, nu, nf, nf, &mut full(), false)
                        }
                    }
                    .map_err(|e| e.to_string())?;
                    let inputs = BiasInputs {
                        t,
                        j,
                        eta,
                        beta: eta,
                        dist_y,
                        trajectory: trajectory.clone(),
                        dist_v0: if method == Method::SgdEstimation { v_star.norm() } else { jh },
                    };
                    let bound = bias_bound(&profile, method, &inputs).map_err(|e| e.to_string())?;
                    let bias = (&truth - &h).norm();
                    worst = worst.max(bias / bound);
                    cases += 1;
                    if bias > bound {
                        return Err(format!(
                            "{} T={t} J={j}: bias {bias:.3e} > bound {bound:.3e}",
                            method.name()
                        ));
                    }
                }
            }
        }
    }
    Ok(format!(
        "{cases} cases with mu = {:.3}, L = {:.3}; max bias/bound {worst:.3}",
        profile.mu, profile.l
    ))
}

fn alg1(method: Method, j: usize, warm: bool) -> AlgorithmSpec {
    AlgorithmSpec::Algorithm1(Algorithm1Config {
        k: 3000,
        t: 5,
        alpha: 0.001,
        beta: 0.1,
        s: 5,
        estimator: EstimatorConfig {
            method,
            j,
            eta: 0.1,
            warm_start: warm,
            d_f: 5,
            d_g: 5,
            d: 5,
        },
        warm_start_y: true,
    })
}

fn run_synthetic(p: &SyntheticProblem, spec: &AlgorithmSpec, seed: u64, opts: &RunOptions) -> RunTrace {
    let init = Init::zeros(p.dim(), p.dim());
    let mut o = Oracle::new(p);
    spec.run(&mut o, &init, &mut Sampler::stochastic(RngStream::new(seed, 1)), opts)
        .unwrap()
}

// 4. Inner-solver comparison on the three-dimensional instance.
fn figure1() -> Outcome {
    let seeds = 0..3u64;
    let (mut a, mut b1, mut b20, mut c) = (0, 0, 0, 0);
    let mut finals = Vec::new();
    for seed in seeds.clone() {
        let p = paper_instance(seed);
        let opts = RunOptions::default();
        let warm = run_synthetic(&p, &alg1(Method::SgdEstimation, 1, true), seed, &opts);
        let ns1 = run_synthetic(&p, &alg1(Method::StochasticNs, 1, false), seed, &opts);
        let ns20 = run_synthetic(&p, &alg1(Method::StochasticNs, 20, false), seed, &opts);
        let cold = run_synthetic(&p, &alg1(Method::SgdEstimation, 1, false), seed, &opts);
        let ratio = |t: &RunTrace| t.last().grad_norm / t.first().grad_norm;
        finals.push(format!(
            "[{:.2} {:.2} {:.2} {:.2}]",
            ratio(&warm),
            ratio(&ns1),
            ratio(&ns20),
            ratio(&cold)
        ));
        a += warm.reaches(0.1) as usize;
        b1 += !ns1.reaches(0.1) as usize;
        b20 += ns20.reaches(0.1) as usize;
        c += (!cold.reaches(0.1) && warm.reaches(0.1)) as usize;
    }
    let n = seeds.count();
    let maj = |k: usize| 2 * k > n;
    check(
        maj(a) && maj(b1) && maj(b20) && maj(c),
        format!(
            "seeds meeting (a) {a}/{n}, (b) NS J=1 plateau {b1}/{n} and NS J=20 reach {b20}/{n}, (c) {c}/{n}; \
             final ratios warm/ns1/ns20/cold {}",
            finals.join(" ")
        ),
    )
}

// 5. Total counter units to the 0.1 threshold under a common budget.
fn figure23() -> Outcome {
    let big = 10_000_000;
    let opts = RunOptions {
        record_every: 1,
        budget: Some(20_000),
    };
    let specs = [
        AlgorithmSpec::Ssgd(SsgdConfig {
            k: big,
            t: 5,
            j: 3,
            alpha: 0.1,
            beta: 0.1,
            eta: 0.1,
            batches: Batches::uniform(1),
        }),
        AlgorithmSpec::StocBio(StocBioConfig {
            k: big,
            t: 5,
            j: 20,
            alpha: 0.1,
            beta: 0.1,
            eta: 0.1,
            batches: Batches::uniform(1),
        }),
        AlgorithmSpec::Schedule(ScheduleConfig {
            kind: ScheduleKind::Bsa,
            d_alpha: 0.1,
            d_beta: 0.1,
            k: big,
            j: 3,
            eta: 0.1,
        }),
        AlgorithmSpec::Schedule(ScheduleConfig {
            kind: ScheduleKind::Ttsa,
            d_alpha: 0.1,
            d_beta: 0.1,
            k: big,
            j: 3,
            eta: 0.1,
        }),
    ];
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let p = paper_instance(seed);
        let units: Vec<Option<u64>> = specs
            .iter()
            .map(|s| run_synthetic(&p, s, seed, &opts).units_to_threshold(0.1))
            .collect();
        let fmt = |u: &Option<u64>| u.map_or("-".to_string(), |v| v.to_string());
        rows.push(units.iter().map(fmt).collect::<Vec<_>>().join("/"));
        if let Some(ssgd) = units[0] {
            if units[1..].iter().all(|u| u.is_none_or(|b| ssgd < b)) {
                wins += 1;
            }
        }
    }
    check(
        wins >= 3,
        format!(
            "SSGD first on {wins}/5 seeds; units ssgd/stocbio/bsa/ttsa: {}",
            rows.join(" ")
        ),
    )
}

// 6. SSGD counters against the closed-form totals.
fn counter_formulas() -> Outcome {
    let prob = synthetic(
        8,
        vec![1.0, 2.0, 3.0, 4.0],
        &SyntheticConfig {
            n_train: 50,
            n_val: 40,
            ..Default::default()
        },
    );
    let mut rng = RngStream::new(99, 3);
    for case in 0..10 {
        let mut pick = |lo: usize, hi: usize| lo + rng.index(hi - lo + 1);
        let cfg = SsgdConfig {
            k: pick(1, 25),
            t: pick(1, 6),
            j: pick(1, 6),
            alpha: 0.01,
            beta: 0.05,
            eta: 0.05,
            batches: Batches {
                s: pick(1, 8),
                d: pick(1, 8),
                d_g: pick(1, 8),
                d_f: pick(1, 8),
            },
        };
        let mut o = Oracle::new(&prob);
        let init = Init::zeros(4, 4);
        run_ssgd(
            &mut o,
            &cfg,
            &init,
            &mut Sampler::stochastic(RngStream::new(case, 1)),
            &RunOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let c = o.counters();
        let (k, b) = (cfg.k as u64, cfg.batches);
        let want = [
            k * (cfg.j as u64 + 1) * b.d_f as u64,
            k * cfg.t as u64 * b.s as u64,
            k * b.d_g as u64,
            k * cfg.j as u64 * b.d as u64,
        ];
        if [c.gc_f, c.gc_g, c.jv_g, c.hv_g] != want {
            return Err(format!("config {cfg:?}: counters {c:?}, expected {want:?}"));
        }
    }
    Ok("10 random configs match K(J+1)D_f, KTS, KD_g, KJD".into())
}

// 7. Baseline schedules at fixed iterations.
fn schedule_fidelity() -> Outcome {
    let (da, db) = (0.3, 0.7);
    let ks = [0usize, 3, 31, 99];
    let mut err: f64 = 0.0;
    // √(1+k) and (1+k)^0.6, (1+k)^0.4 at these k, spelled out.
    let sqrt = [1.0, 2.0, 32f64.sqrt(), 10.0];
    let pow06 = [1.0, 4f64.powf(0.6), 8.0, 100f64.powf(0.6)];
    let pow04 = [1.0, 4f64.powf(0.4), 4.0, 100f64.powf(0.4)];
    let inner = [1usize, 2, 6, 10];
    for (i, &k) in ks.iter().enumerate() {
        err = err.max((bsa_alpha(da, k) - da / sqrt[i]).abs());
        err = err.max((ttsa_alpha(da, k) - da / pow06[i]).abs());
        err = err.max((ttsa_beta(db, k) - db / pow04[i]).abs());
        if bsa_inner_steps(k) != inner[i] {
            return Err(format!("BSA inner steps at k = {k}: {} != {}", bsa_inner_steps(k), inner[i]));
        }
        err = err.max((bsa_beta(db, k) - db / (k as f64 + 2.0)).abs());
    }
    // The drivers spend exactly the scheduled inner steps.
    let prob = synthetic(2, vec![1.0, 2.0], &SyntheticConfig { n_train: 30, n_val: 30, ..Default::default() });
    let cfg = ScheduleConfig {
        kind: ScheduleKind::Bsa,
        d_alpha: da,
        d_beta: 0.05,
        k: 100,
        j: 2,
        eta: 0.05,
    };
    let mut o = Oracle::new(&prob);
    run_bsa(&mut o, &cfg, &Init::zeros(2, 2), &mut full(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let steps: u64 = (0..100).map(|k| bsa_inner_steps(k) as u64).sum();
    let per_step = prob.lower_samples() as u64;
    check(
        err <= 1e-12 && o.counters().gc_g == steps * per_step,
        format!("max step-size error {err:.1e}; BSA lower steps {} of {steps}", o.counters().gc_g / per_step),
    )
}

fn profile(l: f64, mu: f64) -> LipschitzProfile {
    LipschitzProfile {
        m: 1.0,
        l,
        tau: 0.5,
        rho: 0.5,
        mu,
        sigma_f2: 0.1,
        sigma_g2: 0.1,
        sigma_g1_2: 0.1,
        sigma_g2_2: 0.1,
    }
}

// 8. Step-size parameters from the convergence theorems.
fn theorem_parameters() -> Outcome {
    let opts = TheoryOptions::default();
    let t2 = theorem2_params(&profile(1.0, 1.0), &opts).map_err(|e| e.to_string())?;
    let t1 = theorem1_params(&profile(2.0, 1.0), &opts).map_err(|e| e.to_string())?;
    let mut ok = t2.j_min == 4 && t2.eta == 0.5 && t1.eta == 0.25 && t1.beta == 0.5;
    for (alpha, cands) in [(t1.alpha, &t1.alpha_candidates), (t2.alpha, &t2.alpha_candidates)] {
        let min = cands.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= cands.iter().all(|&c| alpha <= c) && alpha == min && alpha > 0.0;
    }
    for l in [1.5, 3.0, 10.0] {
        let t = theorem2_params(&profile(l, 1.0), &opts).map_err(|e| e.to_string())?;
        ok &= t.alpha_candidates.iter().all(|&c| t.alpha <= c);
    }
    check(
        ok,
        format!(
            "equal-step J_min {} eta {}; constant-step eta {} beta {}; alpha {:.3e} / {:.3e}",
            t2.j_min, t2.eta, t1.eta, t1.beta, t1.alpha, t2.alpha
        ),
    )
}

// 9. Learned sample weights on corrupted blobs.
fn hyperclean_mechanism() -> Outcome {
    let (mut weights, mut acc) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let p = generate_blobs(&mut RngStream::new(seed, 0), &BlobConfig::default()).unwrap();
        let init = Init::zeros(p.upper_dim(), p.lower_dim());
        let y_uniform = p.solve_lower(&init.x0, REFERENCE_LOWER_STEPS).map_err(|e| e.to_string())?;
        let (acc0, _) = p.eval_metrics(&init.x0, &y_uniform).map_err(|e| e.to_string())?;
        let cfg = SsgdConfig {
            k: 2000,
            t: 5,
            j: 4,
            alpha: 100.0,
            beta: 0.1,
            eta: 0.1,
            batches: Batches::uniform(10),
        };
        let mut o = Oracle::new(&p);
        let opts = RunOptions {
            record_every: 500,
            budget: None,
        };
        let tr = run_ssgd(&mut o, &cfg, &init, &mut Sampler::stochastic(RngStream::new(seed, 1)), &opts)
            .map_err(|e| e.to_string())?;
        let y = p.solve_lower(&tr.x, REFERENCE_LOWER_STEPS).map_err(|e| e.to_string())?;
        let (acc1, _) = p.eval_metrics(&tr.x, &y).map_err(|e| e.to_string())?;
        let (wc, wk) = p.weight_means(&tr.x);
        weights += (wc < wk) as usize;
        acc += (acc1 > acc0) as usize;
        rows.push(format!("[{acc0:.3}->{acc1:.3} w {wc:.2}/{wk:.2}]"));
    }
    check(
        weights >= 3 && acc >= 3,
        format!(
            "corrupted weight below clean on {weights}/5, accuracy above uniform baseline on {acc}/5 {}",
            rows.join(" ")
        ),
    )
}

fn csv(trace: &RunTrace) -> Vec<u8> {
    let mut out = Vec::new();
    trace.write_csv(&mut out, false).unwrap();
    out
}

fn run_twice<P: BilevelProblem + HypergradientReference>(p: &P, spec: &AlgorithmSpec) -> Result<bool, String> {
    let init = Init::zeros(p.upper_dim(), p.lower_dim());
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let mut o = Oracle::new(p);
        let tr = spec
            .run(&mut o, &init, &mut Sampler::stochastic(RngStream::new(17, 1)), &RunOptions::default())
            .map_err(|e| e.to_string())?;
        bytes.push(csv(&tr));
    }
    Ok(bytes[0] == bytes[1])
}

// 10. Identical config and seed give identical traces.
fn determinism() -> Outcome {
    let p = synthetic(5, vec![2.0, 5.0, 7.0], &SyntheticConfig { n_train: 300, n_val: 300, ..Default::default() });
    let ssgd = SsgdConfig {
        k: 200,
        t: 5,
        j: 3,
        alpha: 0.01,
        beta: 0.1,
        eta: 0.1,
        batches: Batches::uniform(5),
    };
    let stocbio = StocBioConfig {
        k: 200,
        t: 5,
        j: 3,
        alpha: 0.01,
        beta: 0.1,
        eta: 0.1,
        batches: Batches::uniform(5),
    };
    let sched = |kind| ScheduleConfig {
        kind,
        d_alpha: 0.1,
        d_beta: 0.1,
        k: 200,
        j: 3,
        eta: 0.1,
    };
    let a1 = |method, warm| {
        AlgorithmSpec::Algorithm1(Algorithm1Config {
            k: 200,
            t: 5,
            alpha: 0.01,
            beta: 0.1,
            s: 5,
            estimator: EstimatorConfig {
                method,
                j: 3,
                eta: 0.1,
                warm_start: warm,
                d_f: 5,
                d_g: 5,
                d: 5,
            },
            warm_start_y: false,
        })
    };
    let specs = [
        AlgorithmSpec::Ssgd(ssgd.clone()),
        AlgorithmSpec::StocBio(stocbio),
        AlgorithmSpec::Schedule(sched(ScheduleKind::Bsa)),
        AlgorithmSpec::Schedule(sched(ScheduleKind::Ttsa)),
        a1(Method::StochasticBp, false),
        a1(Method::StochasticNs, false),
        a1(Method::SgdEstimation, true),
    ];
    let mut names = Vec::new();
    for s in &specs {
        if !run_twice(&p, s)? {
            return Err(format!("{} traces differ", s.name()));
        }
        names.push(s.name());
    }
    let hc = small_blobs(1);
    if !run_twice(&hc, &AlgorithmSpec::Ssgd(SsgdConfig { k: 50, ..ssgd }))? {
        return Err("hyperclean SSGD traces differ".into());
    }
    Ok(format!("bit-identical traces for {} and hyperclean ssgd", names.join(", ")))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "closed-form oracle equivalence", limit: secs(10), run: oracle_equivalence },
        Criterion { id: 2, name: "estimator algebra", limit: secs(30), run: estimator_algebra },
        Criterion { id: 3, name: "bias bound", limit: secs(60), run: bias_bound_check },
        Criterion { id: 4, name: "inner solver comparison", limit: secs(300), run: figure1 },
        Criterion { id: 5, name: "budgeted algorithm comparison", limit: secs(600), run: figure23 },
        Criterion { id: 6, name: "complexity counters", limit: secs(30), run: counter_formulas },
        Criterion { id: 7, name: "schedule fidelity", limit: None, run: schedule_fidelity },
        Criterion { id: 8, name: "theorem parameters", limit: None, run: theorem_parameters },
        Criterion { id: 9, name: "hyper-cleaning mechanism", limit: secs(300), run: hyperclean_mechanism },
        Criterion { id: 10, name: "determinism", limit: None, run: determinism },
    ];
    let results: Vec<(Outcome, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|c| {
                s.spawn(move || {
                    let start = Instant::now();
                    let out = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
                    (out, start.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (c, (out, took)) in criteria.iter().zip(results) {
        let over = c.limit.is_some_and(|l| took > l);
        let (tag, detail) = match (&out, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; took {:.1}s, limit {:?}", took.as_secs_f64(), c.limit.unwrap())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {:2} {tag} {} ({:.1}s): {detail}", c.id, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

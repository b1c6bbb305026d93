//! The `validate` command: property checks at desk scale.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use paretokf::enkf::{cov_gg, enkf_step, run_enkf, EnkfConfig, Ensemble};
use paretokf::model::{builtin_problem, MultiObjectiveProblem, WeightVector};
use paretokf::moments::{
    finite_difference_sensitivity, integrate_moments, moment_rhs, Integrator, MomentMode, MomentParams,
    MomentState,
};
use paretokf::sampler::{adaptive_scan, direct_scan, AdaptiveConfig, EnsembleSpec};
use serde::Serialize;

use crate::stats::{median, pearson};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Skip the slow checks.
    pub quick: bool,
    /// Run the moment checks with the flow reversed; the steady-state check
    /// must then fail.
    pub reversed_flow: bool,
}

type Outcome = (bool, String);
type Check = (&'static str, Box<dyn Fn() -> Outcome>);

fn linear() -> MultiObjectiveProblem {
    builtin_problem("linear").expect("built-in")
}

fn params<'a>(p: &'a MultiObjectiveProblem, lam: f64, mode: MomentMode, opts: &ValidateOptions) -> MomentParams<'a> {
    let params = MomentParams::new(p, WeightVector::bi(lam).expect("λ in [0, 1]"), mode).expect("valid moment params");
    if opts.reversed_flow {
        params.with_reversed_flow()
    } else {
        params
    }
}

fn scalar_state(m: f64, var: f64) -> MomentState {
    MomentState::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, m * m + var), 1)
}

fn min_cov_eigen(s: &MomentState) -> f64 {
    SymmetricEigen::new(s.covariance()).eigenvalues.min()
}

fn check_fd_sensitivity(opts: &ValidateOptions) -> Outcome {
    let p = linear();
    let tight = Integrator::Dopri5 { rtol: 1e-10, atol: 1e-12 };
    let mut worst: f64 = 0.0;
    for lam in [0.25, 0.5, 0.75] {
        let prm = params(&p, lam, MomentMode::Linear, opts);
        let s0 = scalar_state(0.0, 1.0);
        let traj = match integrate_moments(&s0, &prm, 10.0, tight, &[]) {
            Ok(t) => t,
            Err(e) => return (false, format!("λ = {lam}: {e}")),
        };
        let fd = finite_difference_sensitivity(&p, &prm.lambda, MomentMode::Linear, &s0.m, &s0.e, 1e-4, 10.0, tight)
            .expect("fd weights inside the simplex");
        let prop = traj.final_state().m_lambda[0][0];
        let rel = (prop - fd.derivatives[0][0]).abs() / fd.derivatives[0][0].abs().max(1e-300);
        worst = worst.max(rel);
    }
    (worst <= 1e-4, format!("max relative error {worst:.2e} (tolerance 1e-4)"))
}

fn check_steady_state(opts: &ValidateOptions) -> Outcome {
    let p = linear();
    // exact solution at λ = 0.3: u* = y/G with G = 2 − λ, y = 1
    let lam = 0.3;
    let (g, dg) = (2.0 - lam, -1.0);
    let u = 1.0 / g;
    let du = -dg / (g * g);
    let fixed = MomentState {
        m: DVector::from_element(1, u),
        e: DMatrix::from_element(1, 1, u * u),
        m_lambda: vec![DVector::from_element(1, du)],
        e_lambda: vec![DMatrix::from_element(1, 1, 2.0 * u * du)],
        t: 0.0,
    };
    let rhs = moment_rhs(&fixed, &params(&p, lam, MomentMode::Linear, opts)).expect("shapes").max_abs();

    // attraction: |G m − y| shrinks from a spread start
    let prm = params(&p, 0.5, MomentMode::Linear, opts);
    let outputs: Vec<f64> = (1..50).map(f64::from).collect();
    let traj = match integrate_moments(&scalar_state(0.0, 1.0), &prm, 50.0, Integrator::default(), &outputs) {
        Ok(t) => t,
        Err(e) => return (false, format!("integration failed: {e}")),
    };
    let gl = 1.5;
    let res: Vec<f64> = traj.states.iter().map(|s| (gl * s.m[0] - 1.0).abs()).collect();
    let monotone = res.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let ratio = res.last().unwrap() / res[0];

    // symmetric nonlinear start stays centered
    let t1 = builtin_problem("test1").expect("built-in");
    let sym = integrate_moments(
        &scalar_state(0.0, 1.0 / 3.0),
        &params(&t1, 0.5, MomentMode::NonlinearHeuristic, opts),
        10.0,
        Integrator::default(),
        &[],
    )
    .map(|t| t.final_state().m[0].abs())
    .unwrap_or(f64::INFINITY);

    let ok = rhs <= 1e-12 && monotone && ratio <= 0.2 && sym <= 1e-10;
    (
        ok,
        format!(
            "fixed-point rhs {rhs:.1e}; |Gm−y| {:.3e} → {:.3e} (ratio {ratio:.3}, monotone {monotone}); symmetric drift {sym:.1e}",
            res[0],
            res.last().unwrap()
        ),
    )
}

fn check_variance_positivity(opts: &ValidateOptions) -> Outcome {
    let lin = linear();
    let t3 = builtin_problem("test3").expect("built-in");
    let outs: Vec<f64> = (1..100).map(|i| i as f64 * 0.1).collect();
    let mut worst = f64::INFINITY;
    let runs = [
        (&lin, MomentMode::Linear, MomentState::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0), 1)),
        (
            &t3,
            MomentMode::NonlinearHeuristic,
            MomentState::new(DVector::from_element(2, 0.5), DMatrix::from_element(2, 2, 0.25) + DMatrix::identity(2, 2) / 12.0, 1),
        ),
    ];
    for (p, mode, s0) in runs {
        match integrate_moments(&s0, &params(p, 0.5, mode, opts), 10.0, Integrator::default(), &outs) {
            Ok(t) => worst = t.states.iter().map(min_cov_eigen).fold(worst, f64::min),
            Err(e) => return (false, format!("{}: {e}", p.name())),
        }
    }
    (worst >= -1e-8, format!("min eigenvalue of E − m mᵀ {worst:.3e} (tolerance −1e-8)"))
}

fn check_self_convergence(opts: &ValidateOptions) -> Outcome {
    let t3 = builtin_problem("test3").expect("built-in");
    let coarse = Integrator::default();
    let Integrator::Dopri5 { rtol, .. } = coarse else { unreachable!() };
    let s0 = MomentState::new(DVector::from_element(2, 0.5), DMatrix::from_element(2, 2, 0.25) + DMatrix::identity(2, 2) / 12.0, 1);
    let prm = params(&t3, 0.4, MomentMode::NonlinearHeuristic, opts);
    let a = integrate_moments(&s0, &prm, 10.0, coarse, &[]);
    let b = integrate_moments(&s0, &prm, 10.0, coarse.halved(), &[]);
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let diff = (&a.final_state().m - &b.final_state().m).amax();
            (diff < rtol, format!("|Δm(T)| = {diff:.2e} after halving tolerances (< {rtol:e})"))
        }
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    }
}

/// Median over seeds of |particle mean − m(t)| for growing J.
pub fn mean_field_errors(sizes: &[usize], seeds: u64, dt: f64, t: f64) -> Vec<f64> {
    let p = linear();
    let lam = WeightVector::bi(0.5).expect("λ in [0, 1]");
    // moments of U(−1, 1)
    let s0 = MomentState::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0 / 3.0), 0);
    let prm = MomentParams::new(&p, lam.clone(), MomentMode::Linear).expect("linear problem");
    let m_ref = integrate_moments(&s0, &prm, t, Integrator::Dopri5 { rtol: 1e-10, atol: 1e-12 }, &[])
        .expect("linear moments integrate")
        .final_state()
        .m[0];
    sizes
        .iter()
        .map(|&j| {
            let errs: Vec<f64> = (0..seeds)
                .map(|seed| {
                    let cfg = EnkfConfig { dt, t_final: t, seed, ..EnkfConfig::default() };
                    let ens = Ensemble::uniform(j, &[-1.0], &[1.0], lam.clone(), seed);
                    let run = run_enkf(&p, &lam, &ens, &cfg).expect("linear EnKF run");
                    (run.mean()[0] - m_ref).abs()
                })
                .collect();
            median(&errs)
        })
        .collect()
}

fn check_mean_field() -> Outcome {
    let sizes = [10, 100, 1000];
    let med = mean_field_errors(&sizes, 10, 1e-3, 5.0);
    let ok = med.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = med.iter().map(|e| format!("{e:.3e}")).collect();
    (ok, format!("median errors for J = {sizes:?}: [{}]", shown.join(", ")))
}

fn check_subspace() -> Outcome {
    let t3 = builtin_problem("test3").expect("built-in");
    let lam = WeightVector::bi(0.5).expect("λ in [0, 1]");
    let ens0 = Ensemble::uniform(2, &[0.0, 0.0], &[1.0, 1.0], lam.clone(), 5);
    let (a, b) = (ens0.particle(0), ens0.particle(1));
    let dir = (&b - &a).normalize();
    let cfg = EnkfConfig::default();
    let mut ens = ens0;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        ens = match enkf_step(&ens, &t3, &cfg) {
            Ok(e) => e,
            Err(e) => return (false, e.to_string()),
        };
        for j in 0..ens.size() {
            let v = ens.particle(j) - &a;
            let off = (&v - &dir * dir.dot(&v)).norm();
            worst = worst.max(off);
        }
    }
    (worst <= 1e-10, format!("max distance from the initial affine span {worst:.1e} (tolerance 1e-10)"))
}

fn check_cov_psd() -> Outcome {
    let t2 = builtin_problem("test2").expect("built-in");
    let lam = WeightVector::bi(0.3).expect("λ in [0, 1]");
    let mut ens = Ensemble::uniform(10, &[-2.0], &[2.0], lam.clone(), 3);
    let cfg = EnkfConfig::default();
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let d = cov_gg(&ens, &t2, &lam).expect("shapes");
        let sym = (&d - d.transpose()).amax();
        if sym != 0.0 {
            return (false, format!("cov_gg asymmetric by {sym:e}"));
        }
        worst = worst.min(SymmetricEigen::new(d).eigenvalues.min());
        ens = match enkf_step(&ens, &t2, &cfg) {
            Ok(e) => e,
            Err(e) => return (false, e.to_string()),
        };
    }
    (worst >= -1e-12, format!("min eigenvalue of D {worst:.2e} (tolerance −1e-12)"))
}

fn check_permutation() -> Outcome {
    let t3 = builtin_problem("test3").expect("built-in");
    let lam = WeightVector::bi(0.7).expect("λ in [0, 1]");
    let ens = Ensemble::uniform(8, &[0.0, 0.0], &[1.0, 1.0], lam.clone(), 11);
    let perm: Vec<usize> = (0..8).rev().collect();
    let permuted = Ensemble::new(ens.particles.select_rows(&perm), lam);
    let cfg = EnkfConfig::default();
    let (a, b) = match (enkf_step(&ens, &t3, &cfg), enkf_step(&permuted, &t3, &cfg)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (false, e.to_string()),
    };
    let diff = (a.particles.select_rows(&perm) - &b.particles).amax();
    (diff <= 1e-12, format!("max particle difference {diff:.1e} (tolerance 1e-12)"))
}

fn check_spread() -> Outcome {
    let p = linear();
    let lam = WeightVector::bi(0.5).expect("λ in [0, 1]");
    let mut ens = Ensemble::uniform(10, &[-1.0], &[1.0], lam, 2);
    let cfg = EnkfConfig::default();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..500 {
        let before = ens.spread();
        ens = match enkf_step(&ens, &p, &cfg) {
            Ok(e) => e,
            Err(e) => return (false, e.to_string()),
        };
        worst = worst.max(ens.spread() - before);
    }
    (worst <= 1e-12, format!("max spread increase per step {worst:.1e} (tolerance 1e-12)"))
}

fn small_run() -> (MultiObjectiveProblem, EnkfConfig, EnsembleSpec) {
    (
        builtin_problem("test1").expect("built-in"),
        EnkfConfig { dt: 0.02, t_final: 4.0, seed: 9, ..EnkfConfig::default() },
        EnsembleSpec::cube(12, 1, -1.0, 1.0),
    )
}

fn check_determinism() -> Outcome {
    let (p, cfg, spec) = small_run();
    let a = direct_scan(&p, 7, &cfg, &spec);
    let b = direct_scan(&p, 7, &cfg, &spec);
    let ad = AdaptiveConfig { lambda_max_steps: Some(30), ..AdaptiveConfig::with_delta(5e-3) };
    let c = adaptive_scan(&p, &cfg, &ad, &spec);
    let d = adaptive_scan(&p, &cfg, &ad, &spec);
    match (a, b, c, d) {
        (Ok(a), Ok(b), Ok(c), Ok(d)) => {
            let ok = a == b && c == d;
            (ok, format!("direct identical: {}, adaptive identical: {}", a == b, c == d))
        }
        _ => (false, "scan failed".into()),
    }
}

/// Step-size law, monotone λ and the step/gradient relation on test1.
fn check_step_law() -> Outcome {
    let p = builtin_problem("test1").expect("built-in");
    let cfg = EnkfConfig { seed: 42, ..EnkfConfig::default() };
    let ad = AdaptiveConfig::with_delta(1e-3);
    let approx = match adaptive_scan(&p, &cfg, &ad, &EnsembleSpec::cube(20, 1, -1.0, 1.0)) {
        Ok(a) => a,
        Err(e) => return (false, e.to_string()),
    };
    let s = approx.lambdas();
    let increasing = s.windows(2).all(|w| w[1] > w[0]) && s.iter().all(|&x| (0.0..=1.0).contains(&x));
    let mut worst: f64 = 0.0;
    let (mut steps, mut inv) = (Vec::new(), Vec::new());
    for (st, w) in approx.steps.iter().zip(s.windows(2)) {
        if !st.clamped {
            worst = worst.max((w[1] - w[0]) * st.grad_norm - ad.delta);
            steps.push(w[1] - w[0]);
            inv.push(1.0 / st.grad_norm);
        }
    }
    let corr = if steps.len() >= 2 { pearson(&steps, &inv) } else { 1.0 };
    let ok = increasing && worst <= 1e-12 && corr >= 1.0 - 1e-9 && approx.complete;
    (
        ok,
        format!(
            "N_λ = {}, increasing {increasing}, max ‖Δλ‖‖∇m‖ − δ = {worst:.1e}, corr(Δλ, 1/‖∇m‖) = {corr:.12} over {} unclamped steps",
            approx.len(),
            steps.len()
        ),
    )
}

pub fn run_checks(opts: &ValidateOptions) -> Vec<CheckResult> {
    let o = *opts;
    let mut checks: Vec<Check> = vec![
        ("fd-sensitivity", Box::new(move || check_fd_sensitivity(&o))),
        ("steady-state", Box::new(move || check_steady_state(&o))),
        ("variance-positivity", Box::new(move || check_variance_positivity(&o))),
        ("self-convergence", Box::new(move || check_self_convergence(&o))),
        ("subspace", Box::new(check_subspace)),
        ("covariance-psd", Box::new(check_cov_psd)),
        ("permutation-invariance", Box::new(check_permutation)),
        ("spread-monotone", Box::new(check_spread)),
        ("determinism", Box::new(check_determinism)),
    ];
    if !opts.quick {
        checks.push(("step-size-law", Box::new(check_step_law)));
        checks.push(("mean-field-limit", Box::new(check_mean_field)));
    }
    checks
        .into_iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let (passed, detail) = f();
            CheckResult { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
        })
        .collect()
}

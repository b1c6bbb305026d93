//! Front construction: an equispaced scan over the weights and an adaptive
//! walk whose step sizes follow `δ / ‖∂m/∂λ‖`.
//!
//! Both walk the simplex in lexicographic order. For two objectives this is
//! `λ = (s, 1 − s)` with `s` running from 0 to 1. For `l > 2` the walk follows
//! the edge path `e_l → e_{l−1} → … → e_1`, parametrized by `s ∈ [0, l − 1]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enkf::{run_enkf, EnkfConfig, EnkfError, Ensemble};
use crate::model::{ModelError, MultiObjectiveProblem, WeightVector};
use crate::moments::{integrate_moments, Integrator, MomentError, MomentMode, MomentParams, MomentState};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Enkf(#[from] EnkfError),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Isotropic jitter used when the resampling covariance is degenerate.
pub const RESAMPLE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Direct,
    Adaptive,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::Adaptive => "adaptive",
        })
    }
}

/// The edge path through the simplex in lexicographic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LexPath {
    pub l: usize,
}

impl LexPath {
    pub fn new(l: usize) -> Self {
        assert!(l >= 2, "need at least two objectives");
        Self { l }
    }

    /// Length of the parameter range, `l − 1`.
    pub fn length(&self) -> f64 {
        (self.l - 1) as f64
    }

    /// Vertex indices `(from, to)` of the edge holding `s`.
    pub fn segment(&self, s: f64) -> (usize, usize) {
        let seg = (s.floor() as usize).min(self.l - 2);
        (self.l - 1 - seg, self.l - 2 - seg)
    }

    pub fn weights(&self, s: f64) -> WeightVector {
        let s = s.clamp(0.0, self.length());
        let seg = (s.floor() as usize).min(self.l - 2);
        let t = s - seg as f64;
        let (from, to) = self.segment(s);
        let mut w = vec![0.0; self.l];
        w[from] = 1.0 - t;
        w[to] += t;
        WeightVector::new(w).expect("edge points lie in the simplex")
    }

    /// Inverse of [`weights`](Self::weights) for points on the path.
    pub fn position(&self, lambda: &WeightVector) -> f64 {
        let w = lambda.as_slice();
        let last = (0..self.l).rev().find(|&i| w[i] > 0.0).unwrap_or(0);
        if last == 0 {
            return self.length();
        }
        (self.l - 1 - last) as f64 + w[last - 1]
    }

    /// Direction of travel `e_to − e_from` at `s`, in weight coordinates.
    pub fn direction(&self, s: f64) -> Vec<f64> {
        let (from, to) = self.segment(s);
        let mut d = vec![0.0; self.l];
        d[to] = 1.0;
        d[from] = -1.0;
        d
    }
}

/// One point of a front approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub lambda: WeightVector,
    pub u_star: Vec<f64>,
    /// `G_i(u*)`, one entry per objective (norm of `G_i(u*)` if `G_i` is vector valued).
    pub objective_values: Vec<f64>,
    /// `‖Γ^{-1/2}(y_i − G_i(u*))‖`, the point used by the front metrics.
    pub front_point: Vec<f64>,
}

impl ParetoEntry {
    pub fn new(problem: &MultiObjectiveProblem, lambda: WeightVector, u: &DVector<f64>) -> Self {
        let objective_values = objective_values(problem, u);
        Self {
            lambda,
            u_star: u.iter().copied().collect(),
            objective_values,
            front_point: problem.objective_vector(u),
        }
    }
}

pub fn objective_values(problem: &MultiObjectiveProblem, u: &DVector<f64>) -> Vec<f64> {
    problem
        .objectives()
        .iter()
        .map(|g| {
            let v = g.evaluate(u);
            if v.len() == 1 {
                v[0]
            } else {
                v.norm()
            }
        })
        .collect()
}

/// Diagnostics of one adaptive step, attached to the entry it starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub position: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub lambda: WeightVector,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoApproximation {
    pub strategy: Strategy,
    pub problem_name: String,
    pub entries: Vec<ParetoEntry>,
    /// Adaptive scans only: one record per step taken.
    pub steps: Vec<StepRecord>,
    /// False when the adaptive walk hit its step cap before reaching the end.
    pub complete: bool,
    pub failures: Vec<Failure>,
}

impl ParetoApproximation {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn front_points(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.front_point.clone()).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        let path = LexPath::new(self.entries.first().map_or(2, |e| e.lambda.len()));
        self.entries.iter().map(|e| path.position(&e.lambda)).collect()
    }
}

/// Size and sampling box of the initial ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub size: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl EnsembleSpec {
    pub fn cube(size: usize, d: usize, lower: f64, upper: f64) -> Self {
        Self { size, lower: vec![lower; d], upper: vec![upper; d] }
    }

    fn validate(&self, problem: &MultiObjectiveProblem) -> Result<()> {
        let d = problem.dim_u();
        if self.size < 2 {
            return Err(SamplerError::InvalidConfig(format!("ensemble size {} < 2", self.size)));
        }
        if self.lower.len() != d || self.upper.len() != d {
            return Err(SamplerError::InvalidConfig(format!("ensemble box must have dimension {d}")));
        }
        if self.lower.iter().zip(&self.upper).any(|(a, b)| !(a <= b)) {
            return Err(SamplerError::InvalidConfig("ensemble box has lower > upper".into()));
        }
        Ok(())
    }

    pub fn draw(&self, lambda: WeightVector, seed: u64) -> Ensemble {
        Ensemble::uniform(self.size, &self.lower, &self.upper, lambda, seed)
    }
}

/// `n_lambda` equispaced weights along the lexicographic path.
pub fn equispaced_weights(l: usize, n_lambda: usize) -> Vec<WeightVector> {
    let path = LexPath::new(l);
    (0..n_lambda)
        .map(|i| {
            // exact vertex for the last point, no rounding drift
            let s = if i + 1 == n_lambda { path.length() } else { path.length() * i as f64 / (n_lambda - 1) as f64 };
            path.weights(s)
        })
        .collect()
}

/// Runs the EnKF independently at each of `n_lambda` equispaced weights, all
/// from the same seeded initial ensemble. Failing weights are reported in
/// `failures` and skipped.
pub fn direct_scan(
    problem: &MultiObjectiveProblem,
    n_lambda: usize,
    enkf: &EnkfConfig,
    ensemble: &EnsembleSpec,
) -> Result<ParetoApproximation> {
    if n_lambda < 2 {
        return Err(SamplerError::InvalidConfig(format!("n_lambda = {n_lambda} < 2")));
    }
    enkf.validate()?;
    ensemble.validate(problem)?;
    let l = problem.num_objectives();
    let weights = equispaced_weights(l, n_lambda);
    let initial = ensemble.draw(weights[0].clone(), enkf.seed);
    let results: Vec<_> = weights
        .into_par_iter()
        .map(|w| {
            let run = run_enkf(problem, &w, &initial, enkf);
            (w, run)
        })
        .collect();
    let mut out = ParetoApproximation {
        strategy: Strategy::Direct,
        problem_name: problem.name().to_string(),
        entries: Vec::with_capacity(n_lambda),
        steps: Vec::new(),
        complete: true,
        failures: Vec::new(),
    };
    for (w, run) in results {
        match run {
            Ok(run) => out.entries.push(ParetoEntry::new(problem, w, &run.mean())),
            Err(e) => {
                log::warn!("direct scan: λ = {w} failed: {e}");
                out.failures.push(Failure { lambda: w, message: e.to_string() });
            }
        }
    }
    Ok(out)
}

/// Which covariance the next ensemble is drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleCovariance {
    /// `E − m mᵀ`.
    #[default]
    Central,
    /// The raw second moment `E`.
    RawSecondMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub delta: f64,
    /// Starting position on the lexicographic path (0 is the last vertex).
    pub lambda_start: f64,
    /// Cap on the number of weights; `None` means `10·⌈1/δ⌉`.
    pub lambda_max_steps: Option<usize>,
    /// Particles per resampled ensemble; `None` keeps the initial size.
    pub resample_size: Option<usize>,
    pub min_step: f64,
    pub max_step: f64,
    pub resample_covariance: ResampleCovariance,
    /// Moment closure; `None` picks the exact one for linear problems.
    pub moment_mode: Option<MomentMode>,
    pub integrator: Integrator,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            lambda_start: 0.0,
            lambda_max_steps: None,
            resample_size: None,
            min_step: 1e-5,
            max_step: 0.1,
            resample_covariance: ResampleCovariance::Central,
            moment_mode: None,
            integrator: Integrator::default(),
        }
    }
}

impl AdaptiveConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self { delta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(0.0 < self.min_step && self.min_step <= self.max_step && self.max_step <= 1.0) {
            return bad(format!("need 0 < min_step ≤ max_step ≤ 1, got [{}, {}]", self.min_step, self.max_step));
        }
        if !(self.lambda_start >= 0.0) {
            return bad(format!("lambda_start must be ≥ 0, got {}", self.lambda_start));
        }
        if self.resample_size.is_some_and(|j| j < 2) {
            return bad("resample_size must be ≥ 2".into());
        }
        Ok(())
    }

    pub fn max_steps(&self) -> usize {
        self.lambda_max_steps.unwrap_or_else(|| 10 * (1.0 / self.delta).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: WeightVector,
    pub position: f64,
    pub step: f64,
    pub grad_norm: f64,
    /// A clamp (min/max step, flat-front fallback or the path end) fired.
    pub clamped: bool,
    /// The end of the path was reached.
    pub terminal: bool,
}

/// `‖∂m/∂s‖` along the direction of travel at `s`.
pub fn path_gradient_norm(state: &MomentState, path: &LexPath, s: f64) -> f64 {
    if state.m_lambda.is_empty() {
        return 0.0;
    }
    if path.l == 2 {
        return state.m_lambda[0].norm();
    }
    // the stored directions are e_i − λ; e_to − e_from is their difference
    let (from, to) = path.segment(s);
    (&state.m_lambda[to] - &state.m_lambda[from]).norm()
}

/// `λ_{k+1} = λ_k + (δ / ‖∇m‖) e_lo`, with the step clamped and the result
/// kept on the path. Vertices in the middle of the path are not stepped over.
pub fn adaptive_step(current: &WeightVector, moment_final: &MomentState, config: &AdaptiveConfig) -> StepOutcome {
    let path = LexPath::new(current.len());
    let s = path.position(current);
    let grad_norm = path_gradient_norm(moment_final, &path, s);
    let (mut step, mut clamped) = if grad_norm > 0.0 && grad_norm.is_finite() {
        let raw = config.delta / grad_norm;
        let c = raw.clamp(config.min_step, config.max_step);
        (c, c != raw)
    } else {
        log::debug!("flat sensitivity at s = {s}, using max_step");
        (config.max_step, true)
    };
    let seg_end = (s.floor() + 1.0).min(path.length());
    if s + step >= seg_end {
        step = seg_end - s;
        clamped = true;
    }
    let position = if s + step >= seg_end { seg_end } else { s + step };
    StepOutcome {
        next: path.weights(position),
        position,
        step,
        grad_norm,
        clamped,
        terminal: position >= path.length(),
    }
}

/// Draws `size` particles from the Gaussian with mean `m` and the chosen
/// covariance (eigenvalues clipped at 0). A degenerate or clearly indefinite
/// covariance falls back to jitter of size [`RESAMPLE_JITTER`] around `m`.
pub fn resample_ensemble(
    moment_final: &MomentState,
    size: usize,
    kind: ResampleCovariance,
    lambda: WeightVector,
    seed: u64,
) -> Ensemble {
    let d = moment_final.dim();
    let m = &moment_final.m;
    let cov = match kind {
        ResampleCovariance::Central => moment_final.covariance(),
        ResampleCovariance::RawSecondMoment => moment_final.e.clone(),
    };
    let scale = moment_final.e.amax().max(1.0);
    let eig = SymmetricEigen::new((&cov + cov.transpose()) * 0.5);
    let min_eig = eig.eigenvalues.min();
    let max_eig = eig.eigenvalues.max();
    let factor = if min_eig < -1e-8 * scale {
        log::warn!("resampling covariance indefinite (min eigenvalue {min_eig:e}); using jitter");
        None
    } else if !(max_eig > 1e-14 * scale) {
        log::debug!("resampling covariance degenerate; using jitter");
        None
    } else {
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    };
    let factor = factor.unwrap_or_else(|| DMatrix::identity(d, d) * RESAMPLE_JITTER);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut particles = DMatrix::zeros(size, d);
    for j in 0..size {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let u = m + &factor * z;
        particles.set_row(j, &u.transpose());
    }
    Ensemble::new(particles, lambda)
}

fn resample_seed(seed: u64, k: usize) -> u64 {
    // splitmix-style mixing so neighbouring k give unrelated streams
    let mut z = seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Walks the weights from `lambda_start` to the end of the path. At each
/// weight the EnKF is run from the current ensemble, the moment system is
/// integrated over the same horizon from that ensemble's empirical moments
/// (zero sensitivities), the next ensemble is resampled from the result and
/// the step is chosen by [`adaptive_step`].
pub fn adaptive_scan(
    problem: &MultiObjectiveProblem,
    enkf: &EnkfConfig,
    adaptive: &AdaptiveConfig,
    ensemble: &EnsembleSpec,
) -> Result<ParetoApproximation> {
    enkf.validate()?;
    adaptive.validate()?;
    ensemble.validate(problem)?;
    let path = LexPath::new(problem.num_objectives());
    if adaptive.lambda_start > path.length() {
        return Err(SamplerError::InvalidConfig(format!(
            "lambda_start {} beyond the path end {}",
            adaptive.lambda_start,
            path.length()
        )));
    }
    let mode = adaptive.moment_mode.unwrap_or_else(|| MomentMode::for_problem(problem));
    let j_next = adaptive.resample_size.unwrap_or(ensemble.size);
    let cap = adaptive.max_steps();

    let mut out = ParetoApproximation {
        strategy: Strategy::Adaptive,
        problem_name: problem.name().to_string(),
        entries: Vec::new(),
        steps: Vec::new(),
        complete: false,
        failures: Vec::new(),
    };
    let mut lambda = path.weights(adaptive.lambda_start);
    let mut ens = ensemble.draw(lambda.clone(), enkf.seed);
    for k in 0..cap {
        let run = run_enkf(problem, &lambda, &ens, enkf)?;
        let fin = run.final_ensemble;
        out.entries.push(ParetoEntry::new(problem, lambda.clone(), &fin.mean()));
        if path.position(&lambda) >= path.length() {
            out.complete = true;
            break;
        }
        let params = MomentParams::new(problem, lambda.clone(), mode)?;
        let m0 = MomentState::from_ensemble(&fin, params.directions().len());
        let traj = integrate_moments(&m0, &params, enkf.t_final, adaptive.integrator, &[])?;
        let state = traj.final_state();
        let outcome = adaptive_step(&lambda, state, adaptive);
        out.steps.push(StepRecord {
            position: path.position(&lambda),
            grad_norm: outcome.grad_norm,
            step: outcome.step,
            clamped: outcome.clamped,
        });
        log::debug!(
            "k = {k}: s = {:.6}, ‖∇m‖ = {:.4e}, step = {:.4e}{}",
            path.position(&lambda),
            outcome.grad_norm,
            outcome.step,
            if outcome.clamped { " (clamped)" } else { "" }
        );
        ens = resample_ensemble(state, j_next, adaptive.resample_covariance, outcome.next.clone(), resample_seed(enkf.seed, k));
        lambda = outcome.next;
    }
    if !out.complete {
        log::warn!("adaptive scan stopped after {cap} weights before reaching the end of the path");
    }
    Ok(out)
}

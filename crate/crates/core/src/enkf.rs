//! Discrete ensemble Kalman iteration for a fixed weight vector.
//!
//! Every particle is moved by the same Kalman gain,
//!
//! ```text
//! u^{j,n+1} = u^{j,n} + C (D + Γ^{-1}/Δt)^{-1} (y − G(u^{j,n}, λ))
//! ```
//!
//! where `C` is the parameter/forward cross covariance and `D` the forward
//! covariance of the current ensemble.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, MultiObjectiveProblem, WeightVector};

#[derive(Debug, Error)]
pub enum EnkfError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ensemble needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("gain system is singular at λ = {lambda}, step {step}")]
    Degenerate { lambda: WeightVector, step: usize },
    #[error("non-finite particle at λ = {lambda}, step {step}, t = {time}")]
    Divergence {
        lambda: WeightVector,
        step: usize,
        time: f64,
        snapshot: DMatrix<f64>,
    },
}

pub type Result<T> = std::result::Result<T, EnkfError>;

/// How nonlinear forward models enter the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearMode {
    /// Evaluate `G(u^j)` directly; no derivatives needed.
    #[default]
    Direct,
    /// Replace every objective by its linearization about the current
    /// ensemble mean before each step.
    Linearize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnkfConfig {
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    #[serde(default)]
    pub nonlinear_mode: NonlinearMode,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self { dt: 0.01, t_final: 10.0, seed: 0, nonlinear_mode: NonlinearMode::Direct }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(EnkfError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) || !self.t_final.is_finite() {
            return Err(EnkfError::InvalidConfig(format!(
                "t_final ({}) must be finite and at least dt ({})",
                self.t_final, self.dt
            )));
        }
        Ok(())
    }

    /// Number of steps needed to reach `t_final`.
    pub fn num_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil() as usize
    }
}

/// `J` particles in `R^d` (one per row) tagged with their weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: DMatrix<f64>,
    pub lambda: WeightVector,
    pub time: f64,
    pub step: usize,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>, lambda: WeightVector) -> Self {
        Self { particles, lambda, time: 0.0, step: 0 }
    }

    /// Particles drawn i.i.d. uniformly from the box `[lower, upper]`.
    pub fn uniform(size: usize, lower: &[f64], upper: &[f64], lambda: WeightVector, seed: u64) -> Self {
        assert_eq!(lower.len(), upper.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = lower.len();
        let mut particles = DMatrix::zeros(size, d);
        for j in 0..size {
            for a in 0..d {
                particles[(j, a)] = rng.random_range(lower[a]..upper[a]);
            }
        }
        Self::new(particles, lambda)
    }

    pub fn size(&self) -> usize {
        self.particles.nrows()
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, j: usize) -> DVector<f64> {
        self.particles.row(j).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.particles.row_mean().transpose()
    }

    /// `(1/J) Σ u^j ⊗ u^j`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        self.particles.transpose() * &self.particles / self.size() as f64
    }

    /// Largest pairwise Euclidean distance between particles.
    pub fn spread(&self) -> f64 {
        let n = self.size();
        if self.dim() == 1 {
            let col = self.particles.column(0);
            return col.max() - col.min();
        }
        let mut best = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (self.particles.row(i) - self.particles.row(j)).norm();
                best = best.max(d);
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.particles.iter().all(|v| v.is_finite())
    }

    /// Copy of the ensemble relabelled with another weight vector.
    pub fn with_lambda(&self, lambda: WeightVector) -> Self {
        Self { particles: self.particles.clone(), lambda, time: 0.0, step: 0 }
    }
}

/// Forward evaluations `G(u^j, λ)`, one per row.
fn forward_rows(ens: &Ensemble, problem: &MultiObjectiveProblem, lambda: &WeightVector) -> DMatrix<f64> {
    let k = problem.dim_y();
    let mut out = DMatrix::zeros(ens.size(), k);
    for j in 0..ens.size() {
        let g = problem.weighted_forward_unchecked(&ens.particle(j), lambda);
        out.set_row(j, &g.transpose());
    }
    out
}

fn rows_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

fn check_ensemble(ens: &Ensemble, problem: &MultiObjectiveProblem, lambda: &WeightVector) -> Result<()> {
    problem.check_weights(lambda)?;
    if ens.dim() != problem.dim_u() {
        return Err(ModelError::DimensionMismatch { expected: problem.dim_u(), got: ens.dim() }.into());
    }
    Ok(())
}

/// Particle mean `Ū` and mean weighted forward evaluation `Ḡ`.
pub fn ensemble_stats(
    ens: &Ensemble,
    problem: &MultiObjectiveProblem,
    lambda: &WeightVector,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_ensemble(ens, problem, lambda)?;
    let g = forward_rows(ens, problem, lambda);
    Ok((ens.mean(), rows_mean(&g)))
}

/// `C = (1/J) Σ_j (u^j − Ū) ⊗ (G(u^j, λ) − Ḡ)`, a `d×k` matrix.
pub fn cov_ug(ens: &Ensemble, problem: &MultiObjectiveProblem, lambda: &WeightVector) -> Result<DMatrix<f64>> {
    check_ensemble(ens, problem, lambda)?;
    let g = forward_rows(ens, problem, lambda);
    Ok(centered(&ens.particles).transpose() * centered(&g) / ens.size() as f64)
}

/// `D = (1/J) Σ_j (G(u^j, λ) − Ḡ) ⊗ (G(u^j, λ) − Ḡ)`, a `k×k` matrix.
pub fn cov_gg(ens: &Ensemble, problem: &MultiObjectiveProblem, lambda: &WeightVector) -> Result<DMatrix<f64>> {
    check_ensemble(ens, problem, lambda)?;
    let g = centered(&forward_rows(ens, problem, lambda));
    Ok(g.transpose() * &g / ens.size() as f64)
}

/// One Kalman update of every particle; advances time by `dt`.
pub fn enkf_step(ens: &Ensemble, problem: &MultiObjectiveProblem, config: &EnkfConfig) -> Result<Ensemble> {
    let lambda = &ens.lambda;
    check_ensemble(ens, problem, lambda)?;
    if ens.size() < 2 {
        return Err(EnkfError::TooFewParticles(ens.size()));
    }
    let owned;
    let problem = match config.nonlinear_mode {
        NonlinearMode::Linearize if !problem.is_linear() => {
            owned = problem.linearized_at(&ens.mean())?;
            &owned
        }
        _ => problem,
    };
    let y = problem.weighted_observation(lambda)?;
    let g = forward_rows(ens, problem, lambda);
    let du = centered(&ens.particles);
    let dg = centered(&g);
    let inv_j = 1.0 / ens.size() as f64;
    let c = du.transpose() * &dg * inv_j;
    let d = dg.transpose() * &dg * inv_j;
    let system = d + problem.noise_precision() / config.dt;
    // gain = C · system^{-1}, via system^T gain^T = C^T with system symmetric
    let gain_t = system
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&c.transpose()))
        .or_else(|| system.clone().lu().solve(&c.transpose()))
        .ok_or_else(|| EnkfError::Degenerate { lambda: lambda.clone(), step: ens.step })?;

    // residual rows (y − G(u^j))ᵀ, then particles += residuals · gainᵀ
    let mut residual = -g;
    for mut row in residual.row_iter_mut() {
        row += y.transpose();
    }
    let particles = &ens.particles + residual * gain_t;
    let next = Ensemble {
        particles,
        lambda: lambda.clone(),
        time: ens.time + config.dt,
        step: ens.step + 1,
    };
    if !next.is_finite() {
        return Err(EnkfError::Divergence {
            lambda: lambda.clone(),
            step: next.step,
            time: next.time,
            snapshot: ens.particles.clone(),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub mean: DVector<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone)]
pub struct EnkfRun {
    pub final_ensemble: Ensemble,
    pub trajectory: Vec<TrajectoryPoint>,
}

impl EnkfRun {
    /// Final particle mean, the approximation of `u*(λ)`.
    pub fn mean(&self) -> DVector<f64> {
        self.final_ensemble.mean()
    }
}

/// Iterates [`enkf_step`] from `initial` until `t ≥ t_final`, recording the
/// particle mean after every step (and at `t = 0`).
pub fn run_enkf(
    problem: &MultiObjectiveProblem,
    lambda: &WeightVector,
    initial: &Ensemble,
    config: &EnkfConfig,
) -> Result<EnkfRun> {
    config.validate()?;
    let mut ens = initial.with_lambda(lambda.clone());
    check_ensemble(&ens, problem, lambda)?;
    if ens.size() < 2 {
        return Err(EnkfError::TooFewParticles(ens.size()));
    }
    let n = config.num_steps();
    let mut trajectory = Vec::with_capacity(n + 1);
    trajectory.push(TrajectoryPoint { t: 0.0, mean: ens.mean(), spread: ens.spread() });
    for _ in 0..n {
        ens = enkf_step(&ens, problem, config)?;
        trajectory.push(TrajectoryPoint { t: ens.time, mean: ens.mean(), spread: ens.spread() });
    }
    Ok(EnkfRun { final_ensemble: ens, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, ForwardModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_problem(g: f64, y: f64) -> MultiObjectiveProblem {
        MultiObjectiveProblem::new(
            "scalar",
            vec![ForwardModel::scalar_linear(g), ForwardModel::scalar_linear(g)],
            vec![DVector::from_element(1, y); 2],
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn ens1(xs: &[f64]) -> Ensemble {
        Ensemble::new(DMatrix::from_column_slice(xs.len(), 1, xs), WeightVector::bi(1.0).unwrap())
    }

    fn first() -> WeightVector {
        WeightVector::bi(1.0).unwrap()
    }

    #[test]
    fn stats_examples() {
        let p = scalar_problem(1.0, 0.0);
        let (mu, mg) = ensemble_stats(&ens1(&[0.0, 2.0]), &p, &first()).unwrap();
        assert_eq!((mu[0], mg[0]), (1.0, 1.0));

        let t1 = builtin_problem("test1").unwrap();
        let (mu, mg) = ensemble_stats(&ens1(&[0.3, 0.3, 0.3]), &t1, &first()).unwrap();
        assert_abs_diff_eq!(mu[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(mg[0], 0.04, epsilon = 1e-15);

        let (mu, mg) = ensemble_stats(&ens1(&[-0.5, 0.5]), &t1, &first()).unwrap();
        assert_eq!((mu[0], mg[0]), (0.0, 0.5));
    }

    #[test]
    fn covariance_examples() {
        let id = scalar_problem(1.0, 0.0);
        let neg = scalar_problem(-1.0, 0.0);
        let e = ens1(&[0.0, 2.0]);
        assert_eq!(cov_ug(&e, &id, &first()).unwrap()[(0, 0)], 1.0);
        assert_eq!(cov_ug(&e, &neg, &first()).unwrap()[(0, 0)], -1.0);
        assert_eq!(cov_gg(&e, &id, &first()).unwrap()[(0, 0)], 1.0);
        let flat = ens1(&[0.7, 0.7, 0.7]);
        assert!(cov_ug(&flat, &id, &first()).unwrap()[(0, 0)].abs() < 1e-30);
        assert!(cov_gg(&flat, &id, &first()).unwrap()[(0, 0)].abs() < 1e-30);
    }

    #[test]
    fn step_examples() {
        let p = scalar_problem(1.0, 1.0);
        let cfg = EnkfConfig { dt: 1.0, t_final: 1.0, ..Default::default() };
        let next = enkf_step(&ens1(&[0.0, 2.0]), &p, &cfg).unwrap();
        assert_abs_diff_eq!(next.particles[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(next.particles[(1, 0)], 1.5, epsilon = 1e-15);
        assert_eq!(next.step, 1);
        assert_eq!(next.time, 1.0);

        let flat = ens1(&[0.2, 0.2]);
        assert_eq!(enkf_step(&flat, &p, &cfg).unwrap().particles, flat.particles);

        let tiny = EnkfConfig { dt: 1e-12, t_final: 1.0, ..Default::default() };
        let next = enkf_step(&ens1(&[0.0, 2.0]), &p, &tiny).unwrap();
        assert!((next.particles[(0, 0)] - 0.0).abs() < 1e-11);
    }

    #[test]
    fn single_particle_rejected() {
        let p = scalar_problem(1.0, 1.0);
        assert!(matches!(
            enkf_step(&ens1(&[0.0]), &p, &EnkfConfig::default()),
            Err(EnkfError::TooFewParticles(1))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EnkfConfig { dt: 0.0, ..Default::default() }.validate().is_err());
        assert!(EnkfConfig { dt: 2.0, t_final: 1.0, ..Default::default() }.validate().is_err());
        assert_eq!(EnkfConfig::default().num_steps(), 1000);
    }

    #[test]
    fn fixed_point_ensemble_stays_put() {
        let t1 = builtin_problem("test1").unwrap();
        let start = ens1(&[0.5; 5]);
        let run = run_enkf(&t1, &first(), &start, &EnkfConfig { t_final: 1.0, ..Default::default() }).unwrap();
        assert!(run.trajectory.iter().all(|p| p.mean[0] == 0.5));
    }

    #[test]
    fn scalar_mean_is_monotone_toward_data() {
        let p = scalar_problem(1.0, 1.0);
        let start = Ensemble::uniform(10, &[-1.0], &[0.5], first(), 3);
        let run = run_enkf(&p, &first(), &start, &EnkfConfig { t_final: 5.0, ..Default::default() }).unwrap();
        for w in run.trajectory.windows(2) {
            assert!(w[1].mean[0] >= w[0].mean[0] - 1e-15);
            assert!(w[1].mean[0] <= 1.0);
        }
    }

    #[test]
    fn spread_is_nonincreasing_for_linear_scalar_problem() {
        let p = scalar_problem(2.0, 0.3);
        let start = Ensemble::uniform(15, &[-2.0], &[2.0], first(), 9);
        let run = run_enkf(&p, &first(), &start, &EnkfConfig { t_final: 3.0, ..Default::default() }).unwrap();
        for w in run.trajectory.windows(2) {
            assert!(w[1].spread <= w[0].spread + 1e-12);
        }
    }

    #[test]
    fn linearize_mode_requires_derivatives() {
        use std::sync::Arc;
        let sin = || {
            ForwardModel::custom(1, 1, Arc::new(|u: &DVector<f64>| u.map(f64::sin)), None)
        };
        let p = MultiObjectiveProblem::with_unit_noise("sin", vec![sin(), sin()]).unwrap();
        let cfg = EnkfConfig { nonlinear_mode: NonlinearMode::Linearize, ..Default::default() };
        assert!(matches!(
            enkf_step(&ens1(&[0.0, 1.0]), &p, &cfg),
            Err(EnkfError::Model(ModelError::NoDerivative))
        ));
    }

    #[test]
    fn runs_are_deterministic() {
        let t3 = builtin_problem("test3").unwrap();
        let lam = WeightVector::bi(0.3).unwrap();
        let a = Ensemble::uniform(12, &[0.0, 0.0], &[1.0, 1.0], lam.clone(), 77);
        let b = Ensemble::uniform(12, &[0.0, 0.0], &[1.0, 1.0], lam.clone(), 77);
        assert_eq!(a, b);
        let cfg = EnkfConfig { t_final: 0.5, ..Default::default() };
        let ra = run_enkf(&t3, &lam, &a, &cfg).unwrap();
        let rb = run_enkf(&t3, &lam, &b, &cfg).unwrap();
        assert_eq!(ra.final_ensemble.particles, rb.final_ensemble.particles);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_invariance(seed in 0u64..1000, lam in 0.0f64..=1.0) {
            let t3 = builtin_problem("test3").unwrap();
            let w = WeightVector::bi(lam).unwrap();
            let e = Ensemble::uniform(7, &[0.0, 0.0], &[1.0, 1.0], w.clone(), seed);
            let perm: Vec<usize> = (0..7).rev().collect();
            let mut shuffled = e.clone();
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.particles.set_row(dst, &e.particles.row(src));
            }
            let c1 = cov_ug(&e, &t3, &w).unwrap();
            let c2 = cov_ug(&shuffled, &t3, &w).unwrap();
            prop_assert!((c1 - c2).amax() < 1e-14);
            let cfg = EnkfConfig::default();
            let n1 = enkf_step(&e, &t3, &cfg).unwrap();
            let n2 = enkf_step(&shuffled, &t3, &cfg).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert!((n1.particles.row(src) - n2.particles.row(dst)).amax() < 1e-14);
            }
        }

        #[test]
        fn cov_gg_is_symmetric_psd(seed in 0u64..1000, lam in 0.0f64..=1.0) {
            let p = MultiObjectiveProblem::new(
                "vec",
                vec![
                    ForwardModel::linear(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5])),
                    ForwardModel::linear(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 3.0, -2.0])),
                ],
                vec![DVector::zeros(2), DVector::zeros(2)],
                DMatrix::identity(2, 2),
            ).unwrap();
            let w = WeightVector::bi(lam).unwrap();
            let e = Ensemble::uniform(6, &[-1.0, -1.0], &[1.0, 1.0], w.clone(), seed);
            let d = cov_gg(&e, &p, &w).unwrap();
            prop_assert!((&d - d.transpose()).amax() == 0.0);
            let eig = d.symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&x| x >= -1e-12));
        }
    }
}

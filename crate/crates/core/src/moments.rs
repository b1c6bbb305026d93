//! Mean-field moment equations and their weight sensitivities.
//!
//! For linear forward models the first moment `m` and second raw moment
//! `E` of the mean-field density obey a closed ODE system, and so do their
//! derivatives `m_λ`, `E_λ` along directions of the simplex. With
//! `A = Gᵀ Γ⁻¹`, `C = E − m mᵀ` and `C̄ = E_λ − m_λ mᵀ − m m_λᵀ`:
//!
//! ```text
//! dm/dt   = C A (y − G m)
//! dE/dt   = M + Mᵀ,               M = C A (y mᵀ − G E)
//! dm_λ/dt = C̄ A (y − G m) + C ∂Gᵀ Γ⁻¹ (y − G m) + C A (∂y − ∂G m − G m_λ)
//! dE_λ/dt = N + Nᵀ,               N = C̄ A (y mᵀ − G E) + C ∂Gᵀ Γ⁻¹ (y mᵀ − G E)
//!                                     + C A (∂y mᵀ + y m_λᵀ − ∂G E − G E_λ)
//! ```
//!
//! The sign is the one under which `G m = y` attracts, i.e. the dynamics
//! of the particles. A derivative "along direction `s`" means
//! `∂G = Σ_i s_i G_i`, `∂y = Σ_i s_i y_i`: for two objectives the single
//! direction `(1, −1)` of the `λ ↦ (λ, 1 − λ)` parametrization, otherwise the
//! `l` feasible directions `e_i − λ`.
//!
//! Nonlinear objectives are handled by re-linearizing every objective
//! about the current `m` at each right-hand-side evaluation, which turns
//! every `G m` into `G(m)`. That closure is a heuristic; the moment system
//! of a nonlinear model is not closed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enkf::Ensemble;
use crate::model::{ModelError, MultiObjectiveProblem, WeightVector};
use crate::ode::{Dopri5, OdeError, Rk4};

#[derive(Debug, Error)]
pub enum MomentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("linear moment mode requires linear objectives (objective {0} is nonlinear)")]
    NotLinear(usize),
    #[error("steady-state characterization is only available for d = 1, got d = {0}")]
    UnsupportedDimension(usize),
    #[error("state dimensions do not match the problem")]
    ShapeMismatch,
    #[error("integration failed (stiff or divergent) at t = {t}: {source}")]
    Stiffness {
        t: f64,
        state: Box<MomentState>,
        #[source]
        source: OdeError,
    },
    #[error("finite-difference weights leave the simplex: {0}")]
    OutsideSimplex(String),
}

pub type Result<T> = std::result::Result<T, MomentError>;

/// `(m, E, m_λ, E_λ)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub m: DVector<f64>,
    pub e: DMatrix<f64>,
    pub m_lambda: Vec<DVector<f64>>,
    pub e_lambda: Vec<DMatrix<f64>>,
    pub t: f64,
}

impl MomentState {
    /// Moments with zero sensitivities, the `λ`-independent initial data.
    pub fn new(m: DVector<f64>, e: DMatrix<f64>, directions: usize) -> Self {
        let d = m.len();
        Self {
            m_lambda: vec![DVector::zeros(d); directions],
            e_lambda: vec![DMatrix::zeros(d, d); directions],
            m,
            e,
            t: 0.0,
        }
    }

    /// Empirical moments `(1/J) Σ u_j`, `(1/J) Σ u_j ⊗ u_j` of an ensemble.
    pub fn from_ensemble(ens: &Ensemble, directions: usize) -> Self {
        Self::new(ens.mean(), ens.second_moment(), directions)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn directions(&self) -> usize {
        self.m_lambda.len()
    }

    /// `C = E − m mᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.e - &self.m * self.m.transpose()
    }

    fn flat_len(d: usize, dirs: usize) -> usize {
        (1 + dirs) * (d + d * d)
    }

    fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(Self::flat_len(d, self.directions()));
        let mut off = 0;
        let mut put = |x: &[f64]| {
            out.rows_mut(off, x.len()).copy_from_slice(x);
            off += x.len();
        };
        put(self.m.as_slice());
        put(self.e.as_slice());
        for (ml, el) in self.m_lambda.iter().zip(&self.e_lambda) {
            put(ml.as_slice());
            put(el.as_slice());
        }
        out
    }

    fn from_flat(x: &DVector<f64>, d: usize, dirs: usize, t: f64) -> Self {
        let mut off = 0;
        let mut take_v = |n: usize| {
            let v = DVector::from_column_slice(&x.as_slice()[off..off + n]);
            off += n;
            v
        };
        let m = take_v(d);
        let e = DMatrix::from_column_slice(d, d, take_v(d * d).as_slice());
        let mut m_lambda = Vec::with_capacity(dirs);
        let mut e_lambda = Vec::with_capacity(dirs);
        for _ in 0..dirs {
            m_lambda.push(take_v(d));
            e_lambda.push(DMatrix::from_column_slice(d, d, take_v(d * d).as_slice()));
        }
        Self { m, e, m_lambda, e_lambda, t }
    }
}

/// Time derivative of a [`MomentState`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRates {
    pub dm: DVector<f64>,
    pub de: DMatrix<f64>,
    pub dm_lambda: Vec<DVector<f64>>,
    pub de_lambda: Vec<DMatrix<f64>>,
}

impl MomentRates {
    pub fn max_abs(&self) -> f64 {
        let mut r = self.dm.amax().max(self.de.amax());
        for (a, b) in self.dm_lambda.iter().zip(&self.de_lambda) {
            r = r.max(a.amax()).max(b.amax());
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    /// Exact moment system; every objective must be linear.
    Linear,
    /// `G(m)` in place of `G m` (re-linearization about `m`). Not closed.
    #[default]
    NonlinearHeuristic,
}

impl MomentMode {
    /// `Linear` when every objective is linear, otherwise the heuristic.
    pub fn for_problem(problem: &MultiObjectiveProblem) -> Self {
        if problem.is_linear() {
            Self::Linear
        } else {
            Self::NonlinearHeuristic
        }
    }

    pub fn is_closed(self) -> bool {
        matches!(self, Self::Linear)
    }
}

/// Simplex directions along which sensitivities are propagated.
pub fn sensitivity_directions(lambda: &WeightVector) -> Vec<Vec<f64>> {
    let l = lambda.len();
    if l == 2 {
        return vec![vec![1.0, -1.0]];
    }
    (0..l)
        .map(|i| {
            let mut dir: Vec<f64> = lambda.as_slice().iter().map(|w| -w).collect();
            dir[i] += 1.0;
            dir
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MomentParams<'a> {
    pub problem: &'a MultiObjectiveProblem,
    pub lambda: WeightVector,
    pub mode: MomentMode,
    directions: Vec<Vec<f64>>,
    reversed: bool,
}

impl<'a> MomentParams<'a> {
    pub fn new(problem: &'a MultiObjectiveProblem, lambda: WeightVector, mode: MomentMode) -> Result<Self> {
        problem.check_weights(&lambda)?;
        if mode == MomentMode::Linear {
            if let Some(i) = problem.objectives().iter().position(|g| g.linear_matrix().is_none()) {
                return Err(MomentError::NotLinear(i));
            }
        }
        let directions = sensitivity_directions(&lambda);
        Ok(Self { problem, lambda, mode, directions, reversed: false })
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    /// Flips the sign of the whole flow. Exists only so the validation
    /// suite can check that it detects a wrong sign convention.
    #[doc(hidden)]
    pub fn with_reversed_flow(mut self) -> Self {
        self.reversed = true;
        self
    }

    /// Weighted linear data `(G, y, [∂G], [∂y])` about the point `m`.
    fn linear_data(&self, m: &DVector<f64>) -> Result<LinearData> {
        let p = self.problem;
        let (mats, obs): (Vec<DMatrix<f64>>, Vec<DVector<f64>>) = match self.mode {
            MomentMode::Linear => (
                p.objectives().iter().map(|g| g.linear_matrix().cloned().expect("checked in new")).collect(),
                p.observations().to_vec(),
            ),
            MomentMode::NonlinearHeuristic => p
                .objectives()
                .iter()
                .zip(p.observations())
                .map(|(g, y)| {
                    let jac = g.jacobian_or_fd(m);
                    let y_shift = y - g.evaluate(m) + &jac * m;
                    (jac, y_shift)
                })
                .unzip(),
        };
        let combine_m = |w: &[f64]| {
            mats.iter().zip(w).fold(DMatrix::zeros(p.dim_y(), p.dim_u()), |acc, (g, &c)| acc + g * c)
        };
        let combine_y = |w: &[f64]| obs.iter().zip(w).fold(DVector::zeros(p.dim_y()), |acc, (y, &c)| acc + y * c);
        Ok(LinearData {
            g: combine_m(self.lambda.as_slice()),
            y: combine_y(self.lambda.as_slice()),
            dg: self.directions.iter().map(|s| combine_m(s)).collect(),
            dy: self.directions.iter().map(|s| combine_y(s)).collect(),
        })
    }
}

struct LinearData {
    g: DMatrix<f64>,
    y: DVector<f64>,
    dg: Vec<DMatrix<f64>>,
    dy: Vec<DVector<f64>>,
}

fn check_state(state: &MomentState, params: &MomentParams<'_>) -> Result<()> {
    let d = params.problem.dim_u();
    let ok = state.m.len() == d
        && state.e.shape() == (d, d)
        && state.m_lambda.len() == state.e_lambda.len()
        && (state.directions() == 0 || state.directions() == params.directions.len())
        && state.m_lambda.iter().all(|v| v.len() == d)
        && state.e_lambda.iter().all(|v| v.shape() == (d, d));
    if ok {
        Ok(())
    } else {
        Err(MomentError::ShapeMismatch)
    }
}

/// Right-hand side of the moment-sensitivity system.
///
/// A state without sensitivities (`directions() == 0`) evolves only the
/// `(m, E)` subsystem.
pub fn moment_rhs(state: &MomentState, params: &MomentParams<'_>) -> Result<MomentRates> {
    check_state(state, params)?;
    let data = params.linear_data(&state.m)?;
    let prec = params.problem.noise_precision();
    let (m, e) = (&state.m, &state.e);
    let c = state.covariance();
    let a = data.g.transpose() * prec;
    let ca = &c * &a;
    let r = &data.y - &data.g * m;
    let big_r = &data.y * m.transpose() - &data.g * e;

    let dm = &ca * &r;
    let mm = &ca * &big_r;
    let de = &mm + mm.transpose();

    let mut dm_lambda = Vec::with_capacity(state.directions());
    let mut de_lambda = Vec::with_capacity(state.directions());
    for s in 0..state.directions() {
        let (ml, el) = (&state.m_lambda[s], &state.e_lambda[s]);
        let (dg, dy) = (&data.dg[s], &data.dy[s]);
        let c_bar = el - ml * m.transpose() - m * ml.transpose();
        let ca_s = &c * dg.transpose() * prec;
        let cba = &c_bar * &a;
        dm_lambda.push(&cba * &r + &ca_s * &r + &ca * (dy - dg * m - &data.g * ml));
        let n = &cba * &big_r
            + &ca_s * &big_r
            + &ca * (dy * m.transpose() + &data.y * ml.transpose() - dg * e - &data.g * el);
        de_lambda.push(&n + n.transpose());
    }

    let mut rates = MomentRates { dm, de, dm_lambda, de_lambda };
    if params.reversed {
        rates.dm.neg_mut();
        rates.de.neg_mut();
        rates.dm_lambda.iter_mut().for_each(|v| v.neg_mut());
        rates.de_lambda.iter_mut().for_each(|v| v.neg_mut());
    }
    Ok(rates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Integrator {
    /// Adaptive Dormand–Prince 5(4).
    Dopri5 { rtol: f64, atol: f64 },
    /// Fixed-step RK4; tolerance independent and bitwise reproducible.
    Rk4 { dt: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Self::Dopri5 { rtol: 1e-6, atol: 1e-9 }
    }
}

impl Integrator {
    pub fn halved(self) -> Self {
        match self {
            Self::Dopri5 { rtol, atol } => Self::Dopri5 { rtol: rtol / 2.0, atol: atol / 2.0 },
            Self::Rk4 { dt } => Self::Rk4 { dt: dt / 2.0 },
        }
    }
}

/// Moment states sampled at the requested times; the last one is the state
/// at `t_final`.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub states: Vec<MomentState>,
}

impl MomentTrajectory {
    pub fn final_state(&self) -> &MomentState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Integrates the moment system from `state0` (at `state0.t`) to `t_final`.
///
/// `outputs` are extra sampling times in `(state0.t, t_final)`; the returned
/// trajectory always starts with `state0` and ends at `t_final`.
pub fn integrate_moments(
    state0: &MomentState,
    params: &MomentParams<'_>,
    t_final: f64,
    integrator: Integrator,
    outputs: &[f64],
) -> Result<MomentTrajectory> {
    check_state(state0, params)?;
    let (d, dirs) = (state0.dim(), state0.directions());
    let t0 = state0.t;
    let mut times: Vec<f64> = outputs.iter().copied().filter(|&t| t > t0 && t < t_final).collect();
    times.push(t_final.max(t0));
    // the rhs only fails on shape errors, which check_state already ruled out
    let rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> {
        let s = MomentState::from_flat(x, d, dirs, t);
        let r = moment_rhs(&s, params).expect("state shape checked before integration");
        let rs = MomentState { m: r.dm, e: r.de, m_lambda: r.dm_lambda, e_lambda: r.de_lambda, t };
        rs.to_flat()
    };
    let x0 = state0.to_flat();
    let solved = match integrator {
        Integrator::Dopri5 { rtol, atol } => Dopri5::with_tolerances(rtol, atol).solve(rhs, t0, x0, &times),
        Integrator::Rk4 { dt } => Rk4 { dt }.solve(rhs, t0, x0, &times),
    };
    let sol = solved.map_err(|source| {
        let (t, snap) = match &source {
            OdeError::StepSizeUnderflow { t, state, .. } | OdeError::NonFinite { t, state } => {
                (*t, MomentState::from_flat(state, d, dirs, *t))
            }
            _ => (t0, state0.clone()),
        };
        MomentError::Stiffness { t, state: Box::new(snap), source }
    })?;
    let states = sol
        .times
        .iter()
        .zip(&sol.states)
        .map(|(&t, x)| MomentState::from_flat(x, d, dirs, t))
        .collect();
    Ok(MomentTrajectory { states })
}

/// `‖∇m‖`: Euclidean norm of the stacked `m_λ` vectors.
pub fn sensitivity_norm(state: &MomentState) -> f64 {
    state.m_lambda.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

/// Central finite differences of the `(m, E)` subsystem with respect to the
/// weights, one vector per sensitivity direction.
#[derive(Debug, Clone)]
pub struct FdSensitivity {
    pub derivatives: Vec<DVector<f64>>,
    /// Set when the difference is comparable to the integration error.
    pub warning: Option<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn finite_difference_sensitivity(
    problem: &MultiObjectiveProblem,
    lambda: &WeightVector,
    mode: MomentMode,
    m0: &DVector<f64>,
    e0: &DMatrix<f64>,
    h: f64,
    t_final: f64,
    integrator: Integrator,
) -> Result<FdSensitivity> {
    problem.check_weights(lambda)?;
    let directions = sensitivity_directions(lambda);
    let start = MomentState::new(m0.clone(), e0.clone(), 0);
    let solve_at = |w: Vec<f64>| -> Result<DVector<f64>> {
        let lam = WeightVector::new(w.clone()).map_err(|_| MomentError::OutsideSimplex(format!("{w:?}")))?;
        let params = MomentParams::new(problem, lam, mode)?;
        let traj = integrate_moments(&start, &params, t_final, integrator, &[])?;
        Ok(traj.final_state().m.clone())
    };
    let noise_floor = match integrator {
        Integrator::Dopri5 { rtol, atol } => rtol * m0.amax().max(1.0) + atol,
        Integrator::Rk4 { .. } => f64::EPSILON * m0.amax().max(1.0),
    };
    let mut derivatives = Vec::with_capacity(directions.len());
    let mut warning = None;
    for dir in &directions {
        let shift = |sign: f64| -> Vec<f64> {
            lambda.as_slice().iter().zip(dir).map(|(w, s)| w + sign * h * s).collect()
        };
        let plus = solve_at(shift(1.0))?;
        let minus = solve_at(shift(-1.0))?;
        let diff = &plus - &minus;
        let deriv = &diff / (2.0 * h);
        let mag = diff.amax();
        if mag > 0.0 && mag < 100.0 * noise_floor {
            warning = Some(format!(
                "step h = {h:e} too small: difference {mag:e} vs integration noise {noise_floor:e} (relative noise ≈ {:.1e})",
                noise_floor / mag
            ));
        }
        derivatives.push(deriv);
    }
    Ok(FdSensitivity { derivatives, warning })
}

/// Distance of a `d = 1` state from the nearest steady-state branch:
/// either `G m = y, G² E = y²` or `E = m², E_λ = 2 m m_λ`.
pub fn steady_state_residual(state: &MomentState, params: &MomentParams<'_>) -> Result<f64> {
    check_state(state, params)?;
    let d = state.dim();
    if d != 1 {
        return Err(MomentError::UnsupportedDimension(d));
    }
    let data = params.linear_data(&state.m)?;
    let residual_norm = |v: &DVector<f64>| v.amax();
    let g = &data.g; // k×1
    let (m, e) = (state.m[0], state.e[(0, 0)]);
    let fit = residual_norm(&(g * m - &data.y));
    // G² E = y² read componentwise for k ≥ 1
    let second: f64 = g
        .column(0)
        .iter()
        .zip(data.y.iter())
        .map(|(gi, yi)| (gi * gi * e - yi * yi).abs())
        .fold(0.0, f64::max);
    let branch_fit = fit.max(second);
    let mut branch_collapse = (e - m * m).abs();
    for (ml, el) in state.m_lambda.iter().zip(&state.e_lambda) {
        branch_collapse = branch_collapse.max((el[(0, 0)] - 2.0 * m * ml[0]).abs());
    }
    Ok(branch_fit.min(branch_collapse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, ForwardModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(g1: f64, g2: f64, y1: f64, y2: f64) -> MultiObjectiveProblem {
        MultiObjectiveProblem::new(
            "lin",
            vec![ForwardModel::scalar_linear(g1), ForwardModel::scalar_linear(g2)],
            vec![DVector::from_element(1, y1), DVector::from_element(1, y2)],
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn st(m: f64, e: f64) -> MomentState {
        MomentState::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, e), 1)
    }

    #[test]
    fn rhs_scalar_example() {
        let p = scalar(1.0, 1.0, 1.0, 1.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        let r = moment_rhs(&st(0.0, 1.0), &params).unwrap();
        assert_abs_diff_eq!(r.dm[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.de[(0, 0)], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn rhs_vanishes_at_fit_branch() {
        // G = 2, y = 3: m = 1.5, E = 2.25
        let p = scalar(2.0, 2.0, 3.0, 3.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.3).unwrap(), MomentMode::Linear).unwrap();
        let r = moment_rhs(&st(1.5, 2.25), &params).unwrap();
        assert!(r.dm[0].abs() < 1e-15 && r.de[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn zero_variance_freezes_everything() {
        let p = scalar(1.0, 3.0, 0.5, -1.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.4).unwrap(), MomentMode::Linear).unwrap();
        let r = moment_rhs(&st(0.7, 0.49), &params).unwrap();
        assert!(r.max_abs() < 1e-15);
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        // G(λ) = λ g1 + (1−λ) g2, y(λ) likewise; u*(λ) = y/G
        let (g1, g2, y1, y2) = (1.0, 2.0, 0.5, 3.0);
        let p = scalar(g1, g2, y1, y2);
        let lam = 0.3;
        let gl = lam * g1 + (1.0 - lam) * g2;
        let yl = lam * y1 + (1.0 - lam) * y2;
        let u = yl / gl;
        let du = ((y1 - y2) * gl - yl * (g1 - g2)) / (gl * gl);
        let state = MomentState {
            m: DVector::from_element(1, u),
            e: DMatrix::from_element(1, 1, u * u),
            m_lambda: vec![DVector::from_element(1, du)],
            e_lambda: vec![DMatrix::from_element(1, 1, 2.0 * u * du)],
            t: 0.0,
        };
        let params = MomentParams::new(&p, WeightVector::bi(lam).unwrap(), MomentMode::Linear).unwrap();
        assert!(moment_rhs(&state, &params).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn linear_mode_rejects_nonlinear_problems() {
        let t1 = builtin_problem("test1").unwrap();
        assert!(matches!(
            MomentParams::new(&t1, WeightVector::bi(0.5).unwrap(), MomentMode::Linear),
            Err(MomentError::NotLinear(0))
        ));
    }

    #[test]
    fn sensitivity_norm_examples() {
        let mut s = st(0.0, 1.0);
        assert_eq!(sensitivity_norm(&s), 0.0);
        s.m_lambda[0][0] = -2.0;
        assert_eq!(sensitivity_norm(&s), 2.0);
        let mut s2 = MomentState::new(DVector::zeros(2), DMatrix::identity(2, 2), 1);
        s2.m_lambda[0] = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(sensitivity_norm(&s2), 5.0);
    }

    #[test]
    fn directions_for_two_and_three_objectives() {
        assert_eq!(sensitivity_directions(&WeightVector::bi(0.2).unwrap()), vec![vec![1.0, -1.0]]);
        let w = WeightVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let dirs = sensitivity_directions(&w);
        assert_eq!(dirs.len(), 3);
        for d in dirs {
            assert!(d.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn steady_state_residual_examples() {
        let p = scalar(2.0, 2.0, 3.0, 3.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        assert!(steady_state_residual(&st(1.5, 2.25), &params).unwrap() < 1e-15);
        assert!(steady_state_residual(&st(-0.4, 0.16), &params).unwrap() < 1e-15);

        let q = scalar(1.0, 1.0, 1.0, 1.0);
        let params = MomentParams::new(&q, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        assert_abs_diff_eq!(steady_state_residual(&st(0.0, 1.0), &params).unwrap(), 1.0, epsilon = 1e-15);

        let t3 = builtin_problem("test3").unwrap();
        let params = MomentParams::new(&t3, WeightVector::bi(0.5).unwrap(), MomentMode::NonlinearHeuristic).unwrap();
        let s = MomentState::new(DVector::zeros(2), DMatrix::identity(2, 2), 1);
        assert!(matches!(steady_state_residual(&s, &params), Err(MomentError::UnsupportedDimension(2))));
    }

    #[test]
    fn zero_variance_start_is_constant() {
        let p = scalar(1.0, 2.0, 0.0, 0.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        let s0 = st(0.3, 0.09);
        let traj = integrate_moments(&s0, &params, 10.0, Integrator::default(), &[1.0, 5.0]).unwrap();
        assert_eq!(traj.states.len(), 4);
        for s in &traj.states {
            assert_eq!(s.m, s0.m);
            assert_eq!(s.e, s0.e);
        }
    }

    #[test]
    fn symmetric_start_on_test1_stays_centered() {
        let t1 = builtin_problem("test1").unwrap();
        let params = MomentParams::new(&t1, WeightVector::bi(0.5).unwrap(), MomentMode::NonlinearHeuristic).unwrap();
        let traj = integrate_moments(&st(0.0, 1.0 / 3.0), &params, 10.0, Integrator::default(), &[2.0, 4.0, 6.0]).unwrap();
        for s in &traj.states {
            assert!(s.m[0].abs() < 1e-12, "m({}) = {}", s.t, s.m[0]);
        }
    }

    #[test]
    fn t_final_zero_returns_initial_data() {
        let p = scalar(1.0, 2.0, 0.0, 1.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        let s0 = st(0.2, 1.0);
        let traj = integrate_moments(&s0, &params, 0.0, Integrator::default(), &[]).unwrap();
        assert_eq!(traj.final_state(), &s0);

        let fd = finite_difference_sensitivity(
            &p,
            &WeightVector::bi(0.5).unwrap(),
            MomentMode::Linear,
            &s0.m,
            &s0.e,
            1e-4,
            0.0,
            Integrator::default(),
        )
        .unwrap();
        assert_eq!(fd.derivatives[0][0], 0.0);
    }

    #[test]
    fn identical_objectives_have_zero_fd_sensitivity() {
        let p = scalar(1.5, 1.5, 0.4, 0.4);
        let fd = finite_difference_sensitivity(
            &p,
            &WeightVector::bi(0.5).unwrap(),
            MomentMode::Linear,
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            1e-4,
            5.0,
            Integrator::default(),
        )
        .unwrap();
        assert!(fd.derivatives[0][0].abs() < 1e-12);
    }

    #[test]
    fn fd_outside_simplex_is_an_error() {
        let p = scalar(1.0, 2.0, 0.0, 0.0);
        let err = finite_difference_sensitivity(
            &p,
            &WeightVector::bi(1.0).unwrap(),
            MomentMode::Linear,
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            1e-4,
            1.0,
            Integrator::default(),
        )
        .unwrap_err();
        assert!(matches!(err, MomentError::OutsideSimplex(_)));
    }

    #[test]
    fn reversed_flow_is_the_negation() {
        let p = scalar(1.0, 2.0, 1.0, 0.0);
        let params = MomentParams::new(&p, WeightVector::bi(0.5).unwrap(), MomentMode::Linear).unwrap();
        let s = st(0.1, 1.0);
        let fwd = moment_rhs(&s, &params).unwrap();
        let back = moment_rhs(&s, &params.clone().with_reversed_flow()).unwrap();
        assert_eq!(fwd.dm, -back.dm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // The linear system must match the heuristic on linear problems,
        // where re-linearization is exact.
        #[test]
        fn heuristic_equals_linear_on_linear_problems(
            g1 in -2.0f64..2.0, g2 in -2.0f64..2.0, y1 in -1.0f64..1.0, y2 in -1.0f64..1.0,
            m in -1.0f64..1.0, var in 0.01f64..1.0, ml in -1.0f64..1.0, el in -1.0f64..1.0,
            lam in 0.0f64..=1.0,
        ) {
            let p = scalar(g1, g2, y1, y2);
            let w = WeightVector::bi(lam).unwrap();
            let s = MomentState {
                m: DVector::from_element(1, m),
                e: DMatrix::from_element(1, 1, m * m + var),
                m_lambda: vec![DVector::from_element(1, ml)],
                e_lambda: vec![DMatrix::from_element(1, 1, el)],
                t: 0.0,
            };
            let a = moment_rhs(&s, &MomentParams::new(&p, w.clone(), MomentMode::Linear).unwrap()).unwrap();
            let b = moment_rhs(&s, &MomentParams::new(&p, w, MomentMode::NonlinearHeuristic).unwrap()).unwrap();
            prop_assert!((a.dm - b.dm).amax() < 1e-12);
            prop_assert!((a.de - b.de).amax() < 1e-12);
            prop_assert!((&a.dm_lambda[0] - &b.dm_lambda[0]).amax() < 1e-12);
            prop_assert!((&a.de_lambda[0] - &b.de_lambda[0]).amax() < 1e-12);
        }

        #[test]
        fn e_rates_are_symmetric(seed in proptest::collection::vec(-1.0f64..1.0, 10), lam in 0.0f64..=1.0) {
            let p = builtin_problem("test3").unwrap();
            let m = DVector::from_vec(vec![seed[0], seed[1]]);
            let a = DMatrix::from_row_slice(2, 2, &seed[2..6]);
            let e = &m * m.transpose() + &a * a.transpose();
            let b = DMatrix::from_row_slice(2, 2, &seed[6..10]);
            let s = MomentState {
                m: m.clone(),
                e,
                m_lambda: vec![DVector::from_vec(vec![seed[3], seed[7]])],
                e_lambda: vec![&b + b.transpose()],
                t: 0.0,
            };
            let params = MomentParams::new(&p, WeightVector::bi(lam).unwrap(), MomentMode::NonlinearHeuristic).unwrap();
            let r = moment_rhs(&s, &params).unwrap();
            prop_assert_eq!(r.de.clone(), r.de.transpose());
            prop_assert_eq!(r.de_lambda[0].clone(), r.de_lambda[0].transpose());
        }
    }
}

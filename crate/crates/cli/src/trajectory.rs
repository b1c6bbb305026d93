//! The `moments` command: a moment-sensitivity trajectory as CSV.

use anyhow::{bail, Result};
use nalgebra::{DMatrix, DVector};
use paretokf::model::{MultiObjectiveProblem, WeightVector};
use paretokf::moments::{
    integrate_moments, sensitivity_directions, sensitivity_norm, steady_state_residual, Integrator, MomentMode,
    MomentParams, MomentState, MomentTrajectory,
};

use crate::output::{csv_bytes, Artifact};

#[derive(Debug, Clone)]
pub struct MomentsRequest {
    pub lambda: Vec<f64>,
    pub t_final: f64,
    pub integrator: Integrator,
    pub m0: Vec<f64>,
    /// Initial covariance `E0 − m0 m0ᵀ`, as a multiple of the identity.
    pub variance0: f64,
    pub samples: usize,
    pub mode: Option<MomentMode>,
}

impl Default for MomentsRequest {
    fn default() -> Self {
        Self {
            lambda: vec![0.5, 0.5],
            t_final: 10.0,
            integrator: Integrator::default(),
            m0: vec![0.0],
            variance0: 1.0,
            samples: 101,
            mode: None,
        }
    }
}

pub struct MomentsOutcome {
    pub trajectory: MomentTrajectory,
    pub mode: MomentMode,
    /// Steady-state residual per row, `None` when `d > 1`.
    pub residuals: Vec<Option<f64>>,
}

/// Accepts `[λ]` as shorthand for `(λ, 1 − λ)`.
pub fn parse_weights(raw: &[f64]) -> Result<WeightVector> {
    let w = match raw {
        [l] => WeightVector::bi(*l),
        _ => WeightVector::new(raw.to_vec()),
    };
    Ok(w?)
}

pub fn compute(problem: &MultiObjectiveProblem, req: &MomentsRequest) -> Result<MomentsOutcome> {
    let lambda = parse_weights(&req.lambda)?;
    problem.check_weights(&lambda)?;
    let d = problem.dim_u();
    let m0 = match req.m0.len() {
        1 => DVector::from_element(d, req.m0[0]),
        n if n == d => DVector::from_column_slice(&req.m0),
        n => bail!("m0 has {n} entries, problem dimension is {d}"),
    };
    if !(req.variance0 >= 0.0) {
        bail!("initial variance must be nonnegative");
    }
    if !(req.t_final >= 0.0) {
        bail!("t_final must be nonnegative");
    }
    let e0 = &m0 * m0.transpose() + DMatrix::identity(d, d) * req.variance0;
    let mode = req.mode.unwrap_or_else(|| MomentMode::for_problem(problem));
    let params = MomentParams::new(problem, lambda.clone(), mode)?;
    let state0 = MomentState::new(m0, e0, sensitivity_directions(&lambda).len());
    let n = req.samples.max(2);
    let outputs: Vec<f64> = (1..n - 1).map(|i| req.t_final * i as f64 / (n - 1) as f64).collect();
    let mut trajectory = integrate_moments(&state0, &params, req.t_final, req.integrator, &outputs)?;
    if req.t_final == 0.0 {
        trajectory.states.truncate(1);
    }
    let residuals = residual_column(&trajectory, &params);
    Ok(MomentsOutcome { trajectory, mode, residuals })
}

fn residual_column(traj: &MomentTrajectory, params: &MomentParams<'_>) -> Vec<Option<f64>> {
    traj.states.iter().map(|s| steady_state_residual(s, params).ok()).collect()
}

pub fn render(outcome: &MomentsOutcome, name: &str) -> Result<Artifact> {
    let first = &outcome.trajectory.states[0];
    let (d, dirs) = (first.dim(), first.directions());
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=d).map(|i| format!("m_{i}")));
    columns.extend((1..=d).map(|i| format!("E_{i}{i}")));
    for s in 1..=dirs {
        columns.extend((1..=d).map(|i| format!("m_lambda{s}_{i}")));
    }
    columns.extend(["sensitivity_norm", "steady_residual", "closure"].map(String::from));
    let closure = if outcome.mode.is_closed() { "exact" } else { "heuristic-unclosed" };
    let rows = outcome.trajectory.states.iter().zip(&outcome.residuals).map(|(s, r)| {
        let mut row = vec![format!("{}", s.t)];
        row.extend(s.m.iter().map(|x| format!("{x}")));
        row.extend((0..d).map(|i| format!("{}", s.e[(i, i)])));
        for ml in &s.m_lambda {
            row.extend(ml.iter().map(|x| format!("{x}")));
        }
        row.push(format!("{}", sensitivity_norm(s)));
        row.push(r.map_or(String::new(), |v| format!("{v}")));
        row.push(closure.to_string());
        row
    });
    Ok(Artifact { name: name.to_string(), bytes: csv_bytes(&columns, rows)?, columns })
}

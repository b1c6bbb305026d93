//! Front quality: averaged minimal distance to a reference front and
//! a coverage fraction.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{builtin_problem, pareto_oracle_refined, ModelError, OracleGrid, WeightVector};
use crate::sampler::ParetoApproximation;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no analytic front for problem {0:?}")]
    UnknownProblem(String),
    #[error("front resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("approximation is empty")]
    EmptyApproximation,
    #[error("parameter-space distance requested but the front has no parameter points")]
    NoParameterPoints,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Reference resolution of analytic fronts.
pub const DEFAULT_RESOLUTION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontSource {
    AnalyticGrid,
    OracleGrid,
}

/// A sampled reference front: objective-space points and, where known, the
/// Pareto-set points they come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontParametrization {
    pub points: Vec<Vec<f64>>,
    pub parameters: Vec<Vec<f64>>,
    pub source: FrontSource,
}

impl FrontParametrization {
    pub fn resolution(&self) -> usize {
        self.points.len()
    }

    /// Mean distance between consecutive points.
    pub fn mean_spacing(&self) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        self.points.windows(2).map(|w| euclid(&w[0], &w[1])).sum::<f64>() / (n - 1) as f64
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest(p: &[f64], set: &[Vec<f64>]) -> f64 {
    set.iter().map(|q| euclid(p, q)).fold(f64::INFINITY, f64::min)
}

/// Reference front of a built-in problem from `n_grid` Pareto-set points:
/// `u ∈ [−½, ½]` for `test1`, `u ∈ [−1, 1]` for `test2`, `u ∈ [½, 1]` for
/// `linear`, and grid-search minimizers over `λ ∈ [0, 1]` for `test3`.
pub fn analytic_front(problem_name: &str, n_grid: usize) -> Result<FrontParametrization> {
    if n_grid < 2 {
        return Err(MetricsError::Resolution(n_grid));
    }
    let problem = builtin_problem(problem_name).map_err(|_| MetricsError::UnknownProblem(problem_name.into()))?;
    let lin = |a: f64, b: f64| -> Vec<Vec<f64>> {
        (0..n_grid).map(|i| vec![a + (b - a) * i as f64 / (n_grid - 1) as f64]).collect()
    };
    let (parameters, source) = match problem_name {
        "test1" => (lin(-0.5, 0.5), FrontSource::AnalyticGrid),
        "test2" => (lin(-1.0, 1.0), FrontSource::AnalyticGrid),
        "linear" => (lin(0.5, 1.0), FrontSource::AnalyticGrid),
        "test3" => {
            let grid = OracleGrid::cube(2, 0.0, 1.0, 0.01);
            let u: Result<Vec<Vec<f64>>> = (0..n_grid)
                .into_par_iter()
                .map(|i| {
                    let w = WeightVector::bi(i as f64 / (n_grid - 1) as f64)?;
                    let u = pareto_oracle_refined(&problem, &w, &grid, 4, 21)?;
                    Ok(u.iter().copied().collect())
                })
                .collect();
            (u?, FrontSource::OracleGrid)
        }
        other => return Err(MetricsError::UnknownProblem(other.into())),
    };
    let points = parameters
        .iter()
        .map(|u| problem.objective_vector(&DVector::from_column_slice(u)))
        .collect();
    Ok(FrontParametrization { points, parameters, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSpace {
    #[default]
    Objective,
    Parameter,
}

/// `(1/N_g) Σ_i min_k ‖x_i − p_k‖` over the reference points `x_i`.
pub fn front_distance_points(front: &[Vec<f64>], approx: &[Vec<f64>]) -> Result<f64> {
    if approx.is_empty() {
        return Err(MetricsError::EmptyApproximation);
    }
    if front.is_empty() {
        return Ok(0.0);
    }
    Ok(front.iter().map(|x| nearest(x, approx)).sum::<f64>() / front.len() as f64)
}

pub fn front_distance(front: &FrontParametrization, approx: &ParetoApproximation, space: DistanceSpace) -> Result<f64> {
    match space {
        DistanceSpace::Objective => front_distance_points(&front.points, &approx.front_points()),
        DistanceSpace::Parameter => {
            if front.parameters.is_empty() {
                return Err(MetricsError::NoParameterPoints);
            }
            let us: Vec<Vec<f64>> = approx.entries.iter().map(|e| e.u_star.clone()).collect();
            front_distance_points(&front.parameters, &us)
        }
    }
}

/// Fraction of reference points with an approximation point within `radius`.
pub fn coverage_points(front: &[Vec<f64>], approx: &[Vec<f64>], radius: f64) -> f64 {
    if front.is_empty() || approx.is_empty() {
        return 0.0;
    }
    // relative slack so that exact multiples of the spacing count as inside
    let r = radius * (1.0 + 1e-9);
    let hit = front.iter().filter(|x| nearest(x, approx) <= r).count();
    hit as f64 / front.len() as f64
}

/// [`coverage_points`] in objective space; `radius` defaults to twice the
/// mean spacing of the reference front.
pub fn coverage_span(front: &FrontParametrization, approx: &ParetoApproximation, radius: Option<f64>) -> f64 {
    let r = radius.unwrap_or_else(|| 2.0 * front.mean_spacing());
    coverage_points(&front.points, &approx.front_points(), r)
}

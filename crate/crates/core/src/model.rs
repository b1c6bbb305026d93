//! Multi-objective inverse problems and their weighted scalarization.
//!
//! A [`MultiObjectiveProblem`] bundles `l` forward models `G_i: R^d -> R^k`,
//! one observation `y_i` per model and a shared noise covariance `Γ`. For a
//! weight vector `λ` on the probability simplex the problem collapses to the
//! single least-squares problem
//!
//! ```text
//! Φ(u, λ) = ½ ‖Γ^{-1/2} Σ_i λ_i (y_i − G_i(u))‖²
//! ```
//!
//! whose minimizers, swept over `λ`, approximate the Pareto set.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ λ_i = 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight vector is not in the probability simplex: {0}")]
    InvalidWeights(String),
    #[error("noise covariance is not symmetric positive definite")]
    SingularCovariance,
    #[error("forward model has no derivative; use the G(m) heuristic instead")]
    NoDerivative,
    #[error("unknown built-in problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("oracle grid is empty")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A point `λ` of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(ModelError::InvalidWeights("empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(ModelError::InvalidWeights(format!("negative or non-finite entry {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(ModelError::InvalidWeights(format!("entries sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// `(λ, 1 − λ)`, the single-parameter form used for two objectives.
    pub fn bi(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ModelError::InvalidWeights(format!("λ = {lambda} outside [0, 1]")));
        }
        Self::new(vec![lambda, 1.0 - lambda])
    }

    /// The `i`-th vertex of the simplex with `l` coordinates.
    pub fn vertex(l: usize, i: usize) -> Self {
        let mut w = vec![0.0; l];
        w[i] = 1.0;
        Self(w)
    }

    /// Builds a weight vector from nearly-feasible coordinates by clipping
    /// negatives and renormalizing.
    pub fn projected(mut weights: Vec<f64>) -> Result<Self> {
        for w in &mut weights {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(ModelError::InvalidWeights("cannot project zero vector".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        let err: f64 = weights.iter().sum::<f64>() - 1.0;
        // push the rounding residue into the largest entry
        if err != 0.0 {
            let imax = (0..weights.len())
                .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
                .unwrap();
            weights[imax] -= err;
        }
        Self::new(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First coordinate, the scalar `λ` of the two-objective parametrization.
    pub fn first(&self) -> f64 {
        self.0[0]
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = ModelError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

impl fmt::Display for WeightVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, w) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{w}")?;
        }
        write!(f, ")")
    }
}

pub type EvalFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Closed-form families of forward models. Everything except `Custom` can
/// be read from a problem file.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `G(u) = A u`.
    Linear { matrix: Vec<Vec<f64>> },
    /// `G(u) = (u − c)ᵀ H (u − c) + offset`, scalar output.
    Quadratic {
        center: Vec<f64>,
        hessian: Vec<Vec<f64>>,
        #[serde(default)]
        offset: f64,
    },
    /// `G(u) = 1 − exp(−(u − c)ᵀ S (u − c))`, scalar output.
    GaussianWell { center: Vec<f64>, shape: Vec<Vec<f64>> },
    #[serde(skip)]
    Custom {
        dim_u: usize,
        dim_y: usize,
        eval: EvalFn,
        jacobian: Option<JacobianFn>,
    },
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { matrix } => f.debug_struct("Linear").field("matrix", matrix).finish(),
            Self::Quadratic { center, hessian, offset } => f
                .debug_struct("Quadratic")
                .field("center", center)
                .field("hessian", hessian)
                .field("offset", offset)
                .finish(),
            Self::GaussianWell { center, shape } => f
                .debug_struct("GaussianWell")
                .field("center", center)
                .field("shape", shape)
                .finish(),
            Self::Custom { dim_u, dim_y, jacobian, .. } => f
                .debug_struct("Custom")
                .field("dim_u", dim_u)
                .field("dim_y", dim_y)
                .field("has_jacobian", &jacobian.is_some())
                .finish(),
        }
    }
}

#[derive(Clone)]
enum Kind {
    Linear(DMatrix<f64>),
    Quadratic { center: DVector<f64>, hessian: DMatrix<f64>, offset: f64 },
    GaussianWell { center: DVector<f64>, shape: DMatrix<f64> },
    Custom { eval: EvalFn, jacobian: Option<JacobianFn> },
}

/// One forward operator `G_i: R^d -> R^k`.
#[derive(Clone)]
pub struct ForwardModel {
    dim_u: usize,
    dim_y: usize,
    kind: Kind,
    spec: ModelSpec,
}

impl fmt::Debug for ForwardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardModel")
            .field("dim_u", &self.dim_u)
            .field("dim_y", &self.dim_y)
            .field("spec", &self.spec)
            .finish()
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(ModelError::InvalidProblem("empty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(ModelError::InvalidProblem("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn square_form(center: &[f64], rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = matrix_from_rows(rows)?;
    if m.nrows() != m.ncols() || m.nrows() != center.len() {
        return Err(ModelError::InvalidProblem(format!(
            "form matrix is {}x{} but center has length {}",
            m.nrows(),
            m.ncols(),
            center.len()
        )));
    }
    Ok((DVector::from_column_slice(center), m))
}

impl ForwardModel {
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        let (dim_u, dim_y, kind) = match &spec {
            ModelSpec::Linear { matrix } => {
                let a = matrix_from_rows(matrix)?;
                (a.ncols(), a.nrows(), Kind::Linear(a))
            }
            ModelSpec::Quadratic { center, hessian, offset } => {
                let (c, h) = square_form(center, hessian)?;
                (c.len(), 1, Kind::Quadratic { center: c, hessian: h, offset: *offset })
            }
            ModelSpec::GaussianWell { center, shape } => {
                let (c, s) = square_form(center, shape)?;
                (c.len(), 1, Kind::GaussianWell { center: c, shape: s })
            }
            ModelSpec::Custom { dim_u, dim_y, eval, jacobian } => (
                *dim_u,
                *dim_y,
                Kind::Custom { eval: eval.clone(), jacobian: jacobian.clone() },
            ),
        };
        Ok(Self { dim_u, dim_y, kind, spec })
    }

    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let spec = ModelSpec::Linear { matrix: rows_from_matrix(&matrix) };
        Self { dim_u: matrix.ncols(), dim_y: matrix.nrows(), kind: Kind::Linear(matrix), spec }
    }

    /// Scalar linear model `G(u) = g u` on `R`.
    pub fn scalar_linear(g: f64) -> Self {
        Self::linear(DMatrix::from_element(1, 1, g))
    }

    pub fn quadratic(center: Vec<f64>, hessian: Vec<Vec<f64>>, offset: f64) -> Result<Self> {
        Self::from_spec(ModelSpec::Quadratic { center, hessian, offset })
    }

    pub fn gaussian_well(center: Vec<f64>, shape: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_spec(ModelSpec::GaussianWell { center, shape })
    }

    pub fn custom(dim_u: usize, dim_y: usize, eval: EvalFn, jacobian: Option<JacobianFn>) -> Self {
        Self::from_spec(ModelSpec::Custom { dim_u, dim_y, eval, jacobian })
            .expect("custom models carry no data to validate")
    }

    pub fn dim_u(&self) -> usize {
        self.dim_u
    }

    pub fn dim_y(&self) -> usize {
        self.dim_y
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// The matrix `G_i` when the model is linear.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            Kind::Linear(a) => Some(a),
            _ => None,
        }
    }

    pub fn has_jacobian(&self) -> bool {
        !matches!(&self.kind, Kind::Custom { jacobian: None, .. })
    }

    pub fn evaluate(&self, u: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(u.len(), self.dim_u);
        match &self.kind {
            Kind::Linear(a) => a * u,
            Kind::Quadratic { center, hessian, offset } => {
                let v = u - center;
                DVector::from_element(1, v.dot(&(hessian * &v)) + offset)
            }
            Kind::GaussianWell { center, shape } => {
                let v = u - center;
                DVector::from_element(1, 1.0 - (-v.dot(&(shape * &v))).exp())
            }
            Kind::Custom { eval, .. } => eval(u),
        }
    }

    /// `G'(u)` as a `k×d` matrix, if the model exposes one.
    pub fn jacobian(&self, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        match &self.kind {
            Kind::Linear(a) => Some(a.clone()),
            Kind::Quadratic { center, hessian, .. } => {
                let v = u - center;
                let grad = (hessian + hessian.transpose()) * v;
                Some(DMatrix::from_row_slice(1, grad.len(), grad.as_slice()))
            }
            Kind::GaussianWell { center, shape } => {
                let v = u - center;
                let q = v.dot(&(shape * &v));
                let grad = (shape + shape.transpose()) * v * (-q).exp();
                Some(DMatrix::from_row_slice(1, grad.len(), grad.as_slice()))
            }
            Kind::Custom { jacobian, .. } => jacobian.as_ref().map(|j| j(u)),
        }
    }

    /// Analytic jacobian if available, otherwise central differences.
    pub fn jacobian_or_fd(&self, u: &DVector<f64>) -> DMatrix<f64> {
        self.jacobian(u).unwrap_or_else(|| finite_difference_jacobian(self, u))
    }
}

/// Central-difference jacobian with a step scaled to `u`.
pub fn finite_difference_jacobian(model: &ForwardModel, u: &DVector<f64>) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(model.dim_y(), model.dim_u());
    let mut up = u.clone();
    let mut um = u.clone();
    for j in 0..u.len() {
        let h = 1e-6 * u[j].abs().max(1.0);
        up[j] = u[j] + h;
        um[j] = u[j] - h;
        let col = (model.evaluate(&up) - model.evaluate(&um)) / (2.0 * h);
        jac.set_column(j, &col);
        up[j] = u[j];
        um[j] = u[j];
    }
    jac
}

/// First-order expansion of `model` about `u0`.
///
/// Returns the linear model `G'(u0)` and the shifted observation
/// `ỹ = y − G(u0) + G'(u0) u0`, so that `ỹ − G'(u0) u ≈ y − G(u)` near `u0`.
pub fn linearize(
    model: &ForwardModel,
    u0: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(ForwardModel, DVector<f64>)> {
    check_dim(model.dim_u(), u0.len())?;
    check_dim(model.dim_y(), y.len())?;
    if model.linear_matrix().is_some() {
        return Ok((model.clone(), y.clone()));
    }
    let jac = model.jacobian(u0).ok_or(ModelError::NoDerivative)?;
    let y_shift = y - model.evaluate(u0) + &jac * u0;
    Ok((ForwardModel::linear(jac), y_shift))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { expected, got })
    }
}

/// `l` coupled inverse problems sharing a parameter space and noise model.
#[derive(Debug, Clone)]
pub struct MultiObjectiveProblem {
    name: String,
    objectives: Vec<ForwardModel>,
    observations: Vec<DVector<f64>>,
    noise_cov: DMatrix<f64>,
    noise_chol: Cholesky<f64, Dyn>,
    noise_precision: DMatrix<f64>,
}

impl MultiObjectiveProblem {
    pub fn new(
        name: impl Into<String>,
        objectives: Vec<ForwardModel>,
        observations: Vec<DVector<f64>>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        if objectives.len() < 2 {
            return Err(ModelError::InvalidProblem(format!(
                "need at least two objectives, got {}",
                objectives.len()
            )));
        }
        if observations.len() != objectives.len() {
            return Err(ModelError::InvalidProblem(format!(
                "{} objectives but {} observations",
                objectives.len(),
                observations.len()
            )));
        }
        let (d, k) = (objectives[0].dim_u(), objectives[0].dim_y());
        for g in &objectives {
            check_dim(d, g.dim_u())?;
            check_dim(k, g.dim_y())?;
        }
        for y in &observations {
            check_dim(k, y.len())?;
        }
        if noise_cov.nrows() != k || noise_cov.ncols() != k {
            return Err(ModelError::InvalidProblem(format!(
                "noise covariance is {}x{}, expected {k}x{k}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let asym = (&noise_cov - noise_cov.transpose()).amax();
        if asym > 1e-12 * noise_cov.amax().max(1.0) {
            return Err(ModelError::SingularCovariance);
        }
        let noise_chol = Cholesky::new(noise_cov.clone()).ok_or(ModelError::SingularCovariance)?;
        let noise_precision = noise_chol.inverse();
        Ok(Self {
            name: name.into(),
            objectives,
            observations,
            noise_cov,
            noise_chol,
            noise_precision,
        })
    }

    /// Problem with zero observations and `Γ = 1`.
    pub fn with_unit_noise(name: impl Into<String>, objectives: Vec<ForwardModel>) -> Result<Self> {
        let k = objectives.first().map_or(1, ForwardModel::dim_y);
        let obs = vec![DVector::zeros(k); objectives.len()];
        Self::new(name, objectives, obs, DMatrix::identity(k, k))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn objectives(&self) -> &[ForwardModel] {
        &self.objectives
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// `Γ^{-1}`, computed once at construction.
    pub fn noise_precision(&self) -> &DMatrix<f64> {
        &self.noise_precision
    }

    pub fn num_objectives(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim_u(&self) -> usize {
        self.objectives[0].dim_u()
    }

    pub fn dim_y(&self) -> usize {
        self.objectives[0].dim_y()
    }

    pub fn is_linear(&self) -> bool {
        self.objectives.iter().all(|g| g.linear_matrix().is_some())
    }

    pub fn check_weights(&self, lambda: &WeightVector) -> Result<()> {
        check_dim(self.num_objectives(), lambda.len())
    }

    pub fn check_parameter(&self, u: &DVector<f64>) -> Result<()> {
        check_dim(self.dim_u(), u.len())
    }

    /// `Σ_i λ_i G_i(u)`.
    pub fn weighted_forward(&self, u: &DVector<f64>, lambda: &WeightVector) -> Result<DVector<f64>> {
        self.check_parameter(u)?;
        self.check_weights(lambda)?;
        Ok(self.weighted_forward_unchecked(u, lambda))
    }

    pub(crate) fn weighted_forward_unchecked(&self, u: &DVector<f64>, lambda: &WeightVector) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim_y());
        for (g, &w) in self.objectives.iter().zip(lambda.as_slice()) {
            if w != 0.0 {
                out += g.evaluate(u) * w;
            }
        }
        out
    }

    /// `Σ_i λ_i y_i`.
    pub fn weighted_observation(&self, lambda: &WeightVector) -> Result<DVector<f64>> {
        self.check_weights(lambda)?;
        let mut out = DVector::zeros(self.dim_y());
        for (y, &w) in self.observations.iter().zip(lambda.as_slice()) {
            out += y * w;
        }
        Ok(out)
    }

    /// `½‖Γ^{-1/2} Σ_i λ_i (y_i − G_i(u))‖²`.
    pub fn misfit_phi(&self, u: &DVector<f64>, lambda: &WeightVector) -> Result<f64> {
        let r = self.weighted_observation(lambda)? - self.weighted_forward(u, lambda)?;
        Ok(0.5 * self.whitened_norm_sq(&r))
    }

    /// `‖Γ^{-1/2} r‖²`.
    pub fn whitened_norm_sq(&self, r: &DVector<f64>) -> f64 {
        let l = self.noise_chol.l();
        let z = l
            .solve_lower_triangular(r)
            .expect("Cholesky factor has a nonzero diagonal");
        z.norm_squared()
    }

    /// The individual objectives `‖Γ^{-1/2}(y_i − G_i(u))‖`, i.e. the point
    /// of objective space that `u` maps to.
    pub fn objective_vector(&self, u: &DVector<f64>) -> Vec<f64> {
        self.objectives
            .iter()
            .zip(&self.observations)
            .map(|(g, y)| self.whitened_norm_sq(&(y - g.evaluate(u))).sqrt())
            .collect()
    }

    /// Builds a sibling problem with every objective linearized about `u0`.
    pub fn linearized_at(&self, u0: &DVector<f64>) -> Result<Self> {
        let mut objectives = Vec::with_capacity(self.objectives.len());
        let mut observations = Vec::with_capacity(self.objectives.len());
        for (g, y) in self.objectives.iter().zip(&self.observations) {
            let (lin, y_shift) = linearize(g, u0, y)?;
            objectives.push(lin);
            observations.push(y_shift);
        }
        Ok(Self {
            name: self.name.clone(),
            objectives,
            observations,
            noise_cov: self.noise_cov.clone(),
            noise_chol: self.noise_chol.clone(),
            noise_precision: self.noise_precision.clone(),
        })
    }
}

/// Standard Pareto dominance on objective vectors (minimization): `a`
/// dominates `b` iff `a_i ≤ b_i` for all `i` and `a_j < b_j` for some `j`.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Names of the built-in benchmark problems.
pub const BUILTIN_PROBLEMS: [&str; 4] = ["test1", "test2", "test3", "linear"];

/// The benchmark problems: two convex parabolas on `R` (`test1`), two
/// inverted Gaussian wells on `R` (`test2`) and two anisotropic paraboloids
/// on `R²` (`test3`), all with `y_i = 0` and `Γ = 1`. `linear` is the scalar
/// problem `G_1 = 1, G_2 = 2, y_1 = y_2 = 1`, whose Pareto set is `[½, 1]`.
pub fn builtin_problem(name: &str) -> Result<MultiObjectiveProblem> {
    let one = || vec![vec![1.0]];
    let objectives = match name {
        "linear" => {
            return MultiObjectiveProblem::new(
                name,
                vec![ForwardModel::scalar_linear(1.0), ForwardModel::scalar_linear(2.0)],
                vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)],
                DMatrix::identity(1, 1),
            )
        }
        "test1" => vec![
            ForwardModel::quadratic(vec![0.5], one(), 0.0)?,
            ForwardModel::quadratic(vec![-0.5], one(), 0.0)?,
        ],
        "test2" => vec![
            ForwardModel::gaussian_well(vec![1.0], one())?,
            ForwardModel::gaussian_well(vec![-1.0], one())?,
        ],
        "test3" => vec![
            ForwardModel::quadratic(vec![0.1, 0.1], vec![vec![5.0, 0.0], vec![0.0, 1.0]], 0.0)?,
            ForwardModel::quadratic(vec![0.9, 0.9], vec![vec![1.0, 0.0], vec![0.0, 5.0]], 0.0)?,
        ],
        other => return Err(ModelError::UnknownProblem(other.to_string())),
    };
    MultiObjectiveProblem::with_unit_noise(name, objectives)
}

/// Axis-aligned box sampled on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Grid spacing along every axis.
    pub step: f64,
}

impl OracleGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, step: f64) -> Self {
        Self { lower, upper, step }
    }

    pub fn cube(d: usize, lower: f64, upper: f64, step: f64) -> Self {
        Self::new(vec![lower; d], vec![upper; d], step)
    }

    fn axis_points(&self, axis: usize) -> usize {
        let span = self.upper[axis] - self.lower[axis];
        if !(span >= 0.0) || !(self.step > 0.0) {
            return 0;
        }
        (span / self.step + 1e-9).floor() as usize + 1
    }
}

/// Exhaustive grid search for the minimizer of [`MultiObjectiveProblem::misfit_phi`].
///
/// Used as ground truth in tests and for reference fronts; the solvers never
/// call it.
pub fn pareto_oracle(
    problem: &MultiObjectiveProblem,
    lambda: &WeightVector,
    grid: &OracleGrid,
) -> Result<DVector<f64>> {
    problem.check_weights(lambda)?;
    let d = problem.dim_u();
    check_dim(d, grid.lower.len())?;
    check_dim(d, grid.upper.len())?;
    let counts: Vec<usize> = (0..d).map(|a| grid.axis_points(a)).collect();
    if counts.contains(&0) {
        return Err(ModelError::EmptyGrid);
    }
    let y = problem.weighted_observation(lambda)?;
    let mut idx = vec![0usize; d];
    let mut u = DVector::from_column_slice(&grid.lower);
    let mut best = (f64::INFINITY, u.clone());
    loop {
        for a in 0..d {
            u[a] = grid.lower[a] + idx[a] as f64 * grid.step;
        }
        let r = &y - problem.weighted_forward_unchecked(&u, lambda);
        let phi = 0.5 * problem.whitened_norm_sq(&r);
        if phi < best.0 {
            best = (phi, u.clone());
        }
        // odometer increment
        let mut a = 0;
        loop {
            if a == d {
                return Ok(best.1);
            }
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Grid search that repeatedly re-centers a finer grid on the incumbent.
/// Each level shrinks the box to `±2` cells of the previous spacing.
pub fn pareto_oracle_refined(
    problem: &MultiObjectiveProblem,
    lambda: &WeightVector,
    grid: &OracleGrid,
    levels: usize,
    points_per_level: usize,
) -> Result<DVector<f64>> {
    let mut best = pareto_oracle(problem, lambda, grid)?;
    let mut step = grid.step;
    for _ in 0..levels {
        let half = 2.0 * step;
        let lower: Vec<f64> = best.iter().map(|x| x - half).collect();
        let upper: Vec<f64> = best.iter().map(|x| x + half).collect();
        step = 2.0 * half / (points_per_level.max(2) - 1) as f64;
        best = pareto_oracle(problem, lambda, &OracleGrid::new(lower, upper, step))?;
    }
    Ok(best)
}

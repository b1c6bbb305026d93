//! Ensemble Kalman methods for approximating Pareto fronts of
//! multi-objective inverse problems.
//!
//! Weighted problems `G(u, λ) = Σ λ_i G_i(u)` are solved either by running
//! the ensemble Kalman flow independently at fixed weights ([`sampler::direct_scan`])
//! or by following the weights adaptively with step sizes driven by the
//! sensitivity `∂m/∂λ` of the mean-field moments ([`sampler::adaptive_scan`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enkf;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod ode;
pub mod sampler;

pub use enkf::{run_enkf, EnkfConfig, EnkfError, Ensemble, NonlinearMode};
pub use model::{builtin_problem, ForwardModel, ModelError, ModelSpec, MultiObjectiveProblem, WeightVector};
pub use moments::{integrate_moments, Integrator, MomentError, MomentMode, MomentParams, MomentState};

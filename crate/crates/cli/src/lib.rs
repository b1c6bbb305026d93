//! Experiment driver for `paretokf`: configuration, result files and the
//! commands behind the `paretokf` binary.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compare;
pub mod config;
pub mod output;
pub mod run;
pub mod stats;
pub mod trajectory;
pub mod validate;

//! Run configuration: a JSON file, optionally overridden flag by flag.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use paretokf::enkf::{EnkfConfig, NonlinearMode};
use paretokf::model::{builtin_problem, ForwardModel, ModelSpec, MultiObjectiveProblem};
use paretokf::sampler::{AdaptiveConfig, EnsembleSpec};
use serde::{Deserialize, Serialize};

/// Environment variable holding the default output directory.
pub const OUTPUT_DIR_ENV: &str = "PARETOKF_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "paretokf-out";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemRef {
    Named(String),
    Inline(InlineProblem),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub name: String,
    pub objectives: Vec<ModelSpec>,
    /// One data vector per objective; zeros when omitted.
    #[serde(default)]
    pub observations: Option<Vec<Vec<f64>>>,
    /// Noise covariance; identity when omitted.
    #[serde(default)]
    pub noise_cov: Option<Vec<Vec<f64>>>,
}

impl ProblemRef {
    pub fn name(&self) -> &str {
        match self {
            Self::Named(n) => n,
            Self::Inline(p) => &p.name,
        }
    }

    pub fn build(&self) -> Result<MultiObjectiveProblem> {
        match self {
            Self::Named(n) => builtin_problem(n).with_context(|| format!("problem {n:?}")),
            Self::Inline(p) => {
                let objectives = p
                    .objectives
                    .iter()
                    .cloned()
                    .map(ForwardModel::from_spec)
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let k = objectives.first().map_or(1, ForwardModel::dim_y);
                let obs = match &p.observations {
                    Some(o) => o.iter().map(|y| DVector::from_column_slice(y)).collect(),
                    None => vec![DVector::zeros(k); objectives.len()],
                };
                let gamma = match &p.noise_cov {
                    Some(rows) => {
                        let n = rows.len();
                        if rows.iter().any(|r| r.len() != n) {
                            bail!("noise_cov must be square");
                        }
                        DMatrix::from_fn(n, n, |i, j| rows[i][j])
                    }
                    None => DMatrix::identity(k, k),
                };
                Ok(MultiObjectiveProblem::new(p.name.clone(), objectives, obs, gamma)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    Direct,
    Adaptive,
    Both,
}

/// A box bound given either per axis or as one value for every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bound {
    Scalar(f64),
    PerAxis(Vec<f64>),
}

impl Bound {
    pub fn expand(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            Self::Scalar(v) => Ok(vec![*v; d]),
            Self::PerAxis(v) if v.len() == d => Ok(v.clone()),
            Self::PerAxis(v) => bail!("bound has {} entries, problem dimension is {d}", v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub size: usize,
    pub lower: Bound,
    pub upper: Bound,
    pub seed: u64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { size: 20, lower: Bound::Scalar(-1.0), upper: Bound::Scalar(1.0), seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkfSection {
    pub dt: f64,
    pub t_final: f64,
    pub nonlinear_mode: NonlinearMode,
}

impl Default for EnkfSection {
    fn default() -> Self {
        let d = EnkfConfig::default();
        Self { dt: d.dt, t_final: d.t_final, nonlinear_mode: d.nonlinear_mode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Falls back to `$PARETOKF_OUTPUT_DIR`, then `./paretokf-out`.
    pub dir: Option<PathBuf>,
    pub csv: bool,
    pub json: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, csv: true, json: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemRef,
    pub strategy: StrategyChoice,
    pub enkf: EnkfSection,
    pub adaptive: AdaptiveConfig,
    /// Direct-scan size; with `both` and no value the adaptive count is reused.
    pub n_lambda: Option<usize>,
    pub ensemble: EnsembleSection,
    /// Resolution of the reference front used for metrics.
    pub front_resolution: usize,
    pub outputs: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemRef::Named("test1".into()),
            strategy: StrategyChoice::Both,
            enkf: EnkfSection::default(),
            adaptive: AdaptiveConfig::default(),
            n_lambda: None,
            ensemble: EnsembleSection::default(),
            front_resolution: paretokf::metrics::DEFAULT_RESOLUTION,
            outputs: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// serde_json reports line and column together with the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn enkf_config(&self) -> EnkfConfig {
        EnkfConfig {
            dt: self.enkf.dt,
            t_final: self.enkf.t_final,
            seed: self.ensemble.seed,
            nonlinear_mode: self.enkf.nonlinear_mode,
        }
    }

    pub fn ensemble_spec(&self, d: usize) -> Result<EnsembleSpec> {
        Ok(EnsembleSpec { size: self.ensemble.size, lower: self.ensemble.lower.expand(d)?, upper: self.ensemble.upper.expand(d)? })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.outputs
            .dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Checks the numeric fields and the problem before anything is run.
    pub fn validate(&self) -> Result<MultiObjectiveProblem> {
        let problem = self.problem.build()?;
        self.enkf_config().validate()?;
        self.adaptive.validate()?;
        let spec = self.ensemble_spec(problem.dim_u())?;
        if spec.size < 2 {
            bail!("ensemble.size must be at least 2");
        }
        if self.n_lambda.is_some_and(|n| n < 2) {
            bail!("n_lambda must be at least 2");
        }
        if self.front_resolution < 2 {
            bail!("front_resolution must be at least 2");
        }
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c.problem.name(), "test1");
        assert_eq!(c.enkf.dt, 0.01);
        assert_eq!(c.adaptive.delta, 1e-3);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_reported_with_position() {
        let err = RunConfig::parse("{\n  \"ensemble\": {\"sizee\": 3}\n}").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("sizee") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn inline_problem() {
        let text = r#"{
            "problem": {
                "name": "two-lines",
                "objectives": [
                    {"kind": "linear", "matrix": [[1.0]]},
                    {"kind": "linear", "matrix": [[2.0]]}
                ],
                "observations": [[1.0], [1.0]]
            }
        }"#;
        let c = RunConfig::parse(text).unwrap();
        let p = c.validate().unwrap();
        assert!(p.is_linear());
        assert_eq!(p.name(), "two-lines");
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse(r#"{"problem": "zdt1"}"#).unwrap().validate().is_err());
        assert!(RunConfig::parse(r#"{"enkf": {"dt": -1}}"#).unwrap().validate().is_err());
        assert!(RunConfig::parse(r#"{"ensemble": {"lower": [0, 0]}}"#).unwrap().validate().is_err());
        assert!(RunConfig::parse(r#"{"adaptive": {"min_step": 0.5, "max_step": 0.1}}"#).unwrap().validate().is_err());
    }
}

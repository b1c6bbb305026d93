//! The `run` command: front scans plus metrics and a manifest.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Result};
use paretokf::metrics::{analytic_front, coverage_span, front_distance, DistanceSpace, FrontParametrization};
use paretokf::model::MultiObjectiveProblem;
use paretokf::sampler::{adaptive_scan, direct_scan, ParetoApproximation, Strategy};
use serde::Serialize;

use crate::config::{ProblemRef, RunConfig, StrategyChoice};
use crate::output::{self, Artifact, FileInfo, SCHEMA_VERSION};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub strategy: Strategy,
    pub n_lambda: usize,
    pub front_distance: f64,
    pub coverage_span: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub n_lambda: usize,
    pub complete: bool,
    pub failures: usize,
    pub wall_time_s: f64,
}

pub struct RunOutcome {
    pub problem: MultiObjectiveProblem,
    pub approximations: Vec<ParetoApproximation>,
    pub records: Vec<RunRecord>,
    pub metrics: Vec<MetricsRow>,
}

/// Reference front when the problem is a built-in one.
pub fn reference_front(problem: &ProblemRef, resolution: usize) -> Option<FrontParametrization> {
    match problem {
        ProblemRef::Named(n) => analytic_front(n, resolution).ok(),
        ProblemRef::Inline(_) => None,
    }
}

pub fn metrics_for(front: &FrontParametrization, approx: &ParetoApproximation) -> Result<MetricsRow> {
    Ok(MetricsRow {
        strategy: approx.strategy,
        n_lambda: approx.len(),
        front_distance: front_distance(front, approx, DistanceSpace::Objective)?,
        coverage_span: coverage_span(front, approx, None),
    })
}

/// Runs the configured scans; nothing is written.
pub fn execute(config: &RunConfig) -> Result<RunOutcome> {
    let problem = config.validate()?;
    let enkf = config.enkf_config();
    let spec = config.ensemble_spec(problem.dim_u())?;
    let mut approximations = Vec::new();
    let mut records = Vec::new();
    let mut push = |a: ParetoApproximation, t: f64, approximations: &mut Vec<ParetoApproximation>| {
        records.push(RunRecord {
            strategy: a.strategy,
            n_lambda: a.len(),
            complete: a.complete,
            failures: a.failures.len(),
            wall_time_s: t,
        });
        approximations.push(a);
    };

    let mut adaptive_count = None;
    if matches!(config.strategy, StrategyChoice::Adaptive | StrategyChoice::Both) {
        let t0 = Instant::now();
        let a = adaptive_scan(&problem, &enkf, &config.adaptive, &spec)?;
        log::info!("adaptive scan: {} weights in {:.2?}", a.len(), t0.elapsed());
        adaptive_count = Some(a.len());
        push(a, t0.elapsed().as_secs_f64(), &mut approximations);
    }
    if matches!(config.strategy, StrategyChoice::Direct | StrategyChoice::Both) {
        let n = config.n_lambda.or(adaptive_count).unwrap_or(25);
        let t0 = Instant::now();
        let a = direct_scan(&problem, n, &enkf, &spec)?;
        log::info!("direct scan: {} weights in {:.2?}", a.len(), t0.elapsed());
        push(a, t0.elapsed().as_secs_f64(), &mut approximations);
    }
    for a in &approximations {
        if !a.failures.is_empty() {
            bail!(
                "{} scan: solver failed at {} weight(s), first at λ = {}: {}",
                a.strategy,
                a.failures.len(),
                a.failures[0].lambda,
                a.failures[0].message
            );
        }
    }

    let mut metrics = Vec::new();
    if let Some(front) = reference_front(&config.problem, config.front_resolution) {
        for a in &approximations {
            metrics.push(metrics_for(&front, a)?);
        }
    }
    Ok(RunOutcome { problem, approximations, records, metrics })
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    schema_version: u32,
    created_unix_s: u64,
    problem: &'a str,
    seed: u64,
    config: &'a RunConfig,
    runs: &'a [RunRecord],
    files: Vec<FileInfo>,
}

#[derive(Serialize)]
struct FrontJson<'a> {
    schema_version: u32,
    seed: u64,
    config: &'a RunConfig,
    approximation: &'a ParetoApproximation,
}

/// Renders every result file of a finished run.
pub fn render(config: &RunConfig, outcome: &RunOutcome) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    for a in &outcome.approximations {
        if config.outputs.csv {
            files.push(output::front_csv(a, &outcome.problem)?);
            files.push(output::lambda_csv(a)?);
        }
        if config.outputs.json {
            let doc = FrontJson { schema_version: SCHEMA_VERSION, seed: config.ensemble.seed, config, approximation: a };
            files.push(output::json_artifact(&format!("{}_front.json", a.strategy), &doc)?);
        }
    }
    if !outcome.metrics.is_empty() {
        let columns: Vec<String> = ["strategy", "n_lambda", "front_distance", "coverage_span"].map(String::from).to_vec();
        let rows = outcome.metrics.iter().map(|m| {
            vec![m.strategy.to_string(), m.n_lambda.to_string(), format!("{}", m.front_distance), format!("{}", m.coverage_span)]
        });
        files.push(Artifact { name: "metrics.csv".into(), bytes: output::csv_bytes(&columns, rows)?, columns });
    }
    let manifest = Manifest {
        tool: "paretokf",
        version: env!("CARGO_PKG_VERSION"),
        schema_version: SCHEMA_VERSION,
        created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        problem: config.problem.name(),
        seed: config.ensemble.seed,
        config,
        runs: &outcome.records,
        files: files.iter().map(Artifact::info).collect(),
    };
    files.push(output::json_artifact("manifest.json", &manifest)?);
    Ok(files)
}

/// `run`: execute, then write everything into the output directory.
pub fn cmd_run(config: &RunConfig) -> Result<(RunOutcome, Vec<PathBuf>)> {
    let outcome = execute(config)?;
    let files = render(config, &outcome)?;
    let paths = output::write_artifacts(&config.output_dir(), &files)?;
    Ok((outcome, paths))
}

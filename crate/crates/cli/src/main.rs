use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use paretokf::enkf::NonlinearMode;
use paretokf::metrics::analytic_front;
use paretokf::moments::{Integrator, MomentMode};
use paretokf::sampler::ResampleCovariance;
use paretokf_cli::config::{ProblemRef, RunConfig, StrategyChoice};
use paretokf_cli::output::write_atomic;
use paretokf_cli::trajectory::{self, MomentsRequest};
use paretokf_cli::validate::{run_checks, ValidateOptions};
use paretokf_cli::{compare, run};

#[derive(Parser)]
#[command(name = "paretokf", version, about = "Pareto fronts of multi-objective inverse problems with ensemble Kalman inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the direct and/or adaptive scan and write front, metric and manifest files.
    Run(RunArgs),
    /// Integrate the moment-sensitivity system and write the trajectory as CSV.
    Moments(MomentsArgs),
    /// Run the property checks and report pass/fail.
    Validate(ValidateArgs),
    /// Compare two front CSVs against the reference front of a built-in problem.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ResampleArg {
    Central,
    RawSecondMoment,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EnkfModeArg {
    Direct,
    Linearize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyChoice>,
    #[arg(long)]
    n_lambda: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Ensemble size.
    #[arg(short = 'J', long = "J")]
    j: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    lambda_max_steps: Option<usize>,
    #[arg(long, value_enum)]
    resample_covariance: Option<ResampleArg>,
    #[arg(long, value_enum)]
    nonlinear_mode: Option<EnkfModeArg>,
    /// Defaults to $PARETOKF_OUTPUT_DIR, then ./paretokf-out.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.problem {
            c.problem = ProblemRef::Named(p);
        }
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(n) = self.n_lambda {
            c.n_lambda = Some(n);
        }
        if let Some(d) = self.delta {
            c.adaptive.delta = d;
        }
        if let Some(j) = self.j {
            c.ensemble.size = j;
        }
        if let Some(s) = self.seed {
            c.ensemble.seed = s;
        }
        if let Some(t) = self.t_final {
            c.enkf.t_final = t;
        }
        if let Some(dt) = self.dt {
            c.enkf.dt = dt;
        }
        if let Some(n) = self.lambda_max_steps {
            c.adaptive.lambda_max_steps = Some(n);
        }
        if let Some(r) = self.resample_covariance {
            c.adaptive.resample_covariance = match r {
                ResampleArg::Central => ResampleCovariance::Central,
                ResampleArg::RawSecondMoment => ResampleCovariance::RawSecondMoment,
            };
        }
        if let Some(m) = self.nonlinear_mode {
            c.enkf.nonlinear_mode = match m {
                EnkfModeArg::Direct => NonlinearMode::Direct,
                EnkfModeArg::Linearize => NonlinearMode::Linearize,
            };
        }
        if let Some(d) = self.output_dir {
            c.outputs.dir = Some(d);
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MomentModeArg {
    Linear,
    NonlinearHeuristic,
}

#[derive(Args)]
struct MomentsArgs {
    #[arg(long, default_value = "linear")]
    problem: String,
    /// Either one value λ, meaning (λ, 1 − λ), or the full weight vector.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    t_final: f64,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-9)]
    atol: f64,
    /// Use fixed-step RK4 with this step instead of the adaptive integrator.
    #[arg(long)]
    rk4_step: Option<f64>,
    /// Initial mean, one value or one per coordinate.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    m0: Vec<f64>,
    /// Initial variance (covariance is this times the identity).
    #[arg(long, default_value_t = 1.0)]
    var0: f64,
    #[arg(long, default_value_t = 101)]
    samples: usize,
    #[arg(long, value_enum)]
    mode: Option<MomentModeArg>,
    /// Output file; defaults to moments.csv in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Only the fast checks.
    #[arg(long)]
    quick: bool,
    /// Reverse the moment flow to check that the suite notices.
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Args)]
struct CompareArgs {
    first: PathBuf,
    second: PathBuf,
    #[arg(long)]
    problem: String,
    #[arg(long, default_value_t = paretokf::metrics::DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = args.into_config()?;
    let (outcome, paths) = run::cmd_run(&config)?;
    for r in &outcome.records {
        println!(
            "{:<8} N_λ = {:<4} complete = {:<5} {:.2} s",
            r.strategy.to_string(),
            r.n_lambda,
            r.complete,
            r.wall_time_s
        );
    }
    for m in &outcome.metrics {
        println!(
            "{:<8} front_distance = {:.6}  coverage_span = {:.4}",
            m.strategy.to_string(),
            m.front_distance,
            m.coverage_span
        );
    }
    println!("wrote {} files to {}", paths.len(), config.output_dir().display());
    Ok(())
}

fn cmd_moments(args: MomentsArgs) -> Result<()> {
    let problem = ProblemRef::Named(args.problem).build()?;
    let integrator = match args.rk4_step {
        Some(dt) => Integrator::Rk4 { dt },
        None => Integrator::Dopri5 { rtol: args.rtol, atol: args.atol },
    };
    let req = MomentsRequest {
        lambda: args.lambda,
        t_final: args.t_final,
        integrator,
        m0: args.m0,
        variance0: args.var0,
        samples: args.samples,
        mode: args.mode.map(|m| match m {
            MomentModeArg::Linear => MomentMode::Linear,
            MomentModeArg::NonlinearHeuristic => MomentMode::NonlinearHeuristic,
        }),
    };
    let outcome = trajectory::compute(&problem, &req)?;
    if !outcome.mode.is_closed() {
        eprintln!("note: nonlinear problem, moments use the unclosed G(m) heuristic");
    }
    let path = args.output.unwrap_or_else(|| RunConfig::default().output_dir().join("moments.csv"));
    let artifact = trajectory::render(&outcome, "moments.csv")?;
    write_atomic(&path, &artifact.bytes)?;
    let last = outcome.trajectory.final_state();
    println!(
        "t = {}: m = {:?}, steady residual = {}",
        last.t,
        last.m.as_slice(),
        outcome.residuals.last().copied().flatten().map_or("n/a".into(), |r| format!("{r:.3e}"))
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<bool> {
    let opts = ValidateOptions { quick: args.quick, reversed_flow: args.inject_sign_flip };
    let results = run_checks(&opts);
    for r in &results {
        println!("{} {:<24} {:>7.2} s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(failed == 0)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let front = analytic_front(&args.problem, args.resolution).with_context(|| format!("reference front for {}", args.problem))?;
    let rows = compare::compare(&front, &args.first, &args.second)?;
    let bytes = compare::render(&rows)?;
    match args.output {
        Some(p) => write_atomic(&p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Moments(a) => cmd_moments(a).map(|_| true),
        Command::Validate(a) => cmd_validate(a),
        Command::Compare(a) => cmd_compare(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

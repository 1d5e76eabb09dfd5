//! `lqavi`: compile LQ games to AVIs, solve them, and run receding-horizon
//! simulations and benchmarks from JSON inputs.
//!
//! Exit codes: 0 success, 1 usage, I/O or schema error, 2 iteration limit or
//! budget reached (`solve`), 3 solver failure or non-convergence, 4 constraint
//! violations (`simulate` outside budget mode).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lqavi::game::{RiccatiOptions, RiccatiSolution, StackedGame};
use lqavi::newton::random_start;
use lqavi::scenarios::{Scenario, ScenarioSpec};
use lqavi::sim::{self, RhConfig, SimError, Summary};
use lqavi::{AviProblem, PreparedSolver, SolveStatus, SolverConfig, SolverKind, SolverReport, ViError};
use log::{debug, info};

#[derive(Parser, Debug)]
#[command(name = "lqavi", version, about = "Constrained LQ dynamic games as affine variational inequalities")]
#[command(after_help = "Set AVI_GAME_LOG (error, warn, info, debug, trace) to control log output on stderr.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one AVI given as {"M", "q", "D", "d"} JSON.
    Solve(SolveArgs),
    /// Compile a scenario into the AVI at its initial state and the Riccati terminal data.
    Compile(CompileArgs),
    /// Run the receding-horizon closed loop of a scenario.
    Simulate(SimulateArgs),
    /// Compare solvers on the state sequence of one reference closed loop.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// newton, fast-newton, fb or dr.
    #[arg(long, default_value = "newton")]
    solver: SolverKind,
    /// Natural-residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Fixed iteration budget (budget mode).
    #[arg(long)]
    budget: Option<usize>,
    /// Seed for random cold starting points.
    #[arg(long)]
    seed: Option<u64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut c = SolverConfig::default();
        if let Some(t) = self.tol {
            c = c.with_tol(t);
        }
        if let Some(k) = self.max_iter {
            c = c.with_max_iter(k);
        }
        c.with_budget(self.budget)
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Debug)]
struct SolveArgs {
    avi: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct CompileArgs {
    scenario: PathBuf,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    scenario: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    /// Closed-loop steps (the scenario's own count by default).
    #[arg(long)]
    steps: Option<usize>,
    /// Start every solve cold instead of from the shifted previous solution.
    #[arg(long)]
    no_warm_start: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    scenario: PathBuf,
    /// Comma-separated solver names.
    #[arg(long, default_value = "newton,fast-newton,fb,dr")]
    solvers: String,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Seed for the cold starting points of every solve.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solver that generates the state sequence.
    #[arg(long, default_value = "newton")]
    reference: SolverKind,
    /// Warm-start each solve from the solver's previous solution.
    #[arg(long)]
    warm_start: bool,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }

    fn solver(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::usage(error)
    }
}

fn vi_failure(e: ViError) -> Failure {
    match e {
        ViError::Dimension(_) | ViError::Config(_) | ViError::Json(_) | ViError::NotStronglyMonotone(_) => {
            Failure::usage(e)
        }
        _ => Failure::solver(e),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Vi(v) => vi_failure(v),
        SimError::Game(g) => Failure::solver(g),
        other => Failure::usage(other),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let spec = ScenarioSpec::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))?;
    spec.build().map_err(|e| match e {
        lqavi::scenarios::ScenarioError::Game(g) => Failure::solver(g),
        other => Failure::usage(other),
    })
}

fn riccati(scenario: &Scenario) -> Result<RiccatiSolution, Failure> {
    let sol = RiccatiSolution::compute(&scenario.game, RiccatiOptions::default()).map_err(Failure::solver)?;
    debug!("riccati: {} iterations, residual {:.3e}", sol.iterations, sol.residual(&scenario.game));
    Ok(sol)
}

fn format_vector(v: &[f64]) -> String {
    const SHOWN: usize = 8;
    let mut parts: Vec<String> = v.iter().take(SHOWN).map(|x| format!("{x:.6}")).collect();
    if v.len() > SHOWN {
        parts.push(format!("... ({} entries)", v.len()));
    }
    format!("[{}]", parts.join(", "))
}

fn write_trace(report: &SolverReport, path: &Path) -> anyhow::Result<()> {
    let mut s = String::from("iteration,residual,merit,step_size\n");
    for (k, r) in report.residual_trace.iter().enumerate() {
        let merit = report.merit_trace.get(k).map(|m| format!("{m:?}")).unwrap_or_default();
        let step = report.step_sizes.get(k).map(|a| format!("{a:?}")).unwrap_or_default();
        s.push_str(&format!("{},{r:?},{merit},{step}\n", k + 1));
    }
    write(path, &s)
}

fn cmd_solve(args: &SolveArgs) -> Result<u8, Failure> {
    let text = read(&args.avi)?;
    let problem =
        AviProblem::from_json(&text).with_context(|| format!("invalid AVI in {}", args.avi.display()))?;
    let kind = args.solver.solver;
    let solver = PreparedSolver::new(kind, args.solver.config(), problem.operator().matrix()).map_err(vi_failure)?;
    let start = args.solver.seed.map(|s| random_start(problem.dim(), problem.rows(), s));
    let report = solver.solve(&problem, start.as_ref().map(|(u, l)| (u, l))).map_err(vi_failure)?;

    ensure_dir(&args.output.out_dir)?;
    write(&args.output.out_dir.join("report.json"), &serde_json::to_string_pretty(&report).context("report")?)?;
    if args.output.format == Format::Csv {
        write_trace(&report, &args.output.out_dir.join("trace.csv"))?;
    }
    println!(
        "{kind}: {} after {} iterations, residual {:.3e}, {:.3} ms, u* = {}",
        report.status,
        report.iterations,
        report.final_residual(),
        report.elapsed.as_secs_f64() * 1e3,
        format_vector(report.solution.as_slice())
    );
    Ok(match report.status {
        SolveStatus::Converged => 0,
        SolveStatus::MaxIterations | SolveStatus::BudgetExhausted => 2,
        SolveStatus::NumericalFailure => 3,
    })
}

fn cmd_compile(args: &CompileArgs) -> Result<u8, Failure> {
    let scenario = load_scenario(&args.scenario)?;
    let ric = riccati(&scenario)?;
    let stacked = StackedGame::new(&scenario.game, args.horizon, &ric).map_err(Failure::usage)?;
    let problem = stacked.problem(&scenario.x0);
    ensure_dir(&args.out_dir)?;
    write(&args.out_dir.join("avi.json"), &problem.to_json().map_err(vi_failure)?)?;
    write(&args.out_dir.join("riccati.json"), &serde_json::to_string_pretty(&ric).context("riccati")?)?;
    println!(
        "{}: n = {}, m = {}, mu_M = {:.6e}",
        scenario.name,
        stacked.dim(),
        stacked.rows(),
        stacked.monotonicity
    );
    Ok(0)
}

fn sim_config(horizon: usize, steps: usize, solver: &SolverArgs, warm_start: bool) -> RhConfig {
    RhConfig {
        horizon,
        sim_steps: steps,
        solver: solver.solver,
        solver_config: solver.config(),
        warm_start,
        iteration_budget: solver.budget,
        seed: solver.seed,
        ..RhConfig::default()
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, Failure> {
    let scenario = load_scenario(&args.scenario)?;
    let ric = riccati(&scenario)?;
    let steps = args.steps.unwrap_or(scenario.sim_steps);
    let config = sim_config(args.horizon, steps, &args.solver, !args.no_warm_start);
    info!("simulating {} for {steps} steps with {}", scenario.name, config.solver);
    let log = sim::run_scenario(&scenario, &ric, &config).map_err(sim_failure)?;
    let summary = log.summary(&scenario.game, scenario.fleet.as_ref());

    let dir = &args.output.out_dir;
    ensure_dir(dir)?;
    match args.output.format {
        Format::Csv => {
            log.write_metrics_csv(&dir.join("metrics.csv")).map_err(sim_failure)?;
            log.write_trajectory_csv(&dir.join("trajectory.csv")).map_err(sim_failure)?;
        }
        Format::Json => write(&dir.join("log.json"), &log.to_json())?,
    }
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).context("summary")?)?;
    print_summary(scenario.name, &summary);
    Ok(simulate_exit_code(&summary))
}

fn print_summary(name: &str, s: &Summary) {
    println!(
        "{name} with {}: {} steps, {} converged, median {} iterations ({:.3} ms), violations: {}{}{}",
        s.solver,
        s.steps,
        s.converged_steps,
        s.median_iterations,
        s.median_elapsed_s * 1e3,
        violation_text(s),
        if s.violations.collision { ", collision" } else { "" },
        s.aborted.as_deref().map(|a| format!(", aborted at {a}")).unwrap_or_default(),
    );
}

fn violation_text(s: &Summary) -> String {
    if s.violations.classes.is_empty() {
        return "none".into();
    }
    let parts: Vec<String> = s
        .violations
        .classes
        .iter()
        .map(|c| format!("{} in {} steps (max {:.2e})", c.class.as_str(), c.steps_violated, c.max_violation))
        .collect();
    parts.join(", ")
}

fn simulate_exit_code(s: &Summary) -> u8 {
    if s.aborted.is_some() {
        3
    } else if s.budget_mode {
        0
    } else if !s.all_converged {
        3
    } else if !s.violations.is_empty() {
        4
    } else {
        0
    }
}

fn parse_solvers(list: &str) -> anyhow::Result<Vec<SolverKind>> {
    let kinds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<SolverKind>().map_err(anyhow::Error::msg))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        bail!("--solvers needs at least one solver name");
    }
    Ok(kinds)
}

fn cmd_bench(args: &BenchArgs) -> Result<u8, Failure> {
    let solvers = parse_solvers(&args.solvers)?;
    if args.repetitions == 0 {
        return Err(Failure::usage(anyhow::anyhow!("--repetitions must be at least 1")));
    }
    let scenario = load_scenario(&args.scenario)?;
    let ric = riccati(&scenario)?;
    let solver_args = SolverArgs {
        solver: args.reference,
        tol: args.tol,
        max_iter: args.max_iter,
        budget: args.budget,
        seed: Some(args.seed),
    };
    let steps = args.steps.unwrap_or(scenario.sim_steps);
    let config = sim_config(args.horizon, steps, &solver_args, args.warm_start);
    let result = sim::bench(&scenario, &ric, &config, args.reference, &solvers, args.repetitions).map_err(sim_failure)?;

    let dir = &args.output.out_dir;
    ensure_dir(dir)?;
    match args.output.format {
        Format::Csv => result.write_csv(&dir.join("bench.csv")).map_err(sim_failure)?,
        Format::Json => write(&dir.join("bench.json"), &serde_json::to_string_pretty(&result).context("bench")?)?,
    }
    result.write_markdown(&dir.join("bench.md")).map_err(sim_failure)?;
    print!("{}", result.markdown());
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Compile(a) => cmd_compile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AVI_GAME_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

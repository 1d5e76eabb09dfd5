//! Receding-horizon closed loop: at every step the AVI is rebuilt for the
//! current state, solved, and the first input of every agent is applied to
//! the physical plant.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{GameError, LqGame, RiccatiSolution, RowClass, StackedGame};
use crate::linalg::{median, percentile};
use crate::newton::random_start;
use crate::scenarios::{Fleet, Scenario};
use crate::solver::{PreparedSolver, SolverConfig, SolverKind};
use crate::vi::{SolveStatus, ViError};

/// A realized constraint value above this counts as a violation.
pub const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// What fills the last stage after shifting the previous solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmTail {
    #[default]
    Zero,
    /// `Kᵢ x̂[T]` with the Riccati gains and the predicted terminal state.
    Feedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RhConfig {
    pub horizon: usize,
    pub sim_steps: usize,
    pub solver: SolverKind,
    pub solver_config: SolverConfig,
    pub warm_start: bool,
    pub warm_tail: WarmTail,
    /// Overrides the solver's own budget when set.
    pub iteration_budget: Option<usize>,
    /// Seeded random starting points for cold solves (`u = 0, λ = 1` otherwise).
    pub seed: Option<u64>,
}

impl Default for RhConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            sim_steps: 300,
            solver: SolverKind::Newton,
            solver_config: SolverConfig::default(),
            warm_start: true,
            warm_tail: WarmTail::Zero,
            iteration_budget: None,
            seed: None,
        }
    }
}

impl RhConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::Config("horizon must be at least 1".into()));
        }
        if self.sim_steps == 0 {
            return Err(SimError::Config("sim_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_solver_config(&self) -> SolverConfig {
        match self.iteration_budget {
            Some(b) => self.solver_config.clone().with_budget(Some(b)),
            None => self.solver_config.clone(),
        }
    }
}

/// One closed-loop step: the solve at `x[t]` and the resulting `x[t+1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub iterations: usize,
    pub elapsed_s: f64,
    pub residual: f64,
    pub status: SolveStatus,
    /// Largest realized constraint value of this step, clipped at zero.
    pub violation_max: f64,
    pub violated: bool,
    /// `uᵢ*[0]` in game coordinates.
    pub game_inputs: Vec<f64>,
    /// `Kᵢx[t] + uᵢ*[0]`.
    pub applied_inputs: Vec<f64>,
    /// `x[t+1]`.
    pub state: Vec<f64>,
    #[serde(default)]
    pub positions: Vec<f64>,
    #[serde(default)]
    pub velocities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhLog {
    pub solver: SolverKind,
    pub horizon: usize,
    pub budget_mode: bool,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub initial_positions: Vec<f64>,
    #[serde(default)]
    pub initial_velocities: Vec<f64>,
    pub steps: Vec<StepLog>,
    pub collision: bool,
    /// Set when a solver failure ended the run early.
    pub aborted: Option<String>,
}

impl RhLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.iterations).collect()
    }

    pub fn elapsed(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.elapsed_s).collect()
    }

    pub fn all_converged(&self) -> bool {
        self.aborted.is_none() && self.steps.iter().all(|s| s.status == SolveStatus::Converged)
    }

    pub fn any_violation(&self) -> bool {
        self.steps.iter().any(|s| s.violated)
    }

    /// `x[t]` for `t = 0..=len`.
    pub fn state_trajectory(&self) -> Vec<DVector<f64>> {
        std::iter::once(&self.initial_state)
            .chain(self.steps.iter().map(|s| &s.state))
            .map(|x| DVector::from_column_slice(x))
            .collect()
    }

    pub fn summary(&self, game: &LqGame, fleet: Option<&Fleet>) -> Summary {
        let its: Vec<f64> = self.steps.iter().map(|s| s.iterations as f64).collect();
        let times = self.elapsed();
        Summary {
            solver: self.solver,
            horizon: self.horizon,
            steps: self.len(),
            budget_mode: self.budget_mode,
            converged_steps: self.steps.iter().filter(|s| s.status == SolveStatus::Converged).count(),
            all_converged: self.all_converged(),
            median_iterations: median(&its),
            p90_iterations: percentile(&its, 90.0),
            max_iterations: self.steps.iter().map(|s| s.iterations).max().unwrap_or(0),
            median_elapsed_s: median(&times),
            p90_elapsed_s: percentile(&times, 90.0),
            total_elapsed_s: times.iter().sum(),
            max_residual: self.steps.iter().map(|s| s.residual).fold(0.0, f64::max),
            violations: check_violations(self, game, fleet),
            aborted: self.aborted.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    /// `t, iterations, elapsed_s, residual, status, violation_max`.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.steps {
            w.serialize(MetricsRow {
                t: s.t,
                iterations: s.iterations,
                elapsed_s: s.elapsed_s,
                residual: s.residual,
                status: s.status,
                violation_max: s.violation_max,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per step: `t`, then per-vehicle position, velocity and applied
    /// input (state components and inputs when there is no physical map).
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path)?;
        let Some(first) = self.steps.first() else {
            w.write_record(["t"])?;
            w.flush()?;
            return Ok(());
        };
        let physical = !first.positions.is_empty();
        let mut header = vec!["t".to_string()];
        if physical {
            header.extend((0..first.positions.len()).map(|i| format!("p{i}")));
            header.extend((0..first.velocities.len()).map(|i| format!("v{i}")));
        } else {
            header.extend((0..first.state.len()).map(|i| format!("x{i}")));
        }
        header.extend((0..first.applied_inputs.len()).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            let values = if physical {
                s.positions.iter().chain(&s.velocities).chain(&s.applied_inputs).collect::<Vec<_>>()
            } else {
                s.state.iter().chain(&s.applied_inputs).collect()
            };
            row.extend(values.into_iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub iterations: usize,
    pub elapsed_s: f64,
    pub residual: f64,
    pub status: SolveStatus,
    pub violation_max: f64,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Header and numeric rows of a trajectory CSV.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), SimError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| SimError::Config(format!("bad number '{f}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Per-class maximum realized violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassViolation {
    pub class: RowClass,
    pub max_violation: f64,
    pub first_step: usize,
    pub steps_violated: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub classes: Vec<ClassViolation>,
    pub collision: bool,
    pub first_collision_step: Option<usize>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty() && !self.collision
    }

    pub fn class(&self, class: RowClass) -> Option<&ClassViolation> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Evaluates every constraint on the realized trajectory: stage rows at
/// `(x[t], u[t])` and state rows at `x[t+1]`, both reported as step `t`.
/// A collision is a nonpositive gap.
pub fn check_violations(log: &RhLog, game: &LqGame, fleet: Option<&Fleet>) -> ViolationReport {
    let spec = &game.constraints;
    let xs = log.state_trajectory();
    let mut report = ViolationReport::default();
    for (t, step) in log.steps.iter().enumerate() {
        let inputs = split_inputs(&step.game_inputs, game);
        let stage = spec.stage_values(&xs[t], &inputs);
        let state = spec.state_values(&xs[t + 1]);
        let mut worst: Vec<(RowClass, f64)> = Vec::new();
        for (&v, tag) in stage.iter().zip(&spec.stage_tags).chain(state.iter().zip(&spec.state_tags)) {
            match worst.iter_mut().find(|(c, _)| *c == tag.class) {
                Some((_, w)) => *w = w.max(v),
                None => worst.push((tag.class, v)),
            }
        }
        for (class, v) in worst.into_iter().filter(|&(_, v)| v > VIOLATION_TOL) {
            match report.classes.iter_mut().find(|c| c.class == class) {
                Some(c) => {
                    c.max_violation = c.max_violation.max(v);
                    c.steps_violated += 1;
                }
                None => report.classes.push(ClassViolation { class, max_violation: v, first_step: t, steps_violated: 1 }),
            }
        }
        if let Some(f) = fleet {
            let collided = f.gaps(&xs[t + 1]).into_iter().flatten().any(|g| g <= 0.0);
            if collided && !report.collision {
                report.collision = true;
                report.first_collision_step = Some(t);
            }
        }
    }
    report
}

fn split_inputs(flat: &[f64], game: &LqGame) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(game.agents());
    let mut o = 0;
    for m in game.input_dims() {
        out.push(DVector::from_column_slice(&flat[o..o + m]));
        o += m;
    }
    out
}

/// Per agent: drop stage 0, append `tail` (zero when `None`); duals reset to 𝟙.
pub fn shift_warm_start(
    prev_u: &DVector<f64>,
    prev_lambda: &DVector<f64>,
    input_dims: &[usize],
    horizon: usize,
    tail: Option<&[DVector<f64>]>,
) -> (DVector<f64>, DVector<f64>) {
    let mut u = DVector::zeros(prev_u.len());
    let mut o = 0;
    for (i, &m) in input_dims.iter().enumerate() {
        let len = m * horizon;
        u.rows_mut(o, len - m).copy_from(&prev_u.rows(o + m, len - m));
        if let Some(t) = tail {
            u.rows_mut(o + len - m, m).copy_from(&t[i]);
        }
        o += len;
    }
    (u, DVector::from_element(prev_lambda.len(), 1.0))
}

/// The condensed game for one horizon, reusable across runs and solvers.
pub struct Simulator<'a> {
    game: &'a LqGame,
    riccati: &'a RiccatiSolution,
    stacked: StackedGame,
}

impl<'a> Simulator<'a> {
    pub fn new(game: &'a LqGame, riccati: &'a RiccatiSolution, horizon: usize) -> Result<Self, SimError> {
        let stacked = StackedGame::new(game, horizon, riccati)?;
        Ok(Self { game, riccati, stacked })
    }

    pub fn stacked(&self) -> &StackedGame {
        &self.stacked
    }

    fn start_point(
        &self,
        config: &RhConfig,
        t: usize,
        prev: Option<(&DVector<f64>, &DVector<f64>, &DVector<f64>)>,
    ) -> (DVector<f64>, DVector<f64>) {
        let (n, m) = (self.stacked.dim(), self.stacked.rows());
        match prev {
            Some((x_prev, u, l)) if config.warm_start => {
                let tail = match config.warm_tail {
                    WarmTail::Zero => None,
                    WarmTail::Feedback => {
                        let xp = self.stacked.predict(x_prev, u);
                        let ns = self.game.state_dim();
                        let x_t = xp.rows(xp.len() - ns, ns).into_owned();
                        Some(self.riccati.k.iter().map(|k| k * &x_t).collect::<Vec<_>>())
                    }
                };
                shift_warm_start(u, l, &self.stacked.input_dims, self.stacked.horizon, tail.as_deref())
            }
            _ => match config.seed {
                Some(s) => random_start(n, m, s.wrapping_add(t as u64)),
                None => (DVector::zeros(n), DVector::from_element(m, 1.0)),
            },
        }
    }

    /// Runs the closed loop from `x0`. Leader positions (indexed by vehicle)
    /// are only used with a fleet.
    pub fn run(
        &self,
        config: &RhConfig,
        x0: &DVector<f64>,
        fleet: Option<&Fleet>,
        leader_positions: &[f64],
    ) -> Result<RhLog, SimError> {
        config.validate()?;
        if config.horizon != self.stacked.horizon {
            return Err(SimError::Config(format!(
                "simulator was built for horizon {}, config asks for {}",
                self.stacked.horizon, config.horizon
            )));
        }
        if x0.len() != self.game.state_dim() {
            return Err(SimError::Config(format!("x0 has length {}, expected {}", x0.len(), self.game.state_dim())));
        }
        let solver = PreparedSolver::new(config.solver, config.effective_solver_config(), &self.stacked.m)?;
        let mut leaders = leader_positions.to_vec();
        if let Some(f) = fleet {
            if leaders.len() != f.vehicles() {
                return Err(SimError::Config("one leader position per vehicle is required".into()));
            }
        }
        let mut log = RhLog {
            solver: config.solver,
            horizon: config.horizon,
            budget_mode: config.effective_solver_config().budget(config.solver).is_some(),
            initial_state: x0.as_slice().to_vec(),
            initial_positions: fleet.map(|f| f.positions(x0, &leaders)).unwrap_or_default(),
            initial_velocities: fleet.map(|f| f.velocities(x0)).unwrap_or_default(),
            steps: Vec::with_capacity(config.sim_steps),
            collision: false,
            aborted: None,
        };
        let spec = &self.game.constraints;
        let mut x = x0.clone();
        let mut prev: Option<(DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        for t in 0..config.sim_steps {
            let problem = self.stacked.problem(&x);
            let (u0, l0) = self.start_point(config, t, prev.as_ref().map(|(a, b, c)| (a, b, c)));
            let clock = Instant::now();
            let result = solver.solve(&problem, Some((&u0, &l0)));
            let elapsed_s = clock.elapsed().as_secs_f64();
            let report = match result {
                Ok(r) if r.status != SolveStatus::NumericalFailure => r,
                Ok(r) => {
                    log.aborted = Some(format!("step {t}: {}", r.message.unwrap_or_else(|| "numerical failure".into())));
                    break;
                }
                Err(e) => {
                    log.aborted = Some(format!("step {t}: {e}"));
                    break;
                }
            };
            let game_inputs = self.stacked.first_inputs(&report.solution);
            let applied = self.game.applied_inputs(&x, &game_inputs);
            let next = self.game.step_physical(&x, &applied);

            let stage = spec.stage_values(&x, &game_inputs);
            let state = spec.state_values(&next);
            let violation_max = stage.iter().chain(state.iter()).fold(0.0f64, |a, &b| a.max(b));
            let (positions, velocities) = match fleet {
                Some(f) => {
                    let acc: Vec<f64> = applied.iter().map(|u| u[0]).collect();
                    f.advance_leaders(&mut leaders, &x, &acc);
                    let gaps_collide = f.gaps(&next).into_iter().flatten().any(|g| g <= 0.0);
                    log.collision |= gaps_collide;
                    (f.positions(&next, &leaders), f.velocities(&next))
                }
                None => (Vec::new(), Vec::new()),
            };
            log.steps.push(StepLog {
                t,
                iterations: report.iterations,
                elapsed_s,
                residual: report.final_residual(),
                status: report.status,
                violation_max,
                violated: violation_max > VIOLATION_TOL,
                game_inputs: game_inputs.iter().flat_map(|u| u.iter().copied()).collect(),
                applied_inputs: applied.iter().flat_map(|u| u.iter().copied()).collect(),
                state: next.as_slice().to_vec(),
                positions,
                velocities,
            });
            prev = Some((x, report.solution, report.multipliers));
            x = next;
        }
        Ok(log)
    }

    /// Solves the AVI at each given state with `kind`, warm-starting from the
    /// solver's own previous solution. Every solver sees the same instances.
    pub fn solve_sequence(
        &self,
        kind: SolverKind,
        config: &RhConfig,
        states: &[DVector<f64>],
    ) -> Result<Vec<SequenceStep>, SimError> {
        let solver = PreparedSolver::new(kind, config.effective_solver_config(), &self.stacked.m)?;
        let mut prev: Option<(DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        let mut out = Vec::with_capacity(states.len());
        for (t, x) in states.iter().enumerate() {
            let problem = self.stacked.problem(x);
            let (u0, l0) = self.start_point(config, t, prev.as_ref().map(|(a, b, c)| (a, b, c)));
            let clock = Instant::now();
            let report = solver.solve(&problem, Some((&u0, &l0)))?;
            let elapsed_s = clock.elapsed().as_secs_f64();
            out.push(SequenceStep {
                step: t,
                solver: kind,
                iterations: report.iterations,
                elapsed_s,
                residual: report.final_residual(),
                status: report.status,
            });
            prev = Some((x.clone(), report.solution, report.multipliers));
        }
        Ok(out)
    }
}

/// Convenience wrapper around [`Simulator::run`].
pub fn run(game: &LqGame, riccati: &RiccatiSolution, config: &RhConfig, x0: &DVector<f64>) -> Result<RhLog, SimError> {
    Simulator::new(game, riccati, config.horizon)?.run(config, x0, None, &[])
}

/// Runs a built scenario with its physical map.
pub fn run_scenario(scenario: &Scenario, riccati: &RiccatiSolution, config: &RhConfig) -> Result<RhLog, SimError> {
    Simulator::new(&scenario.game, riccati, config.horizon)?.run(
        config,
        &scenario.x0,
        scenario.fleet.as_ref(),
        &scenario.leader_positions,
    )
}

/// Aggregates written next to a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub solver: SolverKind,
    pub horizon: usize,
    pub steps: usize,
    pub budget_mode: bool,
    pub converged_steps: usize,
    pub all_converged: bool,
    pub median_iterations: f64,
    pub p90_iterations: f64,
    pub max_iterations: usize,
    pub median_elapsed_s: f64,
    pub p90_elapsed_s: f64,
    pub total_elapsed_s: f64,
    pub max_residual: f64,
    pub violations: ViolationReport,
    pub aborted: Option<String>,
}

impl Summary {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One solve of a benchmark sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceStep {
    pub step: usize,
    pub solver: SolverKind,
    pub iterations: usize,
    pub elapsed_s: f64,
    pub residual: f64,
    pub status: SolveStatus,
}

/// Long-format benchmark row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub repetition: usize,
    pub step: usize,
    pub solver: SolverKind,
    pub iterations: usize,
    pub elapsed_s: f64,
    pub residual: f64,
    pub status: SolveStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummaryRow {
    pub solver: SolverKind,
    pub median_iterations: f64,
    pub p90_iterations: f64,
    pub median_elapsed_s: f64,
    pub converged_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummaryRow>,
}

impl BenchResult {
    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>, SimError> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<Result<_, _>>()?)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from(
            "| solver | median iterations | p90 iterations | median time (ms) | converged |\n|---|---|---|---|---|\n",
        );
        for r in &self.summary {
            s.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.3} | {:.1}% |\n",
                r.solver,
                r.median_iterations,
                r.p90_iterations,
                r.median_elapsed_s * 1e3,
                100.0 * r.converged_fraction
            ));
        }
        s
    }

    pub fn write_markdown(&self, path: &Path) -> Result<(), SimError> {
        File::create(path)?.write_all(self.markdown().as_bytes())?;
        Ok(())
    }
}

/// Benchmark protocol: the closed loop is run once with `reference` to fix
/// the state sequence, then every solver solves the AVIs along that
/// sequence, `repetitions` times each.
pub fn bench(
    scenario: &Scenario,
    riccati: &RiccatiSolution,
    config: &RhConfig,
    reference: SolverKind,
    solvers: &[SolverKind],
    repetitions: usize,
) -> Result<BenchResult, SimError> {
    if solvers.is_empty() {
        return Err(SimError::Config("at least one solver is required".into()));
    }
    if repetitions == 0 {
        return Err(SimError::Config("repetitions must be at least 1".into()));
    }
    let sim = Simulator::new(&scenario.game, riccati, config.horizon)?;
    let ref_config = RhConfig { solver: reference, iteration_budget: None, ..config.clone() };
    let log = sim.run(&ref_config, &scenario.x0, scenario.fleet.as_ref(), &scenario.leader_positions)?;
    let mut states = log.state_trajectory();
    states.truncate(log.len());
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &kind in solvers {
        let mut its = Vec::new();
        let mut times = Vec::new();
        let mut converged = 0usize;
        for rep in 0..repetitions {
            for s in sim.solve_sequence(kind, config, &states)? {
                its.push(s.iterations as f64);
                times.push(s.elapsed_s);
                converged += usize::from(s.status == SolveStatus::Converged);
                rows.push(BenchRow {
                    repetition: rep,
                    step: s.step,
                    solver: kind,
                    iterations: s.iterations,
                    elapsed_s: s.elapsed_s,
                    residual: s.residual,
                    status: s.status,
                });
            }
        }
        summary.push(BenchSummaryRow {
            solver: kind,
            median_iterations: median(&its),
            p90_iterations: percentile(&its, 90.0),
            median_elapsed_s: median(&times),
            converged_fraction: converged as f64 / its.len().max(1) as f64,
        });
    }
    Ok(BenchResult { rows, summary })
}

pub fn read_to_string(path: &Path) -> Result<String, SimError> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ConstraintSpec, RiccatiOptions, RowTag};
    use crate::scenarios::Link;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn shift_examples() {
        let (u, l) = shift_warm_start(&v(&[1.0, 2.0, 3.0]), &v(&[0.2, 0.0]), &[1], 3, None);
        assert_eq!(u, v(&[2.0, 3.0, 0.0]));
        assert_eq!(l, v(&[1.0, 1.0]));
        let (u, _) = shift_warm_start(&DVector::zeros(4), &DVector::zeros(1), &[2], 2, None);
        assert_eq!(u, DVector::zeros(4));
    }

    fn scalar_game(a: f64, spec: Option<ConstraintSpec>) -> LqGame {
        let s = |x| DMatrix::from_element(1, 1, x);
        match spec {
            Some(c) => LqGame::new(s(a), vec![s(1.0)], vec![s(1.0)], vec![s(1.0)], c).unwrap(),
            None => LqGame::unconstrained(s(a), vec![s(1.0)], vec![s(1.0)], vec![s(1.0)]).unwrap(),
        }
    }

    #[test]
    fn origin_is_an_equilibrium() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -1.0, 1.0);
        let g = scalar_game(1.2, Some(spec));
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let cfg = RhConfig { sim_steps: 20, horizon: 5, ..Default::default() };
        let log = run(&g, &ric, &cfg, &DVector::zeros(1)).unwrap();
        assert_eq!(log.len(), 20);
        for s in &log.steps {
            assert_eq!(s.applied_inputs, vec![0.0]);
            assert_eq!(s.state, vec![0.0]);
            assert!(s.iterations <= 2);
        }
    }

    #[test]
    fn unconstrained_closed_loop_is_lqr() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.005, 0.1]);
        let g = LqGame::unconstrained(a.clone(), vec![b.clone()], vec![DMatrix::identity(2, 2)], vec![DMatrix::identity(1, 1)])
            .unwrap();
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let mut cfg = RhConfig { sim_steps: 50, horizon: 6, ..Default::default() };
        cfg.solver_config = cfg.solver_config.with_tol(1e-10);
        let x0 = v(&[1.0, -0.5]);
        let log = run(&g, &ric, &cfg, &x0).unwrap();
        let a_cl = &a + &b * &ric.k[0];
        let mut x = x0;
        for s in &log.steps {
            x = &a_cl * &x;
            assert!((v(&s.state) - &x).amax() < 1e-6, "step {}", s.t);
        }
    }

    #[test]
    fn logged_state_follows_physical_dynamics() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -0.3, 0.3);
        let g = crate::game::prestabilize(&scalar_game(1.1, Some(spec)), &[DMatrix::from_element(1, 1, -0.5)]).unwrap();
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let mut cfg = RhConfig { sim_steps: 30, horizon: 4, ..Default::default() };
        cfg.solver_config = cfg.solver_config.with_tol(1e-9);
        let log = run(&g, &ric, &cfg, &v(&[2.0])).unwrap();
        let xs = log.state_trajectory();
        for (t, s) in log.steps.iter().enumerate() {
            let expected = 1.1 * xs[t][0] + s.applied_inputs[0];
            assert!((s.state[0] - expected).abs() < 1e-12);
            assert!(s.applied_inputs[0].abs() <= 0.3 + 1e-6);
        }
        assert!(!log.any_violation());
    }

    #[test]
    fn hand_crafted_gap_violation() {
        // one follower whose gap is p_pred − p = x[0] + 5
        let fleet = Fleet {
            v_ref: 10.0,
            tau_s: 0.1,
            d_min: 2.0,
            links: vec![Link::Leader { vel: 2 }, Link::Follower { pred: 0, gap: 0, vel: 1, spacing: 5.0, headway: 0.0 }],
            state_dim: 3,
        };
        let mut spec = ConstraintSpec::empty(3, &[1, 1]);
        spec.push_state_row(&[-1.0, 0.0, 0.0], 2.0 - 5.0, RowTag::new(RowClass::Distance, 1));
        let s = |x| DMatrix::from_element(1, 1, x);
        let g = LqGame::new(
            DMatrix::identity(3, 3),
            vec![DMatrix::zeros(3, 1), DMatrix::zeros(3, 1)],
            vec![DMatrix::identity(3, 3); 2],
            vec![s(1.0), s(1.0)],
            spec,
        )
        .unwrap();
        let step = |t: usize, gap: f64| StepLog {
            t,
            iterations: 1,
            elapsed_s: 0.0,
            residual: 0.0,
            status: SolveStatus::Converged,
            violation_max: 0.0,
            violated: false,
            game_inputs: vec![0.0, 0.0],
            applied_inputs: vec![0.0, 0.0],
            state: vec![gap - 5.0, 0.0, 0.0],
            positions: vec![],
            velocities: vec![],
        };
        let mut log = RhLog {
            solver: SolverKind::Newton,
            horizon: 1,
            budget_mode: false,
            initial_state: vec![5.0, 0.0, 0.0],
            initial_positions: vec![],
            initial_velocities: vec![],
            steps: (0..10).map(|t| step(t, if t == 7 { 1.5 } else { 10.0 })).collect(),
            collision: false,
            aborted: None,
        };
        let r = check_violations(&log, &g, Some(&fleet));
        let d = r.class(RowClass::Distance).unwrap();
        assert_eq!(d.first_step, 7);
        assert_eq!(d.steps_violated, 1);
        assert!((d.max_violation - 0.5).abs() < 1e-12);
        assert!(!r.collision);

        log.steps = (0..10).map(|t| step(t, 10.0)).collect();
        assert!(check_violations(&log, &g, Some(&fleet)).is_empty());
        log.steps[3] = step(3, -0.1);
        let r = check_violations(&log, &g, Some(&fleet));
        assert!(r.collision);
        assert_eq!(r.first_collision_step, Some(3));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -1.0, 1.0);
        let g = scalar_game(1.05, Some(spec));
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let cfg = RhConfig { sim_steps: 8, horizon: 3, ..Default::default() };
        let log = run(&g, &ric, &cfg, &v(&[3.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let metrics = dir.path().join("m.csv");
        log.write_metrics_csv(&metrics).unwrap();
        let rows = read_metrics_csv(&metrics).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[4].iterations, log.steps[4].iterations);
        assert_eq!(rows[4].residual, log.steps[4].residual);
        let traj = dir.path().join("t.csv");
        log.write_trajectory_csv(&traj).unwrap();
        let (header, data) = read_trajectory_csv(&traj).unwrap();
        assert_eq!(header, vec!["t", "x0", "u0"]);
        assert_eq!(data[2][1], log.steps[2].state[0]);
        assert_eq!(RhLog::from_json(&log.to_json()).unwrap(), log);
        let summary = log.summary(&g, None);
        assert_eq!(Summary::from_json(&serde_json::to_string(&summary).unwrap()).unwrap(), summary);
    }

    #[test]
    fn deterministic_iterations() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -0.5, 0.5);
        let g = scalar_game(1.1, Some(spec));
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let cfg = RhConfig { sim_steps: 15, horizon: 4, seed: Some(3), warm_start: false, ..Default::default() };
        let a = run(&g, &ric, &cfg, &v(&[4.0])).unwrap();
        let b = run(&g, &ric, &cfg, &v(&[4.0])).unwrap();
        assert_eq!(a.iterations(), b.iterations());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.state, y.state);
        }
    }
}

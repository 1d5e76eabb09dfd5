//! Smoothed Fischer–Burmeister Newton method for AVIs.
//!
//! The KKT conditions are written with the slack `a = −(Du + d) ≥ 0`:
//!
//! ```text
//! Φ_μ(u, λ) = [ Mu + q + Dᵀλ ]
//!             [ φ_μ(a, λ)    ]        φ_μ(a, b) = √(a² + b² + μ²) − a − b
//! ```
//!
//! `φ_μ(a, b) = 0` iff `a, b > 0` and `ab = μ²/2`, so the smoothed root is an
//! `O(μ²)` perturbation of the AVI solution. The Jacobian is
//! `[[M, Dᵀ], [−G D, H]]` with `G = diag(∂φ/∂a)`, `H = diag(∂φ/∂b)`, both with
//! entries in `(−2, 0)` for `μ > 0`. Eliminating `Δλ` gives the reduced system
//! `(M + Dᵀ W D) Δu = −r₁ + Dᵀ H⁻¹ r₂` with `W = G H⁻¹ ⪰ 0`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{lu_factor_solve, max_abs};
use crate::vi::{natural_residual_from, AviProblem, SolveStatus, SolverReport, ViError};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum NewtonError {
    #[error("smoothing parameter must be positive, got {0}")]
    InvalidSmoothing(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Newton system is singular")]
    SingularJacobian,
    #[error("line search failed (step length fell to {0:.3e})")]
    LinesearchFailure(f64),
}

/// Borrowed `(M, q, D, d)`.
#[derive(Clone, Copy, Debug)]
pub struct KktView<'a> {
    pub m: &'a DMatrix<f64>,
    pub q: &'a DVector<f64>,
    pub d: &'a DMatrix<f64>,
    pub offset: &'a DVector<f64>,
}

impl KktView<'_> {
    fn n(&self) -> usize {
        self.q.len()
    }

    fn rows(&self) -> usize {
        self.offset.len()
    }

    fn slack(&self, u: &DVector<f64>) -> DVector<f64> {
        -(self.d * u + self.offset)
    }

    fn residual(&self, u: &DVector<f64>, lambda: &DVector<f64>, mu: f64) -> DVector<f64> {
        let n = self.n();
        let m = self.rows();
        let mut out = DVector::zeros(n + m);
        let mut top = self.m * u + self.q;
        top.gemv_tr(1.0, self.d, lambda, 1.0);
        out.rows_mut(0, n).copy_from(&top);
        let a = self.slack(u);
        for i in 0..m {
            out[n + i] = phi_mu(a[i], lambda[i], mu);
        }
        out
    }

    fn partials(&self, u: &DVector<f64>, lambda: &DVector<f64>, mu: f64) -> (DVector<f64>, DVector<f64>) {
        let a = self.slack(u);
        let m = self.rows();
        let mut g = DVector::zeros(m);
        let mut h = DVector::zeros(m);
        for i in 0..m {
            let (gi, hi) = phi_mu_partials(a[i], lambda[i], mu);
            g[i] = gi;
            h[i] = hi;
        }
        (g, h)
    }

    fn jacobian(&self, g: &DVector<f64>, h: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let m = self.rows();
        let mut j = DMatrix::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(self.m);
        j.view_mut((0, n), (n, m)).copy_from(&self.d.transpose());
        for i in 0..m {
            for c in 0..n {
                j[(n + i, c)] = -g[i] * self.d[(i, c)];
            }
            j[(n + i, n + i)] = h[i];
        }
        j
    }

    /// `J·(du; dλ)` without forming `J`.
    fn jacobian_apply(
        &self,
        g: &DVector<f64>,
        h: &DVector<f64>,
        du: &DVector<f64>,
        dl: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.n();
        let m = self.rows();
        let mut out = DVector::zeros(n + m);
        let mut top = self.m * du;
        top.gemv_tr(1.0, self.d, dl, 1.0);
        out.rows_mut(0, n).copy_from(&top);
        let ddu = self.d * du;
        for i in 0..m {
            out[n + i] = -g[i] * ddu[i] + h[i] * dl[i];
        }
        out
    }

    /// Both linear solves are followed by one step of iterative refinement
    /// against the exact Jacobian product; near a degenerate solution the
    /// system is badly scaled and a single solve loses several digits.
    fn direction_full(
        &self,
        residual: &DVector<f64>,
        g: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
        let n = self.n();
        let m = self.rows();
        let (lu, mut x) =
            lu_factor_solve(self.jacobian(g, h), &(-residual), n).ok_or(NewtonError::SingularJacobian)?;
        let fit = self.jacobian_apply(g, h, &x.rows(0, n).into_owned(), &x.rows(n, m).into_owned());
        if let Some(c) = lu.solve(&(-(residual + fit))).filter(|c| c.iter().all(|v| v.is_finite())) {
            x += c;
        }
        Ok((x.rows(0, n).into_owned(), x.rows(n, m).into_owned()))
    }

    fn direction_reduced(
        &self,
        residual: &DVector<f64>,
        g: &DVector<f64>,
        h: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
        let n = self.n();
        let m = self.rows();

        // √W · D, so that DᵀWD is a single transposed product.
        let mut scaled = self.d.clone();
        for i in 0..m {
            let w = (g[i] / h[i]).max(0.0);
            scaled.row_mut(i).scale_mut(w.sqrt());
        }
        let mut reduced = self.m.clone();
        reduced.gemm_tr(1.0, &scaled, &scaled, 1.0);

        // J(du; dλ) = (t; b) ⇒ (M + DᵀWD)du = t − Dᵀ(b/h), dλ = (b + g∘Ddu)/h.
        let rhs_of = |t: DVector<f64>, b: &DVector<f64>| {
            let b_h = b.component_div(h);
            let mut rhs = t;
            rhs.gemv_tr(-1.0, self.d, &b_h, 1.0);
            rhs
        };
        let dual_of = |du: &DVector<f64>, b: &DVector<f64>| {
            let ddu = self.d * du;
            DVector::from_fn(m, |i, _| (b[i] + g[i] * ddu[i]) / h[i])
        };
        let t = -residual.rows(0, n).into_owned();
        let b = -residual.rows(n, m).into_owned();
        let (lu, mut du) = lu_factor_solve(reduced, &rhs_of(t, &b), n).ok_or(NewtonError::SingularJacobian)?;
        let mut dl = dual_of(&du, &b);

        let fit = self.jacobian_apply(g, h, &du, &dl);
        let t = -(residual.rows(0, n) + fit.rows(0, n));
        let b = -(residual.rows(n, m) + fit.rows(n, m));
        if let Some(cu) = lu.solve(&rhs_of(t, &b)).filter(|c| c.iter().all(|v| v.is_finite())) {
            let cl = dual_of(&cu, &b);
            if cl.iter().all(|v| v.is_finite()) {
                du += cu;
                dl += cl;
            }
        }
        if dl.iter().all(|v| v.is_finite()) {
            Ok((du, dl))
        } else {
            Err(NewtonError::SingularJacobian)
        }
    }
}

/// `√(a² + b² + μ²) − a − b`, evaluated without cancellation.
pub fn phi_mu(a: f64, b: f64, mu: f64) -> f64 {
    let r = a.hypot(b).hypot(mu);
    if a + b > 0.0 {
        (mu * mu - 2.0 * a * b) / (r + a + b)
    } else {
        r - a - b
    }
}

/// `(∂φ_μ/∂a, ∂φ_μ/∂b) = (a/r − 1, b/r − 1)`. At `a = b = μ = 0` the
/// generalized derivative `(−1, −1)` is returned.
pub fn phi_mu_partials(a: f64, b: f64, mu: f64) -> (f64, f64) {
    let r = a.hypot(b).hypot(mu);
    if r == 0.0 {
        return (-1.0, -1.0);
    }
    let one = |x: f64, y: f64| {
        if x > 0.0 {
            -(y * y + mu * mu) / (r * (r + x))
        } else {
            x / r - 1.0
        }
    };
    (one(a, b), one(b, a))
}

/// A primal-dual point together with the smoothing parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedKktState {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    mu: f64,
}

impl SmoothedKktState {
    pub fn new(u: DVector<f64>, lambda: DVector<f64>, mu: f64) -> Result<Self, NewtonError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(NewtonError::InvalidSmoothing(mu));
        }
        Ok(Self { u, lambda, mu })
    }

    /// The exact (`μ = 0`) Fischer–Burmeister system. Only residual
    /// evaluation is meaningful; the Jacobian may be singular.
    pub fn unsmoothed(u: DVector<f64>, lambda: DVector<f64>) -> Self {
        Self { u, lambda, mu: 0.0 }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

fn check_dims(problem: &AviProblem, state: &SmoothedKktState) -> Result<(), NewtonError> {
    if state.u.len() != problem.dim() || state.lambda.len() != problem.rows() {
        return Err(NewtonError::Dimension(format!(
            "state has (u: {}, λ: {}), problem has (n: {}, m: {})",
            state.u.len(),
            state.lambda.len(),
            problem.dim(),
            problem.rows()
        )));
    }
    Ok(())
}

/// `Φ_μ(u, λ)`, length `n + m`.
pub fn ncp_residual(problem: &AviProblem, state: &SmoothedKktState) -> Result<DVector<f64>, NewtonError> {
    check_dims(problem, state)?;
    Ok(problem.kkt().residual(&state.u, &state.lambda, state.mu))
}

/// `∇Φ_μ(u, λ)`, `(n + m) × (n + m)`.
pub fn ncp_jacobian(problem: &AviProblem, state: &SmoothedKktState) -> Result<DMatrix<f64>, NewtonError> {
    check_dims(problem, state)?;
    let kkt = problem.kkt();
    let (g, h) = kkt.partials(&state.u, &state.lambda, state.mu);
    Ok(kkt.jacobian(&g, &h))
}

fn direction(
    problem: &AviProblem,
    state: &SmoothedKktState,
    solve: LinearSolve,
) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
    check_dims(problem, state)?;
    if state.mu <= 0.0 {
        return Err(NewtonError::InvalidSmoothing(state.mu));
    }
    let kkt = problem.kkt();
    let res = kkt.residual(&state.u, &state.lambda, state.mu);
    let (g, h) = kkt.partials(&state.u, &state.lambda, state.mu);
    match solve {
        LinearSolve::Full => kkt.direction_full(&res, &g, &h),
        LinearSolve::Reduced => kkt.direction_reduced(&res, &g, &h),
    }
}

/// Newton direction from a dense LU of the full `(n + m)` system.
pub fn newton_direction_full(
    problem: &AviProblem,
    state: &SmoothedKktState,
) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
    direction(problem, state, LinearSolve::Full)
}

/// Newton direction from the `n × n` reduced system.
pub fn newton_direction_reduced(
    problem: &AviProblem,
    state: &SmoothedKktState,
) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
    direction(problem, state, LinearSolve::Reduced)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolve {
    Full,
    Reduced,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmijoParams {
    pub c: f64,
    pub beta: f64,
    pub min_step: f64,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self { c: 1e-4, beta: 0.5, min_step: 1e-12 }
    }
}

fn backtrack(
    merit0: f64,
    slope: f64,
    params: ArmijoParams,
    mut merit_at: impl FnMut(f64) -> f64,
) -> Result<f64, NewtonError> {
    let mut alpha = 1.0;
    loop {
        let trial = merit_at(alpha);
        if trial.is_finite() && trial <= merit0 + params.c * alpha * slope {
            return Ok(alpha);
        }
        alpha *= params.beta;
        if alpha < params.min_step {
            return Err(NewtonError::LinesearchFailure(alpha));
        }
    }
}

/// Largest `α ∈ {1, β, β², …}` with `Ψ(x + αd) ≤ Ψ(x) + cα∇Ψᵀd`, where
/// `Ψ = ½‖Φ_μ‖²` and `∇Ψ = ∇Φ_μᵀ Φ_μ`.
pub fn armijo_linesearch(
    problem: &AviProblem,
    state: &SmoothedKktState,
    direction: (&DVector<f64>, &DVector<f64>),
    params: ArmijoParams,
) -> Result<f64, NewtonError> {
    check_dims(problem, state)?;
    let (du, dl) = direction;
    let kkt = problem.kkt();
    let res = kkt.residual(&state.u, &state.lambda, state.mu);
    let (g, h) = kkt.partials(&state.u, &state.lambda, state.mu);
    let slope = res.dot(&kkt.jacobian_apply(&g, &h, du, dl));
    let merit0 = 0.5 * res.norm_squared();
    backtrack(merit0, slope, params, |alpha| {
        let u = &state.u + du * alpha;
        let l = &state.lambda + dl * alpha;
        0.5 * kkt.residual(&u, &l, state.mu).norm_squared()
    })
}

/// Damped Newton iteration on `Φ_μ = 0`, one step at a time.
#[derive(Clone, Debug)]
pub struct SmoothedNewton<'a> {
    kkt: KktView<'a>,
    mu: f64,
    solve: LinearSolve,
    armijo: ArmijoParams,
    u: DVector<f64>,
    lambda: DVector<f64>,
    residual: DVector<f64>,
}

/// Data about one accepted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub alpha: f64,
    /// Merit before the step.
    pub merit_before: f64,
    pub merit_after: f64,
}

impl<'a> SmoothedNewton<'a> {
    pub fn new(
        problem: &'a AviProblem,
        mu: f64,
        solve: LinearSolve,
        armijo: ArmijoParams,
        u0: DVector<f64>,
        lambda0: DVector<f64>,
    ) -> Result<Self, NewtonError> {
        Self::from_view(problem.kkt(), mu, solve, armijo, u0, lambda0)
    }

    pub(crate) fn from_view(
        kkt: KktView<'a>,
        mu: f64,
        solve: LinearSolve,
        armijo: ArmijoParams,
        u0: DVector<f64>,
        lambda0: DVector<f64>,
    ) -> Result<Self, NewtonError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(NewtonError::InvalidSmoothing(mu));
        }
        if u0.len() != kkt.n() || lambda0.len() != kkt.rows() {
            return Err(NewtonError::Dimension(format!(
                "start has (u: {}, λ: {}), problem has (n: {}, m: {})",
                u0.len(),
                lambda0.len(),
                kkt.n(),
                kkt.rows()
            )));
        }
        let residual = kkt.residual(&u0, &lambda0, mu);
        Ok(Self { kkt, mu, solve, armijo, u: u0, lambda: lambda0, residual })
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }

    pub fn residual_inf_norm(&self) -> f64 {
        max_abs(&self.residual)
    }

    pub fn merit(&self) -> f64 {
        0.5 * self.residual.norm_squared()
    }

    pub fn state(&self) -> SmoothedKktState {
        SmoothedKktState { u: self.u.clone(), lambda: self.lambda.clone(), mu: self.mu }
    }

    /// Newton direction at the current iterate.
    pub fn direction(&self) -> Result<(DVector<f64>, DVector<f64>), NewtonError> {
        let (g, h) = self.kkt.partials(&self.u, &self.lambda, self.mu);
        match self.solve {
            LinearSolve::Full => self.kkt.direction_full(&self.residual, &g, &h),
            LinearSolve::Reduced => self.kkt.direction_reduced(&self.residual, &g, &h),
        }
    }

    /// Direction, line search and update. The iterate is unchanged on error.
    pub fn step(&mut self) -> Result<StepInfo, NewtonError> {
        let (g, h) = self.kkt.partials(&self.u, &self.lambda, self.mu);
        let (du, dl) = match self.solve {
            LinearSolve::Full => self.kkt.direction_full(&self.residual, &g, &h)?,
            LinearSolve::Reduced => self.kkt.direction_reduced(&self.residual, &g, &h)?,
        };
        let slope = self.residual.dot(&self.kkt.jacobian_apply(&g, &h, &du, &dl));
        let merit0 = self.merit();
        let mut last: Option<(f64, DVector<f64>)> = None;
        let alpha = backtrack(merit0, slope, self.armijo, |alpha| {
            let u = &self.u + &du * alpha;
            let l = &self.lambda + &dl * alpha;
            let r = self.kkt.residual(&u, &l, self.mu);
            let merit = 0.5 * r.norm_squared();
            last = Some((alpha, r));
            merit
        })?;
        let (a_last, r) = last.expect("line search evaluates at least once");
        debug_assert_eq!(a_last, alpha);
        self.u.axpy(alpha, &du, 1.0);
        self.lambda.axpy(alpha, &dl, 1.0);
        self.residual = r;
        Ok(StepInfo { alpha, merit_before: merit0, merit_after: self.merit() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub mu: f64,
    pub armijo_c: f64,
    pub backtrack_beta: f64,
    pub iteration_budget: Option<usize>,
    pub use_reduced_system: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 100_000,
            mu: 1e-6,
            armijo_c: 1e-4,
            backtrack_beta: 0.5,
            iteration_budget: None,
            use_reduced_system: false,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), ViError> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.armijo_c) {
            return Err(ViError::Config(format!("armijo_c must lie in (0, 1), got {}", self.armijo_c)));
        }
        if !unit(self.backtrack_beta) {
            return Err(ViError::Config(format!(
                "backtrack_beta must lie in (0, 1), got {}",
                self.backtrack_beta
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(ViError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.tol > 0.0) {
            return Err(ViError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn linear_solve(&self) -> LinearSolve {
        if self.use_reduced_system {
            LinearSolve::Reduced
        } else {
            LinearSolve::Full
        }
    }

    fn armijo(&self) -> ArmijoParams {
        ArmijoParams { c: self.armijo_c, beta: self.backtrack_beta, ..ArmijoParams::default() }
    }
}

/// Iteration cap and the status reported when it is reached.
pub(crate) fn iteration_cap(max_iter: usize, budget: Option<usize>) -> (usize, SolveStatus) {
    match budget {
        Some(b) if b <= max_iter => (b, SolveStatus::BudgetExhausted),
        _ => (max_iter, SolveStatus::MaxIterations),
    }
}

pub(crate) fn check_warm(
    problem: &AviProblem,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<(), ViError> {
    if let Some((u, l)) = warm {
        if u.len() != problem.dim() {
            return Err(ViError::Dimension(format!(
                "warm start has length {}, problem dimension {}",
                u.len(),
                problem.dim()
            )));
        }
        if l.len() != problem.rows() {
            return Err(ViError::Dimension(format!(
                "warm-start multipliers have length {}, expected {}",
                l.len(),
                problem.rows()
            )));
        }
    }
    Ok(())
}

/// Seeded start with `u ~ U(−1, 1)ⁿ` and `λ ~ U(0, 1)ᵐ`.
pub fn random_start(n: usize, m: usize, seed: u64) -> (DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let l = DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    (u, l)
}

/// Runs the damped smoothed Newton method until the natural residual of the
/// original AVI drops to `tol` with the iterate inside `C` (to
/// [`FEASIBILITY_TOL`](crate::vi::FEASIBILITY_TOL)), or the iteration cap is
/// hit. Without a warm
/// start the iteration begins at `u = 0, λ = 1`.
///
/// Numerical breakdowns are reported through the status; `Err` means the
/// input itself is invalid.
pub fn solve(
    problem: &AviProblem,
    config: &NewtonConfig,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<SolverReport, ViError> {
    config.validate()?;
    check_warm(problem, warm)?;
    let start = Instant::now();
    let (u0, l0) = match warm {
        Some((u, l)) => (u.clone(), l.clone()),
        None => (DVector::zeros(problem.dim()), DVector::from_element(problem.rows(), 1.0)),
    };
    let mut newton = SmoothedNewton::new(problem, config.mu, config.linear_solve(), config.armijo(), u0, l0)
        .map_err(|e| ViError::Config(e.to_string()))?;
    let (cap, cap_status) = iteration_cap(config.max_iter, config.iteration_budget);

    let mut report = SolverReport {
        solution: newton.u().clone(),
        multipliers: newton.lambda().clone(),
        initial_residual: f64::NAN,
        residual_trace: Vec::new(),
        merit_trace: Vec::new(),
        step_sizes: Vec::new(),
        iterations: 0,
        elapsed: Default::default(),
        status: cap_status,
        message: None,
    };
    // The projection of u − F(u) at y = u has multipliers ν with
    // F(u) + Dᵀν = 0, so its multipliers are reported alongside the residual.
    let residual = |nw: &SmoothedNewton| {
        natural_residual_from(problem, nw.u(), Some((nw.u(), nw.lambda())))
            .map(|(r, p)| (r, p.multipliers))
    };
    let finish = |mut report: SolverReport, nw: &SmoothedNewton, status, message: Option<String>| {
        report.solution = nw.u().clone();
        report.status = status;
        report.message = message;
        report.elapsed = start.elapsed();
        report
    };
    let failed = |mut report: SolverReport, nw: &SmoothedNewton, msg: String| {
        report.multipliers = nw.lambda().clone();
        finish(report, nw, SolveStatus::NumericalFailure, Some(msg))
    };

    // The smoothed root is strictly feasible, so an iterate that meets the
    // residual test but still sits outside C is one or two steps away from
    // one that does not.
    let done = |r: f64, u: &DVector<f64>| r <= config.tol && problem.set().contains(u);

    match residual(&newton) {
        Ok((r, nu)) => {
            report.initial_residual = r;
            report.multipliers = nu;
        }
        Err(e) => return Ok(failed(report, &newton, format!("residual evaluation failed: {e}"))),
    }
    if done(report.initial_residual, newton.u()) {
        return Ok(finish(report, &newton, SolveStatus::Converged, None));
    }

    while report.iterations < cap {
        let info = match newton.step() {
            Ok(info) => info,
            Err(e) => {
                let msg = format!(
                    "{e} at iteration {} (‖Φ‖ = {:.3e}, residual {:.3e})",
                    report.iterations + 1,
                    newton.residual_norm(),
                    report.final_residual()
                );
                return Ok(failed(report, &newton, msg));
            }
        };
        report.iterations += 1;
        report.step_sizes.push(info.alpha);
        report.merit_trace.push(info.merit_after);
        let r = match residual(&newton) {
            Ok((r, nu)) => {
                report.multipliers = nu;
                r
            }
            Err(e) => return Ok(failed(report, &newton, format!("residual evaluation failed: {e}"))),
        };
        report.residual_trace.push(r);
        log::trace!("newton it {} alpha {:.2e} residual {:.3e}", report.iterations, info.alpha, r);
        if done(r, newton.u()) {
            return Ok(finish(report, &newton, SolveStatus::Converged, None));
        }
    }
    Ok(finish(report, &newton, cap_status, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vi::active_set_oracle;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn half_line(lower: f64) -> AviProblem {
        AviProblem::from_parts(
            DMatrix::from_element(1, 1, 1.0),
            v(&[0.0]),
            DMatrix::from_element(1, 1, -1.0),
            v(&[lower]),
        )
        .unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_mu(0.0, 0.0, 0.0), 0.0);
        assert!((phi_mu(0.0, 0.0, 1e-6) - 1e-6).abs() < 1e-20);
        assert!((phi_mu(3.0, 4.0, 0.0) + 2.0).abs() < 1e-15);
        assert_eq!(phi_mu(1.0, 0.0, 0.0), 0.0);
        assert!((phi_mu(-1.0, 2.0, 0.0) - (5f64.sqrt() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn phi_stable_form_keeps_tiny_values() {
        // √(1 + 1e-40) − 1 is lost in naive arithmetic.
        let v = phi_mu(1.0, 0.0, 1e-20);
        assert!((v - 0.5e-40).abs() < 1e-55, "{v:e}");
    }

    #[test]
    fn partial_examples() {
        assert_eq!(phi_mu_partials(0.0, 0.0, 1e-3), (-1.0, -1.0));
        let (g, h) = phi_mu_partials(3.0, 4.0, 0.0);
        assert!((g + 0.4).abs() < 1e-15 && (h + 0.2).abs() < 1e-15);
    }

    #[test]
    fn residual_at_kkt_point_vanishes() {
        let p = half_line(1.0);
        let s = SmoothedKktState::unsmoothed(v(&[1.0]), v(&[1.0]));
        assert_eq!(ncp_residual(&p, &s).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn spurious_root_under_constraint_value_argument() {
        // At u = 0, λ = 0 the constraint value is +1 (violated). Passing it
        // straight into φ would give a root; the slack −1 does not.
        let p = half_line(1.0);
        let s = SmoothedKktState::unsmoothed(v(&[0.0]), v(&[0.0]));
        assert_eq!(phi_mu(1.0, 0.0, 0.0), 0.0);
        let r = ncp_residual(&p, &s).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_smoothing_is_rejected() {
        assert!(SmoothedKktState::new(v(&[0.0]), v(&[0.0]), 0.0).is_err());
        let p = half_line(1.0);
        let s = SmoothedKktState::unsmoothed(v(&[0.0]), v(&[1.0]));
        assert!(newton_direction_full(&p, &s).is_err());
    }

    #[test]
    fn one_dimensional_direction_by_hand() {
        // (u, λ) = (2, 0.5): slack a = 1, b = 0.5, r = √1.25.
        let p = half_line(1.0);
        let mu = 1e-6;
        let s = SmoothedKktState::new(v(&[2.0]), v(&[0.5]), mu).unwrap();
        let r = (1.0f64 + 0.25 + mu * mu).sqrt();
        let (g, h) = (1.0 / r - 1.0, 0.5 / r - 1.0);
        let phi = r - 1.0 - 0.5;
        let r1 = 2.0 - 0.5;
        // [[1, −1], [g, h]] (du, dl) = −(r1, phi)
        let det = h + g;
        let du = (-r1 * h - phi) / det;
        let dl = (-phi + g * r1) / det;
        let (fu, fl) = newton_direction_full(&p, &s).unwrap();
        assert!((fu[0] - du).abs() < 1e-12 && (fl[0] - dl).abs() < 1e-12);
        let (ru, rl) = newton_direction_reduced(&p, &s).unwrap();
        assert!((ru[0] - du).abs() < 1e-12 && (rl[0] - dl).abs() < 1e-12);
    }

    #[test]
    fn diagonal_reduced_system() {
        // M = I, D = I: (1 + g/h) du = −r1 + r2/h componentwise.
        let n = 3;
        let p = AviProblem::from_parts(
            DMatrix::identity(n, n),
            v(&[1.0, -2.0, 0.5]),
            DMatrix::identity(n, n),
            v(&[-1.0, -1.0, -1.0]),
        )
        .unwrap();
        let s = SmoothedKktState::new(v(&[0.3, -0.2, 2.0]), v(&[0.5, 1.5, 0.1]), 1e-6).unwrap();
        let res = ncp_residual(&p, &s).unwrap();
        let (du, _) = newton_direction_reduced(&p, &s).unwrap();
        for i in 0..n {
            let a = -(s.u[i] - 1.0);
            let (g, h) = phi_mu_partials(a, s.lambda[i], 1e-6);
            let expected = (-res[i] + res[n + i] / h) / (1.0 + g / h);
            assert!((du[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = AviProblem::from_parts(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 1.5]),
            v(&[0.3, -1.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.2, -0.7]),
            v(&[-0.5, 0.2, -1.0]),
        )
        .unwrap();
        let s = SmoothedKktState::new(v(&[0.4, -0.3]), v(&[0.2, 1.1, 0.05]), 1e-2).unwrap();
        let j = ncp_jacobian(&p, &s).unwrap();
        let eps = 1e-6;
        for c in 0..5 {
            let bump = |sign: f64| {
                let mut t = s.clone();
                if c < 2 {
                    t.u[c] += sign * eps;
                } else {
                    t.lambda[c - 2] += sign * eps;
                }
                ncp_residual(&p, &t).unwrap()
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * eps);
            let col = j.column(c);
            assert!((fd - col).amax() <= 1e-6 * (1.0 + col.amax()), "column {c}");
        }
    }

    #[test]
    fn armijo_accepts_unit_step_at_root() {
        let p = half_line(1.0);
        let mu = 1e-6;
        // u = λ and (u − 1)u = μ²/2
        let root = (1.0 + (1.0f64 + 2.0 * mu * mu).sqrt()) / 2.0;
        let s = SmoothedKktState::new(v(&[root]), v(&[root]), mu).unwrap();
        assert!(ncp_residual(&p, &s).unwrap().amax() < 1e-15);
        let zero = v(&[0.0]);
        let alpha = armijo_linesearch(&p, &s, (&zero, &v(&[0.0])), ArmijoParams::default()).unwrap();
        assert_eq!(alpha, 1.0);
    }

    #[test]
    fn backtrack_scalar_example() {
        // Φ(x) = x at x = 1, d = −1.
        let alpha = backtrack(0.5, -1.0, ArmijoParams::default(), |a| 0.5 * (1.0 - a).powi(2)).unwrap();
        assert_eq!(alpha, 1.0);
        let err = backtrack(0.5, -1.0, ArmijoParams::default(), |_| 1.0).unwrap_err();
        assert!(matches!(err, NewtonError::LinesearchFailure(_)));
    }

    #[test]
    fn solves_half_line_problems() {
        for reduced in [false, true] {
            let cfg = NewtonConfig { use_reduced_system: reduced, tol: 1e-8, ..Default::default() };
            let rep = solve(&half_line(1.0), &cfg, None).unwrap();
            assert!(rep.converged());
            assert!((rep.solution[0] - 1.0).abs() < 1e-6);
            assert!((rep.multipliers[0] - 1.0).abs() < 1e-6);
            assert_eq!(rep.iterations, rep.residual_trace.len());

            let rep = solve(&half_line(-10.0), &cfg, None).unwrap();
            assert!(rep.converged());
            assert!(rep.solution[0].abs() < 1e-6 && rep.multipliers[0].abs() < 1e-6);
        }
    }

    #[test]
    fn budget_and_max_iter_statuses() {
        let p = AviProblem::from_parts(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.3, 2.0]),
            v(&[-5.0, 3.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.5]),
            v(&[-1.0, -0.5]),
        )
        .unwrap();
        let cfg = NewtonConfig { iteration_budget: Some(1), tol: 1e-12, ..Default::default() };
        let rep = solve(&p, &cfg, None).unwrap();
        assert_eq!(rep.status, SolveStatus::BudgetExhausted);
        assert_eq!(rep.iterations, 1);
        let cfg = NewtonConfig { max_iter: 1, tol: 1e-12, ..Default::default() };
        assert_eq!(solve(&p, &cfg, None).unwrap().status, SolveStatus::MaxIterations);
        let rep = solve(&p, &NewtonConfig::default(), None).unwrap();
        assert!(rep.converged());
        let (u, _) = active_set_oracle(&p).unwrap();
        assert!((rep.solution - u).amax() < 1e-5);
    }

    #[test]
    fn converged_warm_start_takes_no_iterations() {
        let p = half_line(1.0);
        let rep = solve(&p, &NewtonConfig::default(), Some((&v(&[1.0]), &v(&[1.0])))).unwrap();
        assert!(rep.converged());
        assert_eq!(rep.iterations, 0);
        assert!(rep.residual_trace.is_empty());
    }

    #[test]
    fn invalid_config_is_an_error() {
        let p = half_line(1.0);
        for cfg in [
            NewtonConfig { armijo_c: 1.0, ..Default::default() },
            NewtonConfig { backtrack_beta: 0.0, ..Default::default() },
            NewtonConfig { mu: 0.0, ..Default::default() },
        ] {
            assert!(solve(&p, &cfg, None).is_err());
        }
        assert!(solve(&p, &NewtonConfig::default(), Some((&v(&[1.0, 2.0]), &v(&[1.0])))).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: NewtonConfig = serde_json::from_str(r#"{"tol": 1e-6}"#).unwrap();
        assert_eq!(cfg.tol, 1e-6);
        assert_eq!(cfg.mu, 1e-6);
        assert_eq!(cfg.max_iter, 100_000);
    }
}

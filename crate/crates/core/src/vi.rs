//! Affine variational inequalities over polyhedra.
//!
//! An [`AviProblem`] asks for `u* ∈ C = {u : Du + d ≤ 0}` with
//! `⟨Mu* + q, u − u*⟩ ≥ 0` for every `u ∈ C`. Its KKT form is
//!
//! ```text
//! Mu + q + Dᵀλ = 0,   Du + d ≤ 0,   λ ≥ 0,   λᵀ(Du + d) = 0.
//! ```
//!
//! The metric projection onto `C` is computed exactly by a dual active-set
//! method. If that loses accuracy, it is recomputed as `AVI(C, I, −z)` with
//! the smoothed Newton method of [`crate::newton`].

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, max_abs, max_entry};
use crate::newton::{ArmijoParams, KktView, LinearSolve, SmoothedNewton};
use crate::projection::{project_active_set, ActiveSetFailure};
use crate::serde_util::{self, rows_of};

/// Membership tolerance for `Du + d ≤ 0`.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Smoothing used by the fallback projection solve. Much smaller values make the
/// dual recovery of the reduced Newton system lose all accuracy near the root.
pub const PROJECTION_MU: f64 = 1e-7;
/// Relative tolerance on the smoothed KKT residual of the inner projection solve.
pub const PROJECTION_TOL: f64 = 1e-12;
/// A stalled inner solve is still accepted below this relative residual.
pub const PROJECTION_ACCEPT_TOL: f64 = 1e-9;
pub const PROJECTION_MAX_ITER: usize = 100;
/// Multiplier magnitude beyond which a stalled projection is reported as an empty set.
pub const INFEASIBLE_MULTIPLIER: f64 = 1e8;

#[derive(Debug, Error)]
pub enum ViError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("constraint set appears to be empty")]
    InfeasibleSet,
    #[error("no active set yields a valid KKT point")]
    NoFeasibleCandidate,
    #[error("active-set enumeration supports at most {max} constraints, got {got}")]
    TooManyConstraints { got: usize, max: usize },
    #[error("operator is not strongly monotone (modulus {0:.3e})")]
    NotStronglyMonotone(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `{u : Du + d ≤ 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyhedralSet {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl PolyhedralSet {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self, ViError> {
        if matrix.nrows() != offset.len() {
            return Err(ViError::Dimension(format!(
                "constraint matrix has {} rows but offset has length {}",
                matrix.nrows(),
                offset.len()
            )));
        }
        Ok(Self { matrix, offset })
    }

    /// The whole space `R^n` (no rows).
    pub fn unconstrained(n: usize) -> Self {
        Self { matrix: DMatrix::zeros(0, n), offset: DVector::zeros(0) }
    }

    /// `lo ≤ u ≤ hi` componentwise; infinite bounds are skipped.
    pub fn boxed(lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let n = lo.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                rows.push((i, 1.0, -hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, lo[i]));
            }
        }
        let mut matrix = DMatrix::zeros(rows.len(), n);
        let mut offset = DVector::zeros(rows.len());
        for (r, &(i, sign, off)) in rows.iter().enumerate() {
            matrix[(r, i)] = sign;
            offset[r] = off;
        }
        Self { matrix, offset }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// Number of constraint rows `m`.
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// `Du + d`.
    pub fn evaluate(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.offset
    }

    /// Largest constraint value `max_i (Du + d)_i` (`-inf` without rows).
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        max_entry(&self.evaluate(u))
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        self.rows() == 0 || self.max_violation(u) <= FEASIBILITY_TOL
    }
}

/// `F(u) = Mu + q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineOperator {
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
}

impl AffineOperator {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self, ViError> {
        if !matrix.is_square() || matrix.nrows() != offset.len() {
            return Err(ViError::Dimension(format!(
                "operator matrix is {}x{} but offset has length {}",
                matrix.nrows(),
                matrix.ncols(),
                offset.len()
            )));
        }
        Ok(Self { matrix, offset })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.offset
    }

    pub fn monotonicity_modulus(&self) -> f64 {
        strong_monotonicity_modulus(&self.matrix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AviProblem {
    operator: AffineOperator,
    set: PolyhedralSet,
}

impl AviProblem {
    pub fn new(operator: AffineOperator, set: PolyhedralSet) -> Result<Self, ViError> {
        if operator.dim() != set.dim() {
            return Err(ViError::Dimension(format!(
                "operator dimension {} differs from constraint dimension {}",
                operator.dim(),
                set.dim()
            )));
        }
        Ok(Self { operator, set })
    }

    /// Convenience constructor from raw matrices.
    pub fn from_parts(
        m: DMatrix<f64>,
        q: DVector<f64>,
        d: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> Result<Self, ViError> {
        Self::new(AffineOperator::new(m, q)?, PolyhedralSet::new(d, offset)?)
    }

    pub fn operator(&self) -> &AffineOperator {
        &self.operator
    }

    pub fn set(&self) -> &PolyhedralSet {
        &self.set
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn rows(&self) -> usize {
        self.set.rows()
    }

    pub(crate) fn kkt(&self) -> KktView<'_> {
        KktView {
            m: &self.operator.matrix,
            q: &self.operator.offset,
            d: &self.set.matrix,
            offset: &self.set.offset,
        }
    }

    pub fn to_json(&self) -> Result<String, ViError> {
        Ok(serde_json::to_string_pretty(&AviDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, ViError> {
        serde_json::from_str::<AviDocument>(text)?.try_into()
    }
}

/// On-disk form: `{"M": rows, "q": [...], "D": rows, "d": [...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AviDocument {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    #[serde(rename = "D")]
    pub d_matrix: Vec<Vec<f64>>,
    #[serde(rename = "d")]
    pub d_offset: Vec<f64>,
}

impl From<&AviProblem> for AviDocument {
    fn from(p: &AviProblem) -> Self {
        Self {
            m: rows_of(p.operator.matrix()),
            q: p.operator.offset().iter().copied().collect(),
            d_matrix: rows_of(p.set.matrix()),
            d_offset: p.set.offset().iter().copied().collect(),
        }
    }
}

impl TryFrom<AviDocument> for AviProblem {
    type Error = ViError;

    fn try_from(doc: AviDocument) -> Result<Self, ViError> {
        let n = doc.q.len();
        let m = serde_util::matrix_from_rows(&doc.m, n).map_err(ViError::Dimension)?;
        let d = serde_util::matrix_from_rows(&doc.d_matrix, n).map_err(ViError::Dimension)?;
        if d.ncols() != n {
            return Err(ViError::Dimension(format!(
                "D has {} columns, expected {n}",
                d.ncols()
            )));
        }
        AviProblem::from_parts(m, DVector::from_vec(doc.q), d, DVector::from_vec(doc.d_offset))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    BudgetExhausted,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::BudgetExhausted => "budget_exhausted",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SolveStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "converged" => Ok(Self::Converged),
            "max_iterations" => Ok(Self::MaxIterations),
            "budget_exhausted" => Ok(Self::BudgetExhausted),
            "numerical_failure" => Ok(Self::NumericalFailure),
            other => Err(format!("unknown status '{other}'")),
        }
    }
}

/// Outcome of one solver run.
///
/// `residual_trace[k]` is the natural residual after iteration `k + 1`; the
/// residual of the starting point is kept separately in `initial_residual`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverReport {
    #[serde(with = "serde_util::vector")]
    pub solution: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub multipliers: DVector<f64>,
    pub initial_residual: f64,
    pub residual_trace: Vec<f64>,
    pub merit_trace: Vec<f64>,
    /// Accepted step lengths (Newton only).
    #[serde(default)]
    pub step_sizes: Vec<f64>,
    pub iterations: usize,
    #[serde(with = "duration_secs", rename = "elapsed_s")]
    pub elapsed: Duration,
    pub status: SolveStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl SolverReport {
    /// Natural residual of the returned solution.
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(self.initial_residual)
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(secs.max(0.0)))
    }
}

/// `λ_min((M + Mᵀ)/2)`; positive values certify strong monotonicity.
pub fn strong_monotonicity_modulus(m: &DMatrix<f64>) -> f64 {
    linalg::min_symmetric_eigenvalue(m)
}

/// Result of a metric projection, with the multipliers of the inner solve.
#[derive(Clone, Debug)]
pub struct Projection {
    pub point: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

/// `argmin_{y ∈ C} ‖z − y‖`.
pub fn project_polyhedron(set: &PolyhedralSet, z: &DVector<f64>) -> Result<DVector<f64>, ViError> {
    project_polyhedron_from(set, z, None).map(|p| p.point)
}

/// Projection with an optional starting guess `(y, ν)`, used only if the
/// smoothed fallback is needed.
pub fn project_polyhedron_from(
    set: &PolyhedralSet,
    z: &DVector<f64>,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<Projection, ViError> {
    let n = set.dim();
    let m = set.rows();
    if z.len() != n {
        return Err(ViError::Dimension(format!("point has length {}, set dimension {n}", z.len())));
    }
    if m == 0 || max_entry(&set.evaluate(z)) <= 0.0 {
        return Ok(Projection { point: z.clone(), multipliers: DVector::zeros(m), iterations: 0 });
    }

    match project_active_set(set.matrix(), set.offset(), z) {
        Ok(p) => {
            return Ok(Projection { point: p.point, multipliers: p.multipliers, iterations: p.iterations });
        }
        Err(ActiveSetFailure::Infeasible) => return Err(ViError::InfeasibleSet),
        Err(ActiveSetFailure::Numerical(msg)) => log::debug!("{msg}; retrying with smoothed Newton"),
    }
    project_smoothed(set, z, start)
}

/// Projection as `AVI(C, I, −z)` solved by smoothed Newton.
pub fn project_smoothed(
    set: &PolyhedralSet,
    z: &DVector<f64>,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<Projection, ViError> {
    let n = set.dim();
    let m = set.rows();
    if z.len() != n {
        return Err(ViError::Dimension(format!("point has length {}, set dimension {n}", z.len())));
    }
    if m == 0 || max_entry(&set.evaluate(z)) <= 0.0 {
        return Ok(Projection { point: z.clone(), multipliers: DVector::zeros(m), iterations: 0 });
    }
    let identity = DMatrix::identity(n, n);
    let neg_z = -z;
    let view = KktView { m: &identity, q: &neg_z, d: set.matrix(), offset: set.offset() };
    let (y0, nu0) = match start {
        Some((y, nu)) if y.len() == n && nu.len() == m => (y.clone(), nu.map(|v| v.max(0.0))),
        _ => (z.clone(), DVector::from_element(m, 1.0)),
    };
    let mut newton = SmoothedNewton::from_view(
        view,
        PROJECTION_MU,
        LinearSolve::Reduced,
        ArmijoParams::default(),
        y0,
        nu0,
    )
    .map_err(|e| ViError::NumericalFailure(format!("projection: {e}")))?;

    let scale = 1.0 + max_abs(z);
    let target = PROJECTION_TOL * scale;
    let mut merit_history: Vec<f64> = Vec::new();
    for it in 0..=PROJECTION_MAX_ITER {
        if newton.residual_inf_norm() <= target {
            return Ok(Projection {
                point: newton.u().clone(),
                multipliers: newton.lambda().clone(),
                iterations: it,
            });
        }
        if it == PROJECTION_MAX_ITER {
            break;
        }
        merit_history.push(newton.merit());
        if stagnating_with_divergent_multipliers(&merit_history, newton.lambda()) {
            return Err(ViError::InfeasibleSet);
        }
        if let Err(e) = newton.step() {
            if newton.residual_inf_norm() <= PROJECTION_ACCEPT_TOL * scale {
                return Ok(Projection {
                    point: newton.u().clone(),
                    multipliers: newton.lambda().clone(),
                    iterations: it,
                });
            }
            if max_abs(newton.lambda()) > INFEASIBLE_MULTIPLIER {
                return Err(ViError::InfeasibleSet);
            }
            return Err(ViError::NumericalFailure(format!("projection: {e}")));
        }
    }
    if newton.residual_inf_norm() <= PROJECTION_ACCEPT_TOL * scale {
        return Ok(Projection {
            point: newton.u().clone(),
            multipliers: newton.lambda().clone(),
            iterations: PROJECTION_MAX_ITER,
        });
    }
    if max_abs(newton.lambda()) > INFEASIBLE_MULTIPLIER {
        return Err(ViError::InfeasibleSet);
    }
    Err(ViError::NumericalFailure(format!(
        "projection did not converge in {PROJECTION_MAX_ITER} iterations (residual {:.3e})",
        newton.residual_inf_norm()
    )))
}

fn stagnating_with_divergent_multipliers(merits: &[f64], lambda: &DVector<f64>) -> bool {
    const WINDOW: usize = 5;
    if max_abs(lambda) <= INFEASIBLE_MULTIPLIER || merits.len() <= WINDOW {
        return false;
    }
    let now = merits[merits.len() - 1];
    let before = merits[merits.len() - 1 - WINDOW];
    now > 0.99 * before
}

/// `‖u − π_C(u − Mu − q)‖`.
pub fn natural_residual(problem: &AviProblem, u: &DVector<f64>) -> Result<f64, ViError> {
    natural_residual_from(problem, u, None).map(|(r, _)| r)
}

/// Natural residual with a starting guess for the inner projection. At a KKT
/// pair `(u, λ)` the projection of `u − F(u)` is `u` with multipliers `λ`, so
/// the current primal-dual iterate is a good start.
pub fn natural_residual_from(
    problem: &AviProblem,
    u: &DVector<f64>,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<(f64, Projection), ViError> {
    if u.len() != problem.dim() {
        return Err(ViError::Dimension(format!(
            "point has length {}, problem dimension {}",
            u.len(),
            problem.dim()
        )));
    }
    let z = u - problem.operator.apply(u);
    let proj = project_polyhedron_from(&problem.set, &z, start)?;
    Ok(((u - &proj.point).norm(), proj))
}

/// Largest constraint count [`active_set_oracle`] accepts.
pub const ORACLE_MAX_ROWS: usize = 20;

/// Exhaustive active-set solve of the KKT system. Exponential in `m`; used as
/// ground truth on small instances.
pub fn active_set_oracle(problem: &AviProblem) -> Result<(DVector<f64>, DVector<f64>), ViError> {
    let n = problem.dim();
    let m = problem.rows();
    if m > ORACLE_MAX_ROWS {
        return Err(ViError::TooManyConstraints { got: m, max: ORACLE_MAX_ROWS });
    }
    let mm = problem.operator.matrix();
    let q = problem.operator.offset();
    let d = problem.set.matrix();
    let off = problem.set.offset();
    let scale = 1.0 + max_abs(q) + max_abs(off) + mm.amax() + d.amax();
    let tol = 1e-9 * scale;

    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(mm);
        rhs.rows_mut(0, n).copy_from(&(-q));
        for (j, &row) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(c, n + j)] = d[(row, c)];
                kkt[(n + j, c)] = d[(row, c)];
            }
            rhs[n + j] = -off[row];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) || (&kkt * &sol - &rhs).amax() > tol {
            continue;
        }
        let u = sol.rows(0, n).into_owned();
        let mut lambda = DVector::zeros(m);
        for (j, &row) in active.iter().enumerate() {
            lambda[row] = sol[n + j];
        }
        let dual_ok = lambda.iter().all(|&l| l >= -tol);
        let primal_ok = m == 0 || max_entry(&problem.set.evaluate(&u)) <= tol;
        if dual_ok && primal_ok {
            return Ok((u, lambda.map(|l| l.max(0.0))));
        }
    }
    Err(ViError::NoFeasibleCandidate)
}

//! First-order reference solvers: projected forward–backward and
//! Douglas–Rachford splitting of `F + N_C`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::spectral_norm;
use crate::newton::iteration_cap;
use crate::vi::{
    natural_residual_from, project_polyhedron_from, strong_monotonicity_modulus, AviProblem,
    Projection, SolveStatus, SolverReport, ViError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirstOrderConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub iteration_budget: Option<usize>,
    /// Forward–backward step; `μ_m / ‖M‖²` when unset.
    pub fb_step: Option<f64>,
    pub dr_gamma: f64,
}

impl Default for FirstOrderConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 100_000, iteration_budget: None, fb_step: None, dr_gamma: 1.0 }
    }
}

impl FirstOrderConfig {
    pub fn validate(&self) -> Result<(), ViError> {
        if !(self.tol > 0.0) {
            return Err(ViError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if let Some(s) = self.fb_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ViError::Config(format!("fb_step must be positive, got {s}")));
            }
        }
        if !(self.dr_gamma > 0.0 && self.dr_gamma.is_finite()) {
            return Err(ViError::Config(format!("dr_gamma must be positive, got {}", self.dr_gamma)));
        }
        Ok(())
    }
}

/// `μ_m / L²` with `L = ‖M‖₂`.
pub fn default_fb_step(m: &DMatrix<f64>) -> Result<f64, ViError> {
    let mu = strong_monotonicity_modulus(m);
    if !(mu > 0.0) {
        return Err(ViError::NotStronglyMonotone(mu));
    }
    let l = spectral_norm(m);
    Ok(mu / (l * l))
}

/// Projection helper that warm-starts each call from the previous result.
struct Projector<'a> {
    problem: &'a AviProblem,
    last: Option<Projection>,
    residual_last: Option<Projection>,
}

impl<'a> Projector<'a> {
    fn new(problem: &'a AviProblem) -> Self {
        Self { problem, last: None, residual_last: None }
    }

    fn project(&mut self, z: &DVector<f64>) -> Result<DVector<f64>, ViError> {
        let start = self.last.as_ref().map(|p| (&p.point, &p.multipliers));
        let p = project_polyhedron_from(self.problem.set(), z, start)?;
        let out = p.point.clone();
        self.last = Some(p);
        Ok(out)
    }

    fn residual(&mut self, u: &DVector<f64>) -> Result<f64, ViError> {
        let start = self.residual_last.as_ref().map(|p| (&p.point, &p.multipliers));
        let (r, p) = natural_residual_from(self.problem, u, start)?;
        self.residual_last = Some(p);
        Ok(r)
    }
}

fn check_primal(problem: &AviProblem, warm: Option<&DVector<f64>>) -> Result<(), ViError> {
    match warm {
        Some(u) if u.len() != problem.dim() => Err(ViError::Dimension(format!(
            "warm start has length {}, problem dimension {}",
            u.len(),
            problem.dim()
        ))),
        _ => Ok(()),
    }
}

fn empty_report(problem: &AviProblem, u0: DVector<f64>, status: SolveStatus) -> SolverReport {
    SolverReport {
        solution: u0,
        multipliers: DVector::zeros(problem.rows()),
        initial_residual: f64::NAN,
        residual_trace: Vec::new(),
        merit_trace: Vec::new(),
        step_sizes: Vec::new(),
        iterations: 0,
        elapsed: Default::default(),
        status,
        message: None,
    }
}

/// Shared outer loop. `advance` performs one update and returns the new
/// primal iterate.
fn run_first_order(
    problem: &AviProblem,
    config: &FirstOrderConfig,
    u0: DVector<f64>,
    start: Instant,
    mut advance: impl FnMut(&mut Projector) -> Result<DVector<f64>, ViError>,
) -> SolverReport {
    let (cap, cap_status) = iteration_cap(config.max_iter, config.iteration_budget);
    let mut proj = Projector::new(problem);
    let mut report = empty_report(problem, u0, cap_status);
    let fail = |mut report: SolverReport, msg: String| {
        report.status = SolveStatus::NumericalFailure;
        report.message = Some(msg);
        report.elapsed = start.elapsed();
        report
    };

    match proj.residual(&report.solution) {
        Ok(r) => report.initial_residual = r,
        Err(e) => return fail(report, format!("residual evaluation failed: {e}")),
    }
    if report.initial_residual <= config.tol {
        report.status = SolveStatus::Converged;
        report.elapsed = start.elapsed();
        return report;
    }
    while report.iterations < cap {
        let u = match advance(&mut proj) {
            Ok(u) => u,
            Err(e) => {
                let msg = format!("iteration {}: {e}", report.iterations + 1);
                return fail(report, msg);
            }
        };
        report.solution = u;
        report.iterations += 1;
        let r = match proj.residual(&report.solution) {
            Ok(r) => r,
            Err(e) => return fail(report, format!("residual evaluation failed: {e}")),
        };
        report.residual_trace.push(r);
        report.merit_trace.push(0.5 * r * r);
        if r <= config.tol {
            report.status = SolveStatus::Converged;
            break;
        }
    }
    report.elapsed = start.elapsed();
    report
}

/// `u⁺ = π_C(u − γ(Mu + q))`. Multipliers are reported as zeros.
pub fn fb_solve(
    problem: &AviProblem,
    config: &FirstOrderConfig,
    warm: Option<&DVector<f64>>,
) -> Result<SolverReport, ViError> {
    config.validate()?;
    check_primal(problem, warm)?;
    let start = Instant::now();
    let gamma = match config.fb_step {
        Some(s) => s,
        None => default_fb_step(problem.operator().matrix())?,
    };
    let u0 = warm.cloned().unwrap_or_else(|| DVector::zeros(problem.dim()));
    let mut u = u0.clone();
    Ok(run_first_order(problem, config, u0, start, |proj| {
        let z = &u - problem.operator().apply(&u) * gamma;
        u = proj.project(&z)?;
        Ok(u.clone())
    }))
}

/// Resolvent `J(z) = (I + γM)⁻¹(z − γq)` with the factorization of
/// `I + γM` kept, so it can be reused while `q` changes.
pub struct AffineResolvent {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    gamma: f64,
}

impl AffineResolvent {
    pub fn new(m: &DMatrix<f64>, gamma: f64) -> Result<Self, ViError> {
        let n = m.nrows();
        let lu = (DMatrix::identity(n, n) + m * gamma).lu();
        if !lu.is_invertible() {
            return Err(ViError::NumericalFailure("I + γM is singular".into()));
        }
        Ok(Self { lu, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn apply(&self, z: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>, ViError> {
        self.lu
            .solve(&(z - q * self.gamma))
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| ViError::NumericalFailure("resolvent solve failed".into()))
    }
}

/// Douglas–Rachford on `z`: `z⁺ = z + π_C(2J(z) − z) − J(z)`, primal `u = J(z)`.
/// A warm start `u₀` is mapped to `z₀ = u₀ + γF(u₀)` so that `J(z₀) = u₀`.
pub fn dr_solve(
    problem: &AviProblem,
    config: &FirstOrderConfig,
    warm: Option<&DVector<f64>>,
) -> Result<SolverReport, ViError> {
    config.validate()?;
    check_primal(problem, warm)?;
    let start = Instant::now();
    match AffineResolvent::new(problem.operator().matrix(), config.dr_gamma) {
        Ok(r) => dr_iterate(problem, config, warm, &r, start),
        Err(e) => {
            let u0 = warm.cloned().unwrap_or_else(|| DVector::zeros(problem.dim()));
            let mut rep = empty_report(problem, u0, SolveStatus::NumericalFailure);
            rep.message = Some(e.to_string());
            rep.elapsed = start.elapsed();
            Ok(rep)
        }
    }
}

/// [`dr_solve`] with a factorization computed beforehand; `config.dr_gamma`
/// is ignored in favour of the resolvent's step.
pub fn dr_solve_with(
    problem: &AviProblem,
    config: &FirstOrderConfig,
    warm: Option<&DVector<f64>>,
    resolvent: &AffineResolvent,
) -> Result<SolverReport, ViError> {
    config.validate()?;
    check_primal(problem, warm)?;
    dr_iterate(problem, config, warm, resolvent, Instant::now())
}

fn dr_iterate(
    problem: &AviProblem,
    config: &FirstOrderConfig,
    warm: Option<&DVector<f64>>,
    resolvent: &AffineResolvent,
    start: Instant,
) -> Result<SolverReport, ViError> {
    let op = problem.operator();
    let q = op.offset();
    let u0 = warm.cloned().unwrap_or_else(|| DVector::zeros(problem.dim()));
    let mut z = &u0 + op.apply(&u0) * resolvent.gamma();
    Ok(run_first_order(problem, config, u0, start, |proj| {
        let j = resolvent.apply(&z, q)?;
        let reflected = &j * 2.0 - &z;
        let p = proj.project(&reflected)?;
        z += p - &j;
        resolvent.apply(&z, q)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vi::{active_set_oracle, PolyhedralSet};

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
    fn fb_single_step_on_half_line() {
        let cfg = FirstOrderConfig { fb_step: Some(1.0), ..Default::default() };
        let rep = fb_solve(&half_line(1.0), &cfg, Some(&v(&[5.0]))).unwrap();
        assert!(rep.converged());
        assert_eq!(rep.iterations, 1);
        assert!((rep.solution[0] - 1.0).abs() < 1e-12);
        assert_eq!(rep.multipliers, v(&[0.0]));
    }

    #[test]
    fn fb_projection_problem_in_one_step() {
        let set = PolyhedralSet::boxed(&v(&[-1.0, -1.0]), &v(&[1.0, 1.0]));
        let z = v(&[3.0, -0.2]);
        let op = crate::vi::AffineOperator::new(DMatrix::identity(2, 2), -&z).unwrap();
        let p = AviProblem::new(op, set).unwrap();
        let cfg = FirstOrderConfig { fb_step: Some(1.0), ..Default::default() };
        let rep = fb_solve(&p, &cfg, Some(&v(&[0.4, 0.9]))).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((rep.solution - v(&[1.0, -0.2])).amax() < 1e-9);
    }

    #[test]
    fn default_step_requires_strong_monotonicity() {
        assert!(default_fb_step(&DMatrix::zeros(2, 2)).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        assert!((default_fb_step(&m).unwrap() - 2.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn dr_matches_hand_iteration() {
        // C = {u ≥ 1}, M = 1, q = 0, γ = 1: J(z) = z/2, π(z) = max(z, 1).
        let mut z = 0.0f64;
        let mut expected = Vec::new();
        for _ in 0..5 {
            let j = z / 2.0;
            z = z + (2.0 * j - z).max(1.0) - j;
            expected.push(z / 2.0);
        }
        assert_eq!(expected, vec![0.5, 0.75, 0.875, 0.9375, 0.96875]);

        let cfg = FirstOrderConfig { iteration_budget: Some(5), ..Default::default() };
        let rep = dr_solve(&half_line(1.0), &cfg, None).unwrap();
        assert_eq!(rep.status, SolveStatus::BudgetExhausted);
        assert!((rep.solution[0] - 0.96875).abs() < 1e-12);
        // natural residual of u < 1 is 1 − u
        for (r, u) in rep.residual_trace.iter().zip(&expected) {
            assert!((r - (1.0 - u)).abs() < 1e-10);
        }
    }

    #[test]
    fn dr_fixed_point_is_stationary() {
        let p = half_line(1.0);
        let rep = dr_solve(&p, &FirstOrderConfig::default(), Some(&v(&[1.0]))).unwrap();
        assert!(rep.converged());
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn resolvent_identity() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 3.0, 0.5, 0.0, -0.5, 1.0]);
        let q = v(&[1.0, -2.0, 0.3]);
        let r = AffineResolvent::new(&m, 0.7).unwrap();
        let z = v(&[0.1, 5.0, -3.0]);
        let x = r.apply(&z, &q).unwrap();
        let lhs = (DMatrix::identity(3, 3) + &m * 0.7) * &x;
        assert!((lhs - (&z - &q * 0.7)).amax() < 1e-12);
    }

    #[test]
    fn both_agree_with_oracle() {
        let p = AviProblem::from_parts(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -0.5, 1.0]),
            v(&[-3.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, -1.0]),
            v(&[-1.0, -0.5]),
        )
        .unwrap();
        let (u, _) = active_set_oracle(&p).unwrap();
        for rep in [
            fb_solve(&p, &FirstOrderConfig::default(), None).unwrap(),
            dr_solve(&p, &FirstOrderConfig::default(), None).unwrap(),
        ] {
            assert!(rep.converged(), "{:?}", rep.status);
            assert!((&rep.solution - &u).norm() < 1e-3);
        }
    }
}

//! Solver selection by name and per-problem-family preparation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baseline::{default_fb_step, dr_solve_with, fb_solve, AffineResolvent, FirstOrderConfig};
use crate::newton::{self, NewtonConfig};
use crate::vi::{AviProblem, SolverReport, ViError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "newton")]
    Newton,
    #[serde(rename = "fast-newton")]
    FastNewton,
    #[serde(rename = "fb")]
    ForwardBackward,
    #[serde(rename = "dr")]
    DouglasRachford,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Newton,
        SolverKind::FastNewton,
        SolverKind::ForwardBackward,
        SolverKind::DouglasRachford,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Newton => "newton",
            SolverKind::FastNewton => "fast-newton",
            SolverKind::ForwardBackward => "fb",
            SolverKind::DouglasRachford => "dr",
        }
    }

    pub fn is_newton(self) -> bool {
        matches!(self, SolverKind::Newton | SolverKind::FastNewton)
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown solver '{s}' (expected newton, fast-newton, fb or dr)"))
    }
}

/// Settings for every solver family; each solver reads its own part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub newton: NewtonConfig,
    pub first_order: FirstOrderConfig,
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.newton.tol = tol;
        self.first_order.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.newton.max_iter = max_iter;
        self.first_order.max_iter = max_iter;
        self
    }

    pub fn with_budget(mut self, budget: Option<usize>) -> Self {
        self.newton.iteration_budget = budget;
        self.first_order.iteration_budget = budget;
        self
    }

    pub fn budget(&self, kind: SolverKind) -> Option<usize> {
        if kind.is_newton() {
            self.newton.iteration_budget
        } else {
            self.first_order.iteration_budget
        }
    }

    pub fn tol(&self, kind: SolverKind) -> f64 {
        if kind.is_newton() {
            self.newton.tol
        } else {
            self.first_order.tol
        }
    }
}

/// One-shot solve by kind.
pub fn solve(
    kind: SolverKind,
    problem: &AviProblem,
    config: &SolverConfig,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<SolverReport, ViError> {
    PreparedSolver::new(kind, config.clone(), problem.operator().matrix())?.solve(problem, warm)
}

/// A solver bound to a fixed operator matrix `M`. Work that depends only on
/// `M` (the forward–backward step, the Douglas–Rachford factorization) is done
/// once and reused for every `(q, d)`.
pub struct PreparedSolver {
    kind: SolverKind,
    config: SolverConfig,
    resolvent: Option<AffineResolvent>,
}

impl PreparedSolver {
    pub fn new(kind: SolverKind, mut config: SolverConfig, m: &DMatrix<f64>) -> Result<Self, ViError> {
        config.newton.use_reduced_system = kind == SolverKind::FastNewton;
        config.newton.validate()?;
        config.first_order.validate()?;
        let mut resolvent = None;
        match kind {
            SolverKind::ForwardBackward if config.first_order.fb_step.is_none() => {
                config.first_order.fb_step = Some(default_fb_step(m)?);
            }
            SolverKind::DouglasRachford => {
                resolvent = Some(AffineResolvent::new(m, config.first_order.dr_gamma)?);
            }
            _ => {}
        }
        Ok(Self { kind, config, resolvent })
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// First-order solvers use only the primal part of `warm`.
    pub fn solve(
        &self,
        problem: &AviProblem,
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<SolverReport, ViError> {
        match self.kind {
            SolverKind::Newton | SolverKind::FastNewton => newton::solve(problem, &self.config.newton, warm),
            SolverKind::ForwardBackward => fb_solve(problem, &self.config.first_order, warm.map(|w| w.0)),
            SolverKind::DouglasRachford => {
                let r = self.resolvent.as_ref().expect("resolvent prepared for dr");
                dr_solve_with(problem, &self.config.first_order, warm.map(|w| w.0), r)
            }
        }
    }
}

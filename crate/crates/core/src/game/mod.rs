//! Constrained linear-quadratic dynamic games and their condensation into an AVI.
//!
//! Dynamics `x⁺ = Ax + Σᵢ Bᵢuᵢ`, agent costs `Σ ½xᵀQᵢx + ½uᵢᵀRᵢuᵢ` and two
//! families of affine constraint rows:
//!
//! * stage rows `Eₓx[t] + Σⱼ Eⱼuⱼ[t] + e ≤ 0` for `t = 0, …, T−1`;
//! * state rows `Dₓx[t] + dₓ ≤ 0` for `t = 1, …, T`.
//!
//! Pure input rows are stage rows with `Eₓ = 0`; after pre-stabilization they
//! pick up a state term because they constrain the applied input `Kx + u`.

mod riccati;
mod stacking;

pub use riccati::{
    build_augmented_system, solve_augmented_riccati, solve_coupled_riccati, solve_stein,
    terminal_cost_matrix, RiccatiOptions, RiccatiSolution,
};
pub use stacking::{assemble_avi, build_prediction_matrices, stack_constraints, StackedConstraints, StackedGame};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::min_symmetric_eigenvalue;
use crate::serde_util;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game: {0}")]
    Invalid(String),
    #[error("no stabilizing solution: {0}")]
    NoStabilizingSolution(String),
    #[error(transparent)]
    Vi(#[from] crate::vi::ViError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowClass {
    Distance,
    Velocity,
    Input,
    Other,
}

impl RowClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RowClass::Distance => "distance",
            RowClass::Velocity => "velocity",
            RowClass::Input => "input",
            RowClass::Other => "other",
        }
    }
}

/// What a constraint row protects, used for violation reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub class: RowClass,
    pub agent: usize,
}

impl RowTag {
    pub fn new(class: RowClass, agent: usize) -> Self {
        Self { class, agent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    #[serde(with = "serde_util::matrix")]
    pub stage_state: DMatrix<f64>,
    #[serde(with = "serde_util::matrices")]
    pub stage_inputs: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::vector")]
    pub stage_offset: DVector<f64>,
    pub stage_tags: Vec<RowTag>,
    #[serde(with = "serde_util::matrix")]
    pub state_matrix: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub state_offset: DVector<f64>,
    pub state_tags: Vec<RowTag>,
}

impl ConstraintSpec {
    pub fn empty(n: usize, input_dims: &[usize]) -> Self {
        Self {
            stage_state: DMatrix::zeros(0, n),
            stage_inputs: input_dims.iter().map(|&m| DMatrix::zeros(0, m)).collect(),
            stage_offset: DVector::zeros(0),
            stage_tags: Vec::new(),
            state_matrix: DMatrix::zeros(0, n),
            state_offset: DVector::zeros(0),
            state_tags: Vec::new(),
        }
    }

    pub fn stage_rows(&self) -> usize {
        self.stage_offset.len()
    }

    pub fn state_rows(&self) -> usize {
        self.state_offset.len()
    }

    /// Appends `state·x[t] + Σⱼ inputs[j]·uⱼ[t] + offset ≤ 0`.
    pub fn push_stage_row(&mut self, state: &[f64], inputs: &[Vec<f64>], offset: f64, tag: RowTag) {
        let r = self.stage_rows();
        self.stage_state = append_row(&self.stage_state, state);
        for (j, coeffs) in inputs.iter().enumerate() {
            self.stage_inputs[j] = append_row(&self.stage_inputs[j], coeffs);
        }
        self.stage_offset = self.stage_offset.clone().insert_row(r, offset);
        self.stage_tags.push(tag);
    }

    /// Appends `row·x[t] + offset ≤ 0`.
    pub fn push_state_row(&mut self, row: &[f64], offset: f64, tag: RowTag) {
        let r = self.state_rows();
        self.state_matrix = append_row(&self.state_matrix, row);
        self.state_offset = self.state_offset.clone().insert_row(r, offset);
        self.state_tags.push(tag);
    }

    /// `lo ≤ (uᵢ)_k ≤ hi` on every input component of agent `i`.
    pub fn push_input_bounds(&mut self, agent: usize, lo: f64, hi: f64) {
        let n = self.stage_state.ncols();
        let dims: Vec<usize> = self.stage_inputs.iter().map(|e| e.ncols()).collect();
        for k in 0..dims[agent] {
            for (sign, off) in [(1.0, -hi), (-1.0, lo)] {
                let inputs: Vec<Vec<f64>> = dims
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| {
                        let mut v = vec![0.0; m];
                        if j == agent {
                            v[k] = sign;
                        }
                        v
                    })
                    .collect();
                self.push_stage_row(&vec![0.0; n], &inputs, off, RowTag::new(RowClass::Input, agent));
            }
        }
    }

    /// Value of every stage row at `(x, u₁, …, u_N)`.
    pub fn stage_values(&self, x: &DVector<f64>, inputs: &[DVector<f64>]) -> DVector<f64> {
        let mut v = &self.stage_state * x + &self.stage_offset;
        for (e, u) in self.stage_inputs.iter().zip(inputs) {
            v += e * u;
        }
        v
    }

    pub fn state_values(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.state_matrix * x + &self.state_offset
    }

    /// Fixes the shape of row-less matrices (JSON has no column count for them).
    fn normalize(&mut self, n: usize, input_dims: &[usize]) {
        if self.stage_state.nrows() == 0 {
            self.stage_state = DMatrix::zeros(0, n);
        }
        if self.state_matrix.nrows() == 0 {
            self.state_matrix = DMatrix::zeros(0, n);
        }
        if self.stage_inputs.is_empty() {
            self.stage_inputs = input_dims.iter().map(|_| DMatrix::zeros(0, 0)).collect();
        }
        for (e, &m) in self.stage_inputs.iter_mut().zip(input_dims) {
            if e.nrows() == 0 {
                *e = DMatrix::zeros(0, m);
            }
        }
    }

    fn validate(&self, n: usize, input_dims: &[usize]) -> Result<(), GameError> {
        let rs = self.stage_rows();
        let bad = |what: &str| Err(GameError::Invalid(format!("constraint spec: {what}")));
        if self.stage_state.shape() != (rs, n) {
            return bad("stage_state has the wrong shape");
        }
        if self.stage_inputs.len() != input_dims.len() {
            return bad("one stage input matrix per agent is required");
        }
        for (e, &m) in self.stage_inputs.iter().zip(input_dims) {
            if e.shape() != (rs, m) {
                return bad("stage input matrix has the wrong shape");
            }
        }
        if self.stage_tags.len() != rs {
            return bad("stage_tags length differs from the stage row count");
        }
        let rx = self.state_rows();
        if self.state_matrix.shape() != (rx, n) || self.state_tags.len() != rx {
            return bad("state rows are inconsistent");
        }
        Ok(())
    }
}

fn append_row(m: &DMatrix<f64>, row: &[f64]) -> DMatrix<f64> {
    let cols = if m.nrows() == 0 { row.len() } else { m.ncols() };
    assert_eq!(row.len(), cols, "row length mismatch");
    let mut out = DMatrix::zeros(m.nrows() + 1, cols);
    if m.nrows() > 0 {
        out.rows_mut(0, m.nrows()).copy_from(m);
    }
    for (c, v) in row.iter().enumerate() {
        out[(m.nrows(), c)] = *v;
    }
    out
}

/// Feedback wrapped around the plant: applied inputs are `Kᵢx + uᵢ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prestabilizer {
    #[serde(with = "serde_util::matrices")]
    pub gains: Vec<DMatrix<f64>>,
    /// State matrix of the plant without the feedback.
    #[serde(with = "serde_util::matrix")]
    pub open_loop_a: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqGame {
    #[serde(with = "serde_util::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_util::matrices")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrices")]
    pub q: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrices")]
    pub r: Vec<DMatrix<f64>>,
    pub constraints: ConstraintSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prestabilizer: Option<Prestabilizer>,
}

impl LqGame {
    pub fn new(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        constraints: ConstraintSpec,
    ) -> Result<Self, GameError> {
        let mut g = Self { a, b, q, r, constraints, prestabilizer: None };
        g.validate()?;
        Ok(g)
    }

    /// A game without constraint rows.
    pub fn unconstrained(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
    ) -> Result<Self, GameError> {
        let dims: Vec<usize> = b.iter().map(|bi| bi.ncols()).collect();
        let spec = ConstraintSpec::empty(a.nrows(), &dims);
        Self::new(a, b, q, r, spec)
    }

    pub fn from_json(text: &str) -> Result<Self, GameError> {
        let mut g: LqGame = serde_json::from_str(text).map_err(|e| GameError::Invalid(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn agents(&self) -> usize {
        self.b.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.b.iter().map(|b| b.ncols()).collect()
    }

    /// Plant matrix without any pre-stabilizing feedback.
    pub fn physical_a(&self) -> &DMatrix<f64> {
        self.prestabilizer.as_ref().map_or(&self.a, |p| &p.open_loop_a)
    }

    /// Pre-stabilizing gains, zero when there is no pre-stabilizer.
    pub fn feedback_gains(&self) -> Vec<DMatrix<f64>> {
        match &self.prestabilizer {
            Some(p) => p.gains.clone(),
            None => self.b.iter().map(|b| DMatrix::zeros(b.ncols(), self.state_dim())).collect(),
        }
    }

    /// `Kᵢx + uᵢ` for every agent.
    pub fn applied_inputs(&self, x: &DVector<f64>, game_inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        match &self.prestabilizer {
            Some(p) => p.gains.iter().zip(game_inputs).map(|(k, u)| k * x + u).collect(),
            None => game_inputs.to_vec(),
        }
    }

    /// One step of the physical plant under applied inputs.
    pub fn step_physical(&self, x: &DVector<f64>, applied: &[DVector<f64>]) -> DVector<f64> {
        let mut next = self.physical_a() * x;
        for (b, u) in self.b.iter().zip(applied) {
            next += b * u;
        }
        next
    }

    /// One step of the game dynamics `Ax + ΣBᵢuᵢ`.
    pub fn step(&self, x: &DVector<f64>, inputs: &[DVector<f64>]) -> DVector<f64> {
        let mut next = &self.a * x;
        for (b, u) in self.b.iter().zip(inputs) {
            next += b * u;
        }
        next
    }

    pub fn validate(&mut self) -> Result<(), GameError> {
        let n = self.state_dim();
        let bad = |what: String| Err(GameError::Invalid(what));
        if !self.a.is_square() || n == 0 {
            return bad(format!("A must be square and nonempty, got {:?}", self.a.shape()));
        }
        let agents = self.agents();
        if agents == 0 {
            return bad("at least one agent is required".into());
        }
        if self.q.len() != agents || self.r.len() != agents {
            return bad(format!("{agents} input matrices but {} Q and {} R", self.q.len(), self.r.len()));
        }
        for i in 0..agents {
            let m = self.b[i].ncols();
            if self.b[i].nrows() != n {
                return bad(format!("B[{i}] has {} rows, expected {n}", self.b[i].nrows()));
            }
            if self.q[i].shape() != (n, n) {
                return bad(format!("Q[{i}] must be {n}x{n}"));
            }
            if self.r[i].shape() != (m, m) {
                return bad(format!("R[{i}] must be {m}x{m}"));
            }
            let q_min = min_symmetric_eigenvalue(&self.q[i]);
            if q_min < -1e-10 {
                return bad(format!("Q[{i}] is not positive semidefinite (λ_min = {q_min:.3e})"));
            }
            let r_min = min_symmetric_eigenvalue(&self.r[i]);
            if !(r_min > 0.0) {
                return bad(format!("R[{i}] is not positive definite (λ_min = {r_min:.3e})"));
            }
        }
        let dims = self.input_dims();
        self.constraints.normalize(n, &dims);
        self.constraints.validate(n, &dims)?;
        if let Some(p) = &self.prestabilizer {
            if p.open_loop_a.shape() != (n, n) || p.gains.len() != agents {
                return bad("pre-stabilizer is inconsistent with the game".into());
            }
            for (k, &m) in p.gains.iter().zip(&dims) {
                if k.shape() != (m, n) {
                    return bad("pre-stabilizing gain has the wrong shape".into());
                }
            }
        }
        Ok(())
    }
}

/// Wraps the game in the feedback `uᵢ ← Kᵢx + uᵢ`: `A ← A + ΣBᵢKᵢ`, stage
/// rows are rewritten to keep constraining the applied input, and the gains
/// are recorded (added to any existing ones).
pub fn prestabilize(game: &LqGame, gains: &[DMatrix<f64>]) -> Result<LqGame, GameError> {
    let n = game.state_dim();
    if gains.len() != game.agents() {
        return Err(GameError::Invalid(format!("{} gains for {} agents", gains.len(), game.agents())));
    }
    for (k, b) in gains.iter().zip(&game.b) {
        if k.shape() != (b.ncols(), n) {
            return Err(GameError::Invalid(format!("gain has shape {:?}, expected {:?}", k.shape(), (b.ncols(), n))));
        }
    }
    let mut out = game.clone();
    for (k, (b, e)) in gains.iter().zip(game.b.iter().zip(&game.constraints.stage_inputs)) {
        out.a += b * k;
        out.constraints.stage_state += e * k;
    }
    let total: Vec<DMatrix<f64>> = match &game.prestabilizer {
        Some(p) => p.gains.iter().zip(gains).map(|(a, b)| a + b).collect(),
        None => gains.to_vec(),
    };
    out.prestabilizer = Some(Prestabilizer { gains: total, open_loop_a: game.physical_a().clone() });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_radius;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn zero_gain_leaves_dynamics() {
        let g = LqGame::unconstrained(scalar(2.0), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)]).unwrap();
        let p = prestabilize(&g, &[scalar(0.0)]).unwrap();
        assert_eq!(p.a, g.a);
        assert_eq!(p.b, g.b);
        assert_eq!(p.constraints, g.constraints);
    }

    #[test]
    fn scalar_prestabilization() {
        let g = LqGame::unconstrained(scalar(2.0), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)]).unwrap();
        let p = prestabilize(&g, &[scalar(-1.5)]).unwrap();
        assert!((p.a[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(spectral_radius(&p.a) < 1.0);
        assert_eq!(p.physical_a(), &scalar(2.0));
    }

    #[test]
    fn input_bounds_follow_applied_input() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -1.0, 1.0);
        let g = LqGame::new(scalar(2.0), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)], spec).unwrap();
        let p = prestabilize(&g, &[scalar(-1.5)]).unwrap();
        // applied = −1.5x + u ≤ 1
        let x = DVector::from_element(1, 0.4);
        let u = DVector::from_element(1, 0.2);
        let vals = p.constraints.stage_values(&x, std::slice::from_ref(&u));
        let applied = p.applied_inputs(&x, &[u])[0][0];
        assert!((vals[0] - (applied - 1.0)).abs() < 1e-15);
        assert!((vals[1] - (-applied - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_weights() {
        let bad_r = LqGame::unconstrained(scalar(1.0), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(0.0)]);
        assert!(bad_r.is_err());
        let bad_q = LqGame::unconstrained(scalar(1.0), vec![scalar(1.0)], vec![scalar(-1.0)], vec![scalar(1.0)]);
        assert!(bad_q.is_err());
        let bad_b = LqGame::unconstrained(scalar(1.0), vec![DMatrix::zeros(2, 1)], vec![scalar(1.0)], vec![scalar(1.0)]);
        assert!(bad_b.is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut spec = ConstraintSpec::empty(2, &[1, 1]);
        spec.push_input_bounds(1, -3.0, 3.0);
        spec.push_state_row(&[1.0, -0.5], -2.0, RowTag::new(RowClass::Distance, 0));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = vec![DMatrix::from_column_slice(2, 1, &[0.005, 0.1]), DMatrix::from_column_slice(2, 1, &[0.0, -0.1])];
        let g = LqGame::new(a, b, vec![DMatrix::identity(2, 2); 2], vec![scalar(1.0); 2], spec).unwrap();
        let g = prestabilize(&g, &[DMatrix::from_row_slice(1, 2, &[0.1, 0.2]), DMatrix::zeros(1, 2)]).unwrap();
        let back = LqGame::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(g, back);
    }
}

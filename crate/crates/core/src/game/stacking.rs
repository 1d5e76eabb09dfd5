//! Horizon-`T` condensation: prediction matrices, the game operator
//! `F(u) = Mu + q(x₀)` and the stacked constraints `Du + d(x₀) ≤ 0`.
//!
//! Decision layout is `u = col(u₁, …, u_N)` with `uᵢ = col(uᵢ[0], …, uᵢ[T−1])`.

use nalgebra::{DMatrix, DVector};

use super::riccati::RiccatiSolution;
use super::{ConstraintSpec, GameError, LqGame, RowTag};
use crate::linalg::block_diag;
use crate::vi::{strong_monotonicity_modulus, AviProblem, PolyhedralSet};

/// `Θ = [A; A²; …; A^T]` and `Γᵢ` with block `(t, s) = A^{t−s}Bᵢ` for `s ≤ t`.
pub fn build_prediction_matrices(game: &LqGame, horizon: usize) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = game.state_dim();
    let t_len = horizon;
    let mut powers = Vec::with_capacity(t_len + 1);
    powers.push(DMatrix::identity(n, n));
    for t in 1..=t_len {
        powers.push(&game.a * &powers[t - 1]);
    }
    let mut theta = DMatrix::zeros(n * t_len, n);
    for t in 0..t_len {
        theta.view_mut((t * n, 0), (n, n)).copy_from(&powers[t + 1]);
    }
    let gammas = game
        .b
        .iter()
        .map(|b| {
            let m = b.ncols();
            let blocks: Vec<DMatrix<f64>> = (0..t_len).map(|k| &powers[k] * b).collect();
            let mut g = DMatrix::zeros(n * t_len, m * t_len);
            for t in 0..t_len {
                for s in 0..=t {
                    g.view_mut((t * n, s * m), (n, m)).copy_from(&blocks[t - s]);
                }
            }
            g
        })
        .collect();
    (theta, gammas)
}

/// Which family a stacked row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    /// Stage row at time `t` (constrains `x[t]` and `u[t]`).
    Stage,
    /// State row on `x[t]`.
    State,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackedRow {
    pub tag: RowTag,
    pub origin: RowOrigin,
    pub stage: usize,
}

/// `Du + d_map·x₀ + d_const ≤ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedConstraints {
    pub matrix: DMatrix<f64>,
    pub d_map: DMatrix<f64>,
    pub d_const: DVector<f64>,
    pub rows: Vec<StackedRow>,
}

impl StackedConstraints {
    /// Rows are ordered by stage: stage rows at `t`, then state rows on `x[t+1]`.
    pub fn build(spec: &ConstraintSpec, theta: &DMatrix<f64>, gammas: &[DMatrix<f64>], horizon: usize) -> Self {
        let n = theta.ncols();
        let dims: Vec<usize> = spec.stage_inputs.iter().map(|e| e.ncols()).collect();
        let col_offsets = agent_offsets(&dims, horizon);
        let dim: usize = dims.iter().sum::<usize>() * horizon;
        let rs = spec.stage_rows();
        let rx = spec.state_rows();
        let total = horizon * (rs + rx);
        let mut matrix = DMatrix::zeros(total, dim);
        let mut d_map = DMatrix::zeros(total, n);
        let mut d_const = DVector::zeros(total);
        let mut rows = Vec::with_capacity(total);
        let mut r0 = 0;
        for t in 0..horizon {
            if rs > 0 {
                for (j, e) in spec.stage_inputs.iter().enumerate() {
                    let c = col_offsets[j] + t * dims[j];
                    matrix.view_mut((r0, c), (rs, dims[j])).copy_from(e);
                }
                if t == 0 {
                    d_map.view_mut((r0, 0), (rs, n)).copy_from(&spec.stage_state);
                } else {
                    let block = (t - 1) * n;
                    d_map
                        .view_mut((r0, 0), (rs, n))
                        .copy_from(&(&spec.stage_state * theta.rows(block, n)));
                    for (j, g) in gammas.iter().enumerate() {
                        let contrib = &spec.stage_state * g.rows(block, n);
                        let mut target = matrix.view_mut((r0, col_offsets[j]), (rs, dims[j] * horizon));
                        target += contrib;
                    }
                }
                d_const.rows_mut(r0, rs).copy_from(&spec.stage_offset);
                rows.extend(spec.stage_tags.iter().map(|&tag| StackedRow { tag, origin: RowOrigin::Stage, stage: t }));
                r0 += rs;
            }
            if rx > 0 {
                let block = t * n;
                d_map
                    .view_mut((r0, 0), (rx, n))
                    .copy_from(&(&spec.state_matrix * theta.rows(block, n)));
                for (j, g) in gammas.iter().enumerate() {
                    matrix
                        .view_mut((r0, col_offsets[j]), (rx, dims[j] * horizon))
                        .copy_from(&(&spec.state_matrix * g.rows(block, n)));
                }
                d_const.rows_mut(r0, rx).copy_from(&spec.state_offset);
                rows.extend(spec.state_tags.iter().map(|&tag| StackedRow { tag, origin: RowOrigin::State, stage: t + 1 }));
                r0 += rx;
            }
        }
        Self { matrix, d_map, d_const, rows }
    }

    pub fn offset(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.d_map * x0 + &self.d_const
    }

    pub fn set(&self, x0: &DVector<f64>) -> PolyhedralSet {
        PolyhedralSet::new(self.matrix.clone(), self.offset(x0)).expect("consistent stacked constraints")
    }
}

fn agent_offsets(dims: &[usize], horizon: usize) -> Vec<usize> {
    let mut acc = 0;
    dims.iter()
        .map(|&m| {
            let o = acc;
            acc += m * horizon;
            o
        })
        .collect()
}

/// `{u : Du + d(x₀) ≤ 0}` for the given spec and prediction matrices.
pub fn stack_constraints(
    spec: &ConstraintSpec,
    theta: &DMatrix<f64>,
    gammas: &[DMatrix<f64>],
    horizon: usize,
    x0: &DVector<f64>,
) -> PolyhedralSet {
    StackedConstraints::build(spec, theta, gammas, horizon).set(x0)
}

/// Everything that stays fixed while `x₀` changes.
#[derive(Clone, Debug)]
pub struct StackedGame {
    pub horizon: usize,
    pub input_dims: Vec<usize>,
    pub theta: DMatrix<f64>,
    pub gamma: Vec<DMatrix<f64>>,
    pub q_bar: Vec<DMatrix<f64>>,
    pub r_bar: Vec<DMatrix<f64>>,
    pub m: DMatrix<f64>,
    /// `q(x₀) = q_map·x₀`.
    pub q_map: DMatrix<f64>,
    pub constraints: StackedConstraints,
    /// `λ_min((M + Mᵀ)/2)`.
    pub monotonicity: f64,
    offsets: Vec<usize>,
}

impl StackedGame {
    pub fn new(game: &LqGame, horizon: usize, riccati: &RiccatiSolution) -> Result<Self, GameError> {
        if horizon == 0 {
            return Err(GameError::Invalid("horizon must be at least 1".into()));
        }
        if riccati.terminal_cost.len() != game.agents() {
            return Err(GameError::Invalid("Riccati solution does not match the game".into()));
        }
        let n = game.state_dim();
        let dims = game.input_dims();
        let (theta, gamma) = build_prediction_matrices(game, horizon);
        let q_bar: Vec<DMatrix<f64>> = (0..game.agents())
            .map(|i| {
                let mut blocks: Vec<&DMatrix<f64>> = vec![&game.q[i]; horizon - 1];
                blocks.push(&riccati.terminal_cost[i]);
                block_diag(&blocks)
            })
            .collect();
        let r_bar: Vec<DMatrix<f64>> = (0..game.agents())
            .map(|i| block_diag(&vec![&game.r[i]; horizon]))
            .collect();

        let offsets = agent_offsets(&dims, horizon);
        let dim = dims.iter().sum::<usize>() * horizon;
        let mut gamma_all = DMatrix::zeros(n * horizon, dim);
        for (j, g) in gamma.iter().enumerate() {
            gamma_all.view_mut((0, offsets[j]), (n * horizon, g.ncols())).copy_from(g);
        }
        let mut m = DMatrix::zeros(dim, dim);
        let mut q_map = DMatrix::zeros(dim, n);
        for i in 0..game.agents() {
            let w = gamma[i].transpose() * &q_bar[i];
            let rows = dims[i] * horizon;
            let mut block = &w * &gamma_all;
            let mut diag = block.view_mut((0, offsets[i]), (rows, rows));
            diag += &r_bar[i];
            m.view_mut((offsets[i], 0), (rows, dim)).copy_from(&block);
            q_map.view_mut((offsets[i], 0), (rows, n)).copy_from(&(&w * &theta));
        }
        let monotonicity = strong_monotonicity_modulus(&m);
        if monotonicity <= 0.0 {
            log::warn!("game operator is not strongly monotone (modulus {monotonicity:.3e})");
        }
        let constraints = StackedConstraints::build(&game.constraints, &theta, &gamma, horizon);
        Ok(Self { horizon, input_dims: dims, theta, gamma, q_bar, r_bar, m, q_map, constraints, monotonicity, offsets })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn rows(&self) -> usize {
        self.constraints.rows.len()
    }

    pub fn agents(&self) -> usize {
        self.input_dims.len()
    }

    /// `(offset, length)` of agent `i`'s block in the decision vector.
    pub fn agent_block(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.input_dims[i] * self.horizon)
    }

    pub fn q(&self, x0: &DVector<f64>) -> DVector<f64> {
        &self.q_map * x0
    }

    pub fn problem(&self, x0: &DVector<f64>) -> AviProblem {
        AviProblem::from_parts(self.m.clone(), self.q(x0), self.constraints.matrix.clone(), self.constraints.offset(x0))
            .expect("consistent stacked game")
    }

    /// `uᵢ[t]`.
    pub fn stage_input(&self, u: &DVector<f64>, i: usize, t: usize) -> DVector<f64> {
        let m = self.input_dims[i];
        u.rows(self.offsets[i] + t * m, m).into_owned()
    }

    /// `(u₁[0], …, u_N[0])`.
    pub fn first_inputs(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.agents()).map(|i| self.stage_input(u, i, 0)).collect()
    }

    /// `col(x[1], …, x[T]) = Θx₀ + ΣΓᵢuᵢ`.
    pub fn predict(&self, x0: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut x = &self.theta * x0;
        for (i, g) in self.gamma.iter().enumerate() {
            let (o, len) = self.agent_block(i);
            x += g * u.rows(o, len);
        }
        x
    }

    /// `Jᵢᵀ(u) = Σ_{t<T} ½x[t]ᵀQᵢx[t] + ½uᵢ[t]ᵀRᵢuᵢ[t] + ½x[T]ᵀP_term x[T]`.
    pub fn agent_cost(&self, i: usize, x0: &DVector<f64>, u: &DVector<f64>, q0: &DMatrix<f64>) -> f64 {
        let x = self.predict(x0, u);
        let (o, len) = self.agent_block(i);
        let ui = u.rows(o, len);
        0.5 * x0.dot(&(q0 * x0)) + 0.5 * x.dot(&(&self.q_bar[i] * &x)) + 0.5 * ui.dot(&(&self.r_bar[i] * ui))
    }

    /// Drops stage 0 of every agent and appends `tail[i]` (zeros when `None`).
    pub fn shift(&self, u: &DVector<f64>, tail: Option<&[DVector<f64>]>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.agents() {
            let m = self.input_dims[i];
            let (o, len) = self.agent_block(i);
            out.rows_mut(o, len - m).copy_from(&u.rows(o + m, len - m));
            if let Some(t) = tail {
                out.rows_mut(o + len - m, m).copy_from(&t[i]);
            }
        }
        out
    }
}

/// `AVI(U_T(x₀), M, q(x₀))` for the game.
pub fn assemble_avi(
    game: &LqGame,
    horizon: usize,
    riccati: &RiccatiSolution,
    x0: &DVector<f64>,
) -> Result<AviProblem, GameError> {
    if x0.len() != game.state_dim() {
        return Err(GameError::Invalid(format!("x0 has length {}, expected {}", x0.len(), game.state_dim())));
    }
    Ok(StackedGame::new(game, horizon, riccati)?.problem(x0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{RiccatiOptions, RowClass};

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn single_step_prediction() {
        let g = LqGame::unconstrained(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            vec![DMatrix::from_column_slice(2, 1, &[0.005, 0.1])],
            vec![DMatrix::identity(2, 2)],
            vec![scalar(1.0)],
        )
        .unwrap();
        let (theta, gamma) = build_prediction_matrices(&g, 1);
        assert_eq!(theta, g.a);
        assert_eq!(gamma[0], g.b[0]);
    }

    #[test]
    fn two_step_scalar_prediction() {
        let g = LqGame::unconstrained(scalar(1.0), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)]).unwrap();
        let (theta, gamma) = build_prediction_matrices(&g, 2);
        assert_eq!(theta, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(gamma[0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn box_constraint_stacking() {
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_input_bounds(0, -1.0, 1.0);
        let g = LqGame::new(scalar(0.5), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)], spec).unwrap();
        let (theta, gamma) = build_prediction_matrices(&g, 2);
        let set = stack_constraints(&g.constraints, &theta, &gamma, 2, &DVector::from_element(1, 3.0));
        // rows: u[0] ≤ 1, −u[0] ≤ 1, u[1] ≤ 1, −u[1] ≤ 1
        let expected = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        assert_eq!(set.matrix(), &expected);
        assert_eq!(set.offset(), &DVector::from_element(4, -1.0));
    }

    #[test]
    fn state_row_on_first_state() {
        // x ≤ 2 on x[1] = a x0 + b u[0]
        let mut spec = ConstraintSpec::empty(1, &[1]);
        spec.push_state_row(&[1.0], -2.0, RowTag::new(RowClass::Other, 0));
        let g = LqGame::new(scalar(0.7), vec![scalar(0.3)], vec![scalar(1.0)], vec![scalar(1.0)], spec).unwrap();
        let (theta, gamma) = build_prediction_matrices(&g, 1);
        let set = stack_constraints(&g.constraints, &theta, &gamma, 1, &DVector::from_element(1, 4.0));
        assert!((set.matrix()[(0, 0)] - 0.3).abs() < 1e-15);
        assert!((set.offset()[0] - (0.7 * 4.0 - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_state_has_zero_linear_term() {
        let g = LqGame::unconstrained(scalar(0.5), vec![scalar(1.0)], vec![scalar(1.0)], vec![scalar(1.0)]).unwrap();
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let p = assemble_avi(&g, 3, &ric, &DVector::zeros(1)).unwrap();
        assert_eq!(p.dim(), 3);
        assert!(p.operator().offset().amax() == 0.0);
    }

    #[test]
    fn shift_pads_with_zero() {
        let g = LqGame::unconstrained(
            scalar(0.5),
            vec![scalar(1.0), scalar(1.0)],
            vec![scalar(1.0), scalar(1.0)],
            vec![scalar(1.0), scalar(1.0)],
        )
        .unwrap();
        let ric = RiccatiSolution::compute(&g, RiccatiOptions::default()).unwrap();
        let s = StackedGame::new(&g, 3, &ric).unwrap();
        let u = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.shift(&u, None), DVector::from_column_slice(&[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]));
        let tail = [DVector::from_element(1, 9.0), DVector::from_element(1, 8.0)];
        assert_eq!(s.shift(&u, Some(&tail)), DVector::from_column_slice(&[2.0, 3.0, 9.0, 5.0, 6.0, 8.0]));
    }
}

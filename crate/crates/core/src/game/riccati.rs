//! Coupled Riccati equations of the infinite-horizon game and the augmented
//! single-agent Riccati equations that give the terminal costs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GameError, LqGame};
use crate::linalg::{block_diag, spectral_radius};
use crate::serde_util;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiccatiOptions {
    /// Bound on the larger Frobenius residual of the two coupled equations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500 }
    }
}

/// Largest state dimension for which Stein equations are solved by
/// Kronecker vectorization; larger systems use Smith doubling.
const KRONECKER_MAX_DIM: usize = 20;

const RECURSION_MAX_ITER: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    #[serde(with = "serde_util::matrices")]
    pub p: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrices")]
    pub k: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrix")]
    pub a_cl: DMatrix<f64>,
    #[serde(with = "serde_util::matrices")]
    pub p_hat: Vec<DMatrix<f64>>,
    #[serde(with = "serde_util::matrices")]
    pub terminal_cost: Vec<DMatrix<f64>>,
    pub iterations: usize,
}

impl RiccatiSolution {
    /// Coupled solve, then one augmented DARE per agent.
    pub fn compute(game: &LqGame, opts: RiccatiOptions) -> Result<Self, GameError> {
        let (p, k, a_cl, iterations) = solve_coupled_riccati_counted(game, opts)?;
        let mut p_hat = Vec::with_capacity(game.agents());
        let mut terminal_cost = Vec::with_capacity(game.agents());
        for i in 0..game.agents() {
            let (a_hat, b_hat, q_hat) = build_augmented_system(game, &k, &a_cl, i);
            let (ph, _) = solve_augmented_riccati(&a_hat, &b_hat, &q_hat, &game.r[i], opts.tol, opts.max_iter)?;
            terminal_cost.push(terminal_cost_matrix(&ph));
            p_hat.push(ph);
        }
        Ok(Self { p, k, a_cl, p_hat, terminal_cost, iterations })
    }

    /// Largest Frobenius residual of the two coupled fixed-point equations.
    pub fn residual(&self, game: &LqGame) -> f64 {
        let (rp, rk) = coupled_residual(game, &self.p, &self.k);
        rp.max(rk)
    }
}

fn closed_loop(game: &LqGame, k: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut a_cl = game.a.clone();
    for (b, ki) in game.b.iter().zip(k) {
        a_cl += b * ki;
    }
    a_cl
}

/// `(max ‖Pᵢ − Qᵢ − AᵀPᵢA_cl‖_F, max ‖Kᵢ + Rᵢ⁻¹BᵢᵀPᵢA_cl‖_F)`.
fn coupled_residual(game: &LqGame, p: &[DMatrix<f64>], k: &[DMatrix<f64>]) -> (f64, f64) {
    let a_cl = closed_loop(game, k);
    let mut rp: f64 = 0.0;
    let mut rk: f64 = 0.0;
    for i in 0..game.agents() {
        let pa = &p[i] * &a_cl;
        rp = rp.max((&p[i] - &game.q[i] - game.a.transpose() * &pa).norm());
        let rhs = game.b[i].transpose() * &pa;
        let k_implied = game.r[i].clone().lu().solve(&rhs).map(|x| -x);
        rk = rk.max(match k_implied {
            Some(ki) => (&k[i] - ki).norm(),
            None => f64::INFINITY,
        });
    }
    (rp, rk)
}

/// Gains from `RᵢKᵢ + BᵢᵀPᵢΣⱼBⱼKⱼ = −BᵢᵀPᵢA`, solved jointly.
fn gains_from_values(game: &LqGame, p: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, GameError> {
    let n = game.state_dim();
    let dims = game.input_dims();
    let total: usize = dims.iter().sum();
    let offsets: Vec<usize> = dims.iter().scan(0, |acc, &m| {
        let o = *acc;
        *acc += m;
        Some(o)
    }).collect();
    let mut s = DMatrix::zeros(total, total);
    let mut rhs = DMatrix::zeros(total, n);
    for i in 0..game.agents() {
        let btp = game.b[i].transpose() * &p[i];
        for j in 0..game.agents() {
            let mut block = &btp * &game.b[j];
            if i == j {
                block += &game.r[i];
            }
            s.view_mut((offsets[i], offsets[j]), (dims[i], dims[j])).copy_from(&block);
        }
        rhs.view_mut((offsets[i], 0), (dims[i], n)).copy_from(&(-(&btp * &game.a)));
    }
    let k = s
        .lu()
        .solve(&rhs)
        .filter(|k| k.iter().all(|v| v.is_finite()))
        .ok_or_else(|| GameError::NoStabilizingSolution("gain system is singular".into()))?;
    Ok((0..game.agents()).map(|i| k.rows(offsets[i], dims[i]).into_owned()).collect())
}

/// Solves `X = Q + LᵀX R` (the Stein equation `X − LᵀXR = Q`).
pub fn solve_stein(l: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = l.nrows();
    if n <= KRONECKER_MAX_DIM {
        return stein_kronecker(l, r, &[q]).map(|mut v| v.remove(0));
    }
    stein_smith(l, r, q).or_else(|| stein_kronecker(l, r, &[q]).map(|mut v| v.remove(0)))
}

/// `(I − Rᵀ ⊗ Lᵀ) vec X = vec Q`, one factorization for all right-hand sides.
fn stein_kronecker(l: &DMatrix<f64>, r: &DMatrix<f64>, qs: &[&DMatrix<f64>]) -> Option<Vec<DMatrix<f64>>> {
    let n = l.nrows();
    let lt = l.transpose();
    let mut big = DMatrix::identity(n * n, n * n);
    // vec(LᵀXR) = (Rᵀ ⊗ Lᵀ) vec X
    for a in 0..n {
        for b in 0..n {
            let coef = r[(b, a)];
            if coef == 0.0 {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    big[(a * n + i, b * n + j)] -= coef * lt[(i, j)];
                }
            }
        }
    }
    let lu = big.lu();
    qs.iter()
        .map(|q| {
            let rhs = DVector::from_column_slice(q.as_slice());
            let x = lu.solve(&rhs)?;
            x.iter().all(|v| v.is_finite()).then(|| DMatrix::from_column_slice(n, n, x.as_slice()))
        })
        .collect()
}

/// Smith doubling, `X = Σₖ (Lᵀ)ᵏ Q Rᵏ`; requires `ρ(L)ρ(R) < 1`.
fn stein_smith(l: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if spectral_radius(l) * spectral_radius(r) >= 1.0 - 1e-9 {
        return None;
    }
    let mut x = q.clone();
    let mut lk = l.transpose();
    let mut rk = r.clone();
    for _ in 0..64 {
        let inc = &lk * &x * &rk;
        x += &inc;
        if inc.norm() <= 1e-16 * (1.0 + x.norm()) {
            return x.iter().all(|v| v.is_finite()).then_some(x);
        }
        lk = &lk * &lk;
        rk = &rk * &rk;
    }
    None
}

pub fn solve_coupled_riccati(
    game: &LqGame,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>), GameError> {
    solve_coupled_riccati_counted(game, RiccatiOptions { tol, max_iter }).map(|(p, k, a, _)| (p, k, a))
}

type Coupled = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>, usize);

/// Alternating exact gain/Stein solves from `K = 0` when `A` is Schur stable.
/// If an iterate loses stability or the fixed point is not stabilizing, the
/// Riccati difference recursion from `P = Q` is used instead.
fn solve_coupled_riccati_counted(game: &LqGame, opts: RiccatiOptions) -> Result<Coupled, GameError> {
    if spectral_radius(&game.a) < 1.0 {
        match alternate(game, opts) {
            Ok(sol) => return Ok(sol),
            Err(e) => log::debug!("alternating Riccati iteration failed ({e}); using the recursion"),
        }
    }
    recursion(game, opts.tol)
}

/// Keeps the iterate or the exact Stein solution for `k`, whichever has the
/// smaller joint residual.
fn finish(game: &LqGame, p: Vec<DMatrix<f64>>, k: Vec<DMatrix<f64>>, it: usize) -> Result<Coupled, GameError> {
    let a_cl = closed_loop(game, &k);
    let rho = spectral_radius(&a_cl);
    if rho >= 1.0 {
        return Err(GameError::NoStabilizingSolution(format!("fixed point has spectral radius {rho:.6}")));
    }
    let exact = stein_all(game, &a_cl)?;
    let joint = |p: &[DMatrix<f64>]| {
        let (rp, rk) = coupled_residual(game, p, &k);
        rp.max(rk)
    };
    let p = if joint(&exact) <= joint(&p) { exact } else { p };
    log::debug!("coupled Riccati converged after {it} iterations (ρ(A_cl) = {rho:.4})");
    Ok((p, k, a_cl, it))
}

fn alternate(game: &LqGame, opts: RiccatiOptions) -> Result<Coupled, GameError> {
    let n = game.state_dim();
    let mut k: Vec<DMatrix<f64>> = game.input_dims().iter().map(|&m| DMatrix::zeros(m, n)).collect();
    for it in 1..=opts.max_iter {
        let a_cl = closed_loop(game, &k);
        let rho = spectral_radius(&a_cl);
        if rho >= 1.0 {
            return Err(GameError::NoStabilizingSolution(format!(
                "gain iterate {it} is not stabilizing (ρ = {rho:.4})"
            )));
        }
        let p = stein_all(game, &a_cl)?;
        let k_next = gains_from_values(game, &p)?;
        let (rp, rk) = coupled_residual(game, &p, &k_next);
        let done = rp.max(rk) <= opts.tol;
        k = k_next;
        if done {
            return finish(game, p, k, it);
        }
    }
    Err(GameError::NoStabilizingSolution(format!(
        "coupled Riccati iteration did not converge in {} iterations",
        opts.max_iter
    )))
}

/// `Pᵢ ← Qᵢ + AᵀPᵢA_cl(K(P))`: the infinite-horizon limit of the
/// finite-horizon feedback game.
fn recursion(game: &LqGame, tol: f64) -> Result<Coupled, GameError> {
    let at = game.a.transpose();
    let mut p: Vec<DMatrix<f64>> = game.q.clone();
    let mut k = gains_from_values(game, &p)?;
    for it in 1..=RECURSION_MAX_ITER {
        let a_cl = closed_loop(game, &k);
        p = (0..game.agents()).map(|i| &game.q[i] + &at * &p[i] * &a_cl).collect();
        if p.iter().any(|pi| !pi.iter().all(|v| v.is_finite())) {
            return Err(GameError::NoStabilizingSolution("Riccati recursion diverged".into()));
        }
        let k_next = gains_from_values(game, &p)?;
        let (rp, rk) = coupled_residual(game, &p, &k_next);
        let done = rp.max(rk) <= tol;
        k = k_next;
        if done {
            return finish(game, p, k, it);
        }
    }
    Err(GameError::NoStabilizingSolution(format!(
        "coupled Riccati recursion did not converge in {RECURSION_MAX_ITER} sweeps"
    )))
}

/// `Pᵢ − AᵀPᵢA_cl = Qᵢ` for every agent.
fn stein_all(game: &LqGame, a_cl: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, GameError> {
    let fail = || GameError::NoStabilizingSolution("Stein equation is singular".into());
    if game.state_dim() <= KRONECKER_MAX_DIM {
        let qs: Vec<&DMatrix<f64>> = game.q.iter().collect();
        return stein_kronecker(&game.a, a_cl, &qs).ok_or_else(fail);
    }
    game.q.iter().map(|q| solve_stein(&game.a, a_cl, q).ok_or_else(fail)).collect()
}

/// `Â = [[A, Σ_{j≠i}BⱼKⱼ], [0, A_cl]]`, `B̂ = [Bᵢ; 0]`, `Q̂ = blkdiag(Qᵢ, 0)`.
pub fn build_augmented_system(
    game: &LqGame,
    k: &[DMatrix<f64>],
    a_cl: &DMatrix<f64>,
    i: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = game.state_dim();
    let mut coupling = DMatrix::zeros(n, n);
    for (j, (b, kj)) in game.b.iter().zip(k).enumerate() {
        if j != i {
            coupling += b * kj;
        }
    }
    let mut a_hat = DMatrix::zeros(2 * n, 2 * n);
    a_hat.view_mut((0, 0), (n, n)).copy_from(&game.a);
    a_hat.view_mut((0, n), (n, n)).copy_from(&coupling);
    a_hat.view_mut((n, n), (n, n)).copy_from(a_cl);
    let mut b_hat = DMatrix::zeros(2 * n, game.b[i].ncols());
    b_hat.view_mut((0, 0), (n, game.b[i].ncols())).copy_from(&game.b[i]);
    let q_hat = block_diag(&[&game.q[i], &DMatrix::zeros(n, n)]);
    (a_hat, b_hat, q_hat)
}

/// Stabilizing solution of `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` by the
/// structure-preserving doubling algorithm; returns `(P, K)` with
/// `K = −(R + BᵀPB)⁻¹BᵀPA`.
pub fn solve_augmented_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GameError> {
    let n = a.nrows();
    let fail = |what: &str| GameError::NoStabilizingSolution(format!("augmented Riccati: {what}"));
    let r_inv = r.clone().try_inverse().ok_or_else(|| fail("R is singular"))?;
    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let lu = (&eye + &gk * &hk).lu();
        let w_a = lu.solve(&ak).ok_or_else(|| fail("doubling step is singular"))?;
        let w_g = lu.solve(&gk).ok_or_else(|| fail("doubling step is singular"))?;
        let h_next = &hk + ak.transpose() * &hk * &w_a;
        let g_next = &gk + &ak * &w_g * ak.transpose();
        let a_next = &ak * &w_a;
        let change = (&h_next - &hk).norm();
        hk = (&h_next + h_next.transpose()) * 0.5;
        gk = (&g_next + g_next.transpose()) * 0.5;
        ak = a_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(fail("iteration diverged"));
        }
        if change <= tol * (1.0 + hk.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(fail("doubling did not converge"));
    }
    let p = hk;
    let k = dare_gain(a, b, r, &p).ok_or_else(|| fail("gain system is singular"))?;
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        return Err(fail(&format!("closed loop has spectral radius {rho:.6}")));
    }
    Ok((p, k))
}

fn dare_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let btp = b.transpose() * p;
    (r + &btp * b).lu().solve(&(btp * a)).map(|k| -k)
}

/// `EᵀP̂E` with `E = [I; I]`: both augmented components equal the terminal state.
pub fn terminal_cost_matrix(p_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p_hat.nrows() / 2;
    let p11 = p_hat.view((0, 0), (n, n));
    let p12 = p_hat.view((0, n), (n, n));
    let p21 = p_hat.view((n, 0), (n, n));
    let p22 = p_hat.view((n, n), (n, n));
    p11 + p12 + p21 + p22
}

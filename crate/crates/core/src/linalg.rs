//! Dense linear-algebra helpers shared by the solvers and the game compiler.

use nalgebra::{DMatrix, DVector, Dyn, SymmetricEigen, LU};

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of the symmetric part `(A + Aᵀ)/2`.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Solves `A x = b` by LU with partial pivoting. On failure the leading
/// `ridge_block × ridge_block` block receives `+1e-10·I` and the solve is
/// retried once.
pub fn lu_solve_with_ridge(
    a: DMatrix<f64>,
    b: &DVector<f64>,
    ridge_block: usize,
) -> Option<DVector<f64>> {
    lu_factor_solve(a, b, ridge_block).map(|(_, x)| x)
}

pub type DenseLu = LU<f64, Dyn, Dyn>;

/// [`lu_solve_with_ridge`] that also returns the factorization used, for
/// further solves with the same matrix.
pub fn lu_factor_solve(a: DMatrix<f64>, b: &DVector<f64>, ridge_block: usize) -> Option<(DenseLu, DVector<f64>)> {
    let retry = if ridge_block > 0 { Some(a.clone()) } else { None };
    if let Some(out) = factor_solve(a, b) {
        return Some(out);
    }
    let mut a = retry?;
    for i in 0..ridge_block.min(a.nrows()) {
        a[(i, i)] += RIDGE;
    }
    log::debug!("LU failed, retrying with ridge {RIDGE:e}");
    factor_solve(a, b)
}

pub const RIDGE: f64 = 1e-10;

fn factor_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<(DenseLu, DVector<f64>)> {
    let lu = a.lu();
    let x = lu.solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some((lu, x))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `max_i v_i`, or `-inf` for an empty vector.
pub fn max_entry(v: &DVector<f64>) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Linear-interpolated percentile; `NaN` for an empty slice.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_of_rotation_scaled() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_part_eigenvalue() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(min_symmetric_eigenvalue(&a).abs() < 1e-12);
    }

    #[test]
    fn percentiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ridge_retry_rescues_singular_leading_block() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        let x = lu_solve_with_ridge(a, &b, 1).unwrap();
        assert!((x[1] - 1.0).abs() < 1e-12);
    }
}

//! Exact Euclidean projection onto `{y : Dy + d ≤ 0}` by a dual active-set
//! method (Goldfarb–Idnani with identity Hessian).
//!
//! The active constraint normals are kept in a QR factorization `N = Q·[R; 0]`
//! updated by Givens rotations, so adding or dropping a constraint costs
//! `O(n²)`.

use nalgebra::{DMatrix, DVector};

/// Result of a successful projection.
pub(crate) struct ActiveSetProjection {
    pub point: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

pub(crate) enum ActiveSetFailure {
    Infeasible,
    /// Iteration cap or loss of accuracy; the caller may retry another way.
    Numerical(String),
}

struct Factor {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
}

fn givens(a: f64, b: f64) -> (f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0)
    } else {
        (a / h, b / h)
    }
}

impl Factor {
    fn new(n: usize) -> Self {
        Self { q: DMatrix::identity(n, n), r: DMatrix::zeros(n, n), active: Vec::new(), mult: Vec::new() }
    }

    fn len(&self) -> usize {
        self.active.len()
    }

    /// Rotates columns `j` and `j + 1` of `Q`.
    fn rotate_q(&mut self, j: usize, c: f64, s: f64) {
        for i in 0..self.q.nrows() {
            let (a, b) = (self.q[(i, j)], self.q[(i, j + 1)]);
            self.q[(i, j)] = c * a + s * b;
            self.q[(i, j + 1)] = -s * a + c * b;
        }
    }

    /// `(z, r)`: the part of `c` orthogonal to the active normals, and the
    /// coefficients of its projection onto them.
    fn split(&self, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let k = self.len();
        let n = self.q.nrows();
        let dvec = self.q.tr_mul(c);
        let z = self.q.columns(k, n - k) * dvec.rows(k, n - k);
        let mut r = dvec.rows(0, k).into_owned();
        for i in (0..k).rev() {
            let mut acc = r[i];
            for j in i + 1..k {
                acc -= self.r[(i, j)] * r[j];
            }
            r[i] = acc / self.r[(i, i)];
        }
        (z, r, dvec)
    }

    fn add(&mut self, idx: usize, mut dvec: DVector<f64>, mult: f64) {
        let k = self.len();
        let n = self.q.nrows();
        for j in (k + 1..n).rev() {
            let (c, s) = givens(dvec[j - 1], dvec[j]);
            dvec[j - 1] = c * dvec[j - 1] + s * dvec[j];
            dvec[j] = 0.0;
            self.rotate_q(j - 1, c, s);
        }
        for i in 0..=k {
            self.r[(i, k)] = dvec[i];
        }
        self.active.push(idx);
        self.mult.push(mult);
    }

    fn drop(&mut self, pos: usize) {
        let k = self.len();
        for j in pos..k - 1 {
            for i in 0..k {
                self.r[(i, j)] = self.r[(i, j + 1)];
            }
        }
        for i in 0..k {
            self.r[(i, k - 1)] = 0.0;
        }
        for j in pos..k - 1 {
            let (c, s) = givens(self.r[(j, j)], self.r[(j + 1, j)]);
            for col in j..k - 1 {
                let (a, b) = (self.r[(j, col)], self.r[(j + 1, col)]);
                self.r[(j, col)] = c * a + s * b;
                self.r[(j + 1, col)] = -s * a + c * b;
            }
            self.r[(j + 1, j)] = 0.0;
            self.rotate_q(j, c, s);
        }
        self.active.remove(pos);
        self.mult.remove(pos);
    }
}

/// `argmin ‖y − z‖` subject to `Dy + d ≤ 0`, with multipliers `ν ≥ 0` such
/// that `y − z + Dᵀν = 0`.
pub(crate) fn project_active_set(
    dm: &DMatrix<f64>,
    off: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<ActiveSetProjection, ActiveSetFailure> {
    let (m, n) = dm.shape();
    let norms: Vec<f64> = (0..m).map(|i| dm.row(i).norm()).collect();
    let scale = 1.0 + z.amax() + off.amax();
    let tol = 1e-12 * scale;
    let max_iter = 10 * (n + m) + 50;
    let rows: Vec<DVector<f64>> = (0..m).map(|i| dm.row(i).transpose()).collect();

    let mut f = Factor::new(n);
    let mut y = z.clone();
    let mut iterations = 0;
    loop {
        let s = dm * &y + off;
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..m {
            let viol = if norms[i] > 0.0 { s[i] / norms[i] } else { s[i] };
            if viol > tol && !f.active.contains(&i) && pick.is_none_or(|(_, v)| viol > v) {
                pick = Some((i, viol));
            }
        }
        let Some((p, _)) = pick else { break };
        if norms[p] == 0.0 {
            return Err(ActiveSetFailure::Infeasible);
        }
        let cp = &rows[p];
        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(ActiveSetFailure::Numerical(format!("active-set projection exceeded {max_iter} steps")));
            }
            let (zdir, r, dvec) = f.split(cp);
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (j, (&rj, &uj)) in r.iter().zip(&f.mult).enumerate() {
                if rj > 0.0 {
                    let t = uj / rj;
                    if t < t1 {
                        t1 = t;
                        block = Some(j);
                    }
                }
            }
            let zz = zdir.norm_squared();
            let sp = cp.dot(&y) + off[p];
            let t2 = if zz > 1e-14 * norms[p] * norms[p] { sp / zz } else { f64::INFINITY };
            if !t1.is_finite() && !t2.is_finite() {
                return Err(ActiveSetFailure::Infeasible);
            }
            let t = t1.min(t2).max(0.0);
            if t2.is_finite() {
                y.axpy(-t, &zdir, 1.0);
            }
            for (uj, rj) in f.mult.iter_mut().zip(r.iter()) {
                *uj = (*uj - t * rj).max(0.0);
            }
            up += t;
            if t2 <= t1 {
                f.add(p, dvec, up);
                break;
            }
            f.drop(block.expect("finite partial step has a blocking constraint"));
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &u) in f.active.iter().zip(&f.mult) {
        multipliers[i] = u;
    }
    // Stationarity check guards against accumulated rounding in the factors.
    let stat = (&y - z + dm.tr_mul(&multipliers)).amax();
    if stat > 1e-8 * scale {
        return Err(ActiveSetFailure::Numerical(format!("active-set projection lost accuracy ({stat:.3e})")));
    }
    Ok(ActiveSetProjection { point: y, multipliers, iterations })
}

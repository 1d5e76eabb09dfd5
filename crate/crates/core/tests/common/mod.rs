//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use lqavi::AviProblem;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-s..s))
}

/// `M = μI + LLᵀ + (S − Sᵀ)` with `μ ≥ 0.1`, and a set with a strictly
/// feasible point.
pub fn random_avi(rng: &mut ChaCha8Rng, n: usize, m: usize) -> AviProblem {
    let mu = rng.random_range(0.1..1.0);
    let l = uniform_matrix(rng, n, n, 1.0 / (n as f64).sqrt());
    let s = uniform_matrix(rng, n, n, 0.5 / (n as f64).sqrt());
    let mm = DMatrix::identity(n, n) * mu + &l * l.transpose() + &s - s.transpose();
    let q = uniform_vector(rng, n, 2.0);
    let d = uniform_matrix(rng, m, n, 1.0);
    let u0 = uniform_vector(rng, n, 1.0);
    let slack = DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    let off = -(&d * &u0) - slack;
    AviProblem::from_parts(mm, q, d, off).unwrap()
}

/// Instance with a planted strictly complementary solution: active rows have
/// `λ* ≥ 0.5`, inactive rows slack `≥ 0.5`.
pub fn planted_avi(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (AviProblem, DVector<f64>) {
    let base = random_avi(rng, n, m);
    let mm = base.operator().matrix().clone();
    let d = base.set().matrix().clone();
    let u_star = uniform_vector(rng, n, 1.0);
    let mut lambda = DVector::zeros(m);
    let mut off = -(&d * &u_star);
    // At most n active rows keeps the active normals independent.
    for i in 0..m {
        if i < n && rng.random_bool(0.5) {
            lambda[i] = rng.random_range(0.5..2.0);
        } else {
            off[i] -= rng.random_range(0.5..2.0);
        }
    }
    let q = -(&mm * &u_star) - d.transpose() * &lambda;
    (AviProblem::from_parts(mm, q, d, off).unwrap(), u_star)
}

/// Independent KKT check of `Mu + q + Dᵀλ = 0`, `Du + d ≤ 0`, `λ ≥ 0`,
/// `λᵀ(Du + d) = 0`.
pub fn kkt_error(p: &AviProblem, u: &DVector<f64>, l: &DVector<f64>) -> f64 {
    let stat = p.operator().apply(u) + p.set().matrix().transpose() * l;
    let s = p.set().evaluate(u);
    let mut err = stat.amax();
    for i in 0..s.len() {
        err = err.max(s[i].max(0.0)).max((-l[i]).max(0.0)).max((s[i] * l[i]).abs());
    }
    err
}

//! Stein-identity score estimators: both return an estimate of
//! `∇ log q(θ_i)` for the distribution the particles were drawn from.

use crate::error::{Error, Result};
use crate::numerics::{axpy, cholesky, cholesky_solve, sym_eigh_leading, Matrix};

use super::kernel::rbf_gram;

/// `Σ_j ∇_{θ_j} k(θ_i, θ_j) = Σ_j k_ij (θ_i − θ_j) / h²`, one row per particle.
fn kernel_divergence(particles: &Matrix, k: &Matrix, h: f64) -> Matrix {
    let (p, m) = particles.shape();
    let inv_h2 = 1.0 / (h * h);
    let mut out = Matrix::zeros(p, m);
    for i in 0..p {
        let ti = particles.row(i).to_vec();
        let row = out.row_mut(i);
        for j in 0..p {
            if i == j {
                continue;
            }
            let w = k[(i, j)] * inv_h2;
            for ((r, a), b) in row.iter_mut().zip(&ti).zip(particles.row(j)) {
                *r += w * (a - b);
            }
        }
    }
    out
}

/// Stein gradient estimator `Ĝ = −(K + ηI)⁻¹ ⟨∇, K⟩`.
pub fn score_sge(particles: &Matrix, h: f64, eta: f64) -> Result<Matrix> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("SGE ridge must be > 0, got {eta}")));
    }
    let mut k = rbf_gram(particles, h);
    let div = kernel_divergence(particles, &k, h);
    for i in 0..k.rows() {
        k[(i, i)] += eta;
    }
    let l = cholesky(&k)?;
    let mut g = cholesky_solve(&l, &div);
    g.scale(-1.0);
    Ok(g)
}

/// Spectral Stein gradient estimator.
///
/// Keeps the Gram eigenpairs with `λ_m ≥ threshold · λ_max`, builds the
/// Nyström eigenfunctions `ψ_m(x) = (√P/λ_m) Σ_j u_jm k(x, θ_j)` and projects
/// the score onto them with `β_m = −(1/P) Σ_i ∇ψ_m(θ_i)`.
pub fn score_ssge(particles: &Matrix, h: f64, threshold: f64) -> Result<Matrix> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "SSGE eigenvalue threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let (p, m) = particles.shape();
    let k = rbf_gram(particles, h);
    let (lambda, u) = sym_eigh_leading(&k, threshold)?;
    if lambda.is_empty() || !(lambda[0] > 0.0) {
        return Err(Error::numeric(
            "no Gram eigenvalue above the SSGE threshold; lower the threshold",
        ));
    }
    let j = lambda.len();
    let ku = k.matmul(&u)?; // P × J
    let row_sums: Vec<f64> = k.row_iter().map(|r| r.iter().sum()).collect();
    let sqrt_p = (p as f64).sqrt();
    let inv_h2 = 1.0 / (h * h);

    // β_m = −(1/P)(√P/λ_m)/h² · [Σ_j s_j u_jm θ_j − Σ_i (KU)_im θ_i]
    let mut beta = Matrix::zeros(j, m);
    for mm in 0..j {
        let row = beta.row_mut(mm);
        for i in 0..p {
            let w = row_sums[i] * u[(i, mm)] - ku[(i, mm)];
            axpy(w, particles.row(i), row);
        }
        let c = -(sqrt_p / lambda[mm]) * inv_h2 / p as f64;
        row.iter_mut().for_each(|v| *v *= c);
    }

    let mut g = Matrix::zeros(p, m);
    for i in 0..p {
        let row = g.row_mut(i);
        for mm in 0..j {
            let psi = sqrt_p / lambda[mm] * ku[(i, mm)];
            axpy(psi, beta.row(mm), row);
        }
    }
    Ok(g)
}

use crate::error::{Error, Result};

use super::matrix::{axpy, dot, Matrix};
use super::rng::Rng;

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log Σ exp(x)`, stable for large magnitudes.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `softmax(logits)` against `label`, with the gradient
/// `softmax(logits) - onehot(label)` with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_logits(logits)?;
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            len: logits.len(),
        });
    }
    Ok(cross_entropy_unchecked(logits, label))
}

pub(crate) fn cross_entropy_unchecked(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax_unchecked(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::invalid(format!(
            "expected a square matrix, got {:?}",
            a.shape()
        )));
    }
    let tol = 1e-10 * a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as the columns of the returned matrix.
pub fn sym_eigh(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    // symmetrize exactly so rounding in the input cannot bias the rotations
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let norm2 = m.as_slice().iter().map(|x| x * x).sum::<f64>();
    let target = (f64::EPSILON * f64::EPSILON) * norm2;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        if off <= target || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate_columns(&mut m, p, q, c, s);
                rotate_rows(&mut m, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let kp = m[(k, p)];
        let kq = m[(k, q)];
        m[(k, p)] = c * kp - s * kq;
        m[(k, q)] = s * kp + c * kq;
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.cols() {
        let pk = m[(p, k)];
        let qk = m[(q, k)];
        m[(p, k)] = c * pk - s * qk;
        m[(q, k)] = s * pk + c * qk;
    }
}

/// Matrices up to this order go straight to full Jacobi.
const DENSE_EIGH_LIMIT: usize = 128;

/// Leading eigenpairs of a symmetric positive semidefinite matrix: every pair
/// with `λ ≥ rel_threshold · λ_max`, in descending order.
///
/// Small matrices use [`sym_eigh`]. Larger ones use block subspace iteration
/// with Rayleigh-Ritz projection, growing the block until the smallest
/// converged Ritz value falls under the threshold. Gram matrices of smooth
/// kernels have fast-decaying spectra, so only a handful of pairs are needed.
pub fn sym_eigh_leading(a: &Matrix, rel_threshold: f64) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    if n <= DENSE_EIGH_LIMIT {
        let (vals, vecs) = sym_eigh(a)?;
        return Ok(truncate_pairs(vals, vecs, rel_threshold));
    }

    let mut wanted = 8usize;
    loop {
        let block = (wanted + 8).min(n);
        if 2 * block >= n {
            let (vals, vecs) = sym_eigh(a)?;
            return Ok(truncate_pairs(vals, vecs, rel_threshold));
        }
        let (vals, basis) = subspace_iteration(a, block, wanted)?;
        let cutoff = rel_threshold * vals[0];
        if vals[wanted - 1] >= cutoff {
            wanted *= 2;
            continue;
        }
        let keep = vals.iter().take_while(|&&v| v >= cutoff).count();
        let vectors = Matrix::from_fn(n, keep, |r, c| basis[(c, r)]);
        return Ok((vals[..keep].to_vec(), vectors));
    }
}

fn truncate_pairs(vals: Vec<f64>, vecs: Matrix, rel_threshold: f64) -> (Vec<f64>, Matrix) {
    let cutoff = rel_threshold * vals.first().copied().unwrap_or(0.0);
    let keep = vals.iter().take_while(|&&v| v >= cutoff).count();
    let vectors = Matrix::from_fn(vecs.rows(), keep, |r, c| vecs[(r, c)]);
    (vals[..keep].to_vec(), vectors)
}

/// Returns Ritz values (descending) and Ritz vectors stored as rows.
fn subspace_iteration(a: &Matrix, block: usize, converge: usize) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    let mut rng = Rng::new(0x5EED_E1C4);
    let mut q = Matrix::from_fn(block, n, |_, _| rng.normal());
    orthonormalize_rows(&mut q)?;
    let tol = 1e-11 * a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _iter in 0..2000 {
        let w = q.matmul(a)?; // rows are A q_j
        let h = w.matmul(&q.transpose())?;
        let h = Matrix::from_fn(block, block, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
        let (theta, y) = sym_eigh(&h)?;
        let yt = y.transpose();
        let ritz = yt.matmul(&q)?;
        let a_ritz = yt.matmul(&w)?;
        let converged = (0..converge).all(|j| {
            let r: f64 = a_ritz
                .row(j)
                .iter()
                .zip(ritz.row(j))
                .map(|(av, v)| (av - theta[j] * v).powi(2))
                .sum();
            r.sqrt() <= tol
        });
        if converged {
            return Ok((theta, ritz));
        }
        q = a_ritz;
        orthonormalize_rows(&mut q)?;
    }
    Err(Error::numeric("subspace iteration did not converge"))
}

/// Modified Gram-Schmidt over the rows, applied twice for stability.
fn orthonormalize_rows(m: &mut Matrix) -> Result<()> {
    for _ in 0..2 {
        for i in 0..m.rows() {
            for j in 0..i {
                let rj = m.row(j).to_vec();
                let proj = dot(m.row(i), &rj);
                axpy(-proj, &rj, m.row_mut(i));
            }
            let norm = dot(m.row(i), m.row(i)).sqrt();
            if norm < 1e-300 {
                return Err(Error::numeric("rank-deficient subspace basis"));
            }
            m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::invalid("cholesky needs a square matrix"));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::numeric(format!(
                        "matrix is not positive definite (pivot {i} = {d:e})"
                    )));
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    // forward: L Y = B
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik != 0.0 {
                for c in 0..m {
                    x[(i, c)] -= lik * x[(k, c)];
                }
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    // backward: Lᵀ X = Y
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki != 0.0 {
                for c in 0..m {
                    x[(i, c)] -= lki * x[(k, c)];
                }
            }
        }
        let d = l[(i, i)];
        for c in 0..m {
            x[(i, c)] /= d;
        }
    }
    x
}

/// Solves `L y = b` for a single right-hand side.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..y.len() {
        let s = dot(&l.row(i)[..i], &y[..i]);
        y[i] = (y[i] - s) / l[(i, i)];
    }
    y
}

pub fn cholesky_log_det(l: &Matrix) -> f64 {
    2.0 * (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

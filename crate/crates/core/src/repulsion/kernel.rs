use crate::numerics::{sq_dist, Matrix};

/// `K[i][j] = exp(−‖θ_i − θ_j‖² / (2h²))` over the rows of `particles`.
pub fn rbf_gram(particles: &Matrix, h: f64) -> Matrix {
    let p = particles.rows();
    let inv = 1.0 / (2.0 * h * h);
    let mut k = Matrix::identity(p);
    for i in 0..p {
        for j in 0..i {
            let v = (-sq_dist(particles.row(i), particles.row(j)) * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn pairwise_sq_dists(particles: &Matrix) -> Vec<f64> {
    let p = particles.rows();
    let mut d = Vec::with_capacity(p * (p - 1) / 2);
    for i in 0..p {
        for j in 0..i {
            d.push(sq_dist(particles.row(i), particles.row(j)));
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `h = sqrt(med / (2 ln(P+1)))` with `med` the median pairwise squared
/// distance; falls back to 1 when the median is zero.
pub fn median_bandwidth(particles: &Matrix) -> f64 {
    let med = median(pairwise_sq_dists(particles));
    if med > 0.0 {
        (med / (2.0 * ((particles.rows() + 1) as f64).ln())).sqrt()
    } else {
        1.0
    }
}

/// Median pairwise distance, with the same zero fallback.
pub fn median_distance(particles: &Matrix) -> f64 {
    let med = median(pairwise_sq_dists(particles));
    if med > 0.0 {
        med.sqrt()
    } else {
        1.0
    }
}

/// Gradient of `log Σ_j k(θ_i, θ_j)` with respect to `θ_i`, one row per
/// particle. This is the vector subtracted from the attraction.
pub fn repulsion_grad_kde(particles: &Matrix, h: f64) -> Matrix {
    let (p, m) = particles.shape();
    let k = rbf_gram(particles, h);
    let inv_h2 = 1.0 / (h * h);
    let mut out = Matrix::zeros(p, m);
    for i in 0..p {
        let ti = particles.row(i);
        let mut denom = 0.0;
        let row = out.row_mut(i);
        for j in 0..p {
            let kij = k[(i, j)];
            denom += kij;
            if i == j {
                continue;
            }
            for ((r, a), b) in row.iter_mut().zip(ti).zip(particles.row(j)) {
                *r -= kij * (a - b) * inv_h2;
            }
        }
        row.iter_mut().for_each(|r| *r /= denom);
    }
    out
}

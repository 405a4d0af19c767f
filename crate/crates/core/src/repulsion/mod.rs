//! Particle updates with kernel repulsion.
//!
//! A [`ParticleSet`] holds `P` flattened parameter vectors. One step moves
//! each particle along its attraction (log-posterior gradient) minus a
//! repulsion vector computed jointly from the whole set:
//!
//! ```text
//! θ_i ← θ_i + step · (attraction_i − repulsion_i)
//! ```
//!
//! The repulsion vector is an estimate of `∇ log q(θ_i)`, the score of the
//! density the particles currently form, so subtracting it pushes particles
//! out of crowded regions. Three estimators are available: a kernel density
//! estimate (KDE), the Stein gradient estimator (SGE) and its spectral
//! variant (SSGE).

mod kernel;
mod stein;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use kernel::{median_bandwidth, median_distance, rbf_gram, repulsion_grad_kde};
pub use stein::{score_sge, score_ssge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Kde,
    Sge,
    Ssge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// `median_heuristic` for KDE, `median_distance` for SGE and SSGE.
    Auto,
    /// `sqrt(median squared distance / (2 ln(P+1)))`.
    MedianHeuristic,
    /// Median pairwise distance.
    MedianDistance,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub estimator: Estimator,
    pub bandwidth_mode: BandwidthMode,
    pub fixed_bandwidth: f64,
    pub sge_ridge: f64,
    pub ssge_eigen_threshold: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            estimator: Estimator::Kde,
            bandwidth_mode: BandwidthMode::Auto,
            fixed_bandwidth: 1.0,
            sge_ridge: 10.0,
            ssge_eigen_threshold: 0.01,
        }
    }
}

impl KernelConfig {
    pub fn with_estimator(estimator: Estimator) -> Self {
        KernelConfig {
            estimator,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_mode == BandwidthMode::Fixed && !(self.fixed_bandwidth > 0.0) {
            return Err(Error::invalid("fixed_bandwidth must be > 0"));
        }
        if !(self.sge_ridge > 0.0) {
            return Err(Error::invalid("sge_ridge must be > 0"));
        }
        let t = self.ssge_eigen_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid("ssge_eigen_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Bandwidth for the current particle configuration.
    pub fn bandwidth(&self, particles: &Matrix) -> f64 {
        let mode = match (self.bandwidth_mode, self.estimator) {
            (BandwidthMode::Auto, Estimator::Kde) => BandwidthMode::MedianHeuristic,
            (BandwidthMode::Auto, _) => BandwidthMode::MedianDistance,
            (m, _) => m,
        };
        match mode {
            BandwidthMode::MedianHeuristic => median_bandwidth(particles),
            BandwidthMode::MedianDistance => median_distance(particles),
            _ => self.fixed_bandwidth,
        }
    }
}

/// Isotropic Gaussian prior `N(0, stdev² I)` over each particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub stdev: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { stdev: 1.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stdev > 0.0) {
            return Err(Error::invalid("prior stdev must be > 0"));
        }
        Ok(())
    }

    /// Adds `∇ log p(θ) = −θ / stdev²` to `grad`.
    pub fn add_grad_log_prior(&self, theta: &[f64], grad: &mut [f64]) {
        let inv = 1.0 / (self.stdev * self.stdev);
        for (g, t) in grad.iter_mut().zip(theta) {
            *g -= t * inv;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleRole {
    LurTransform,
    ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Matrix,
    role: ParticleRole,
}

impl ParticleSet {
    pub fn new(particles: Matrix, role: ParticleRole) -> Result<Self> {
        if particles.rows() < 2 {
            return Err(Error::invalid(format!(
                "a particle set needs at least 2 particles, got {}",
                particles.rows()
            )));
        }
        if !particles.is_finite() {
            return Err(Error::invalid("particles must be finite"));
        }
        Ok(ParticleSet { particles, role })
    }

    pub fn particles(&self) -> &Matrix {
        &self.particles
    }

    pub fn into_particles(self) -> Matrix {
        self.particles
    }

    pub fn role(&self) -> ParticleRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.particles.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    /// Mean Euclidean distance over all unordered particle pairs.
    pub fn mean_pairwise_distance(&self) -> f64 {
        mean_pairwise_distance(&self.particles)
    }
}

pub fn mean_pairwise_distance(particles: &Matrix) -> f64 {
    let p = particles.rows();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..p {
        for j in 0..i {
            total += crate::numerics::sq_dist(particles.row(i), particles.row(j)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Repulsion vectors for every particle under the configured estimator.
pub fn repulsion(particles: &Matrix, kernel: &KernelConfig) -> Result<Matrix> {
    let h = kernel.bandwidth(particles);
    match kernel.estimator {
        Estimator::Kde => Ok(repulsion_grad_kde(particles, h)),
        Estimator::Sge => score_sge(particles, h, kernel.sge_ridge),
        Estimator::Ssge => score_ssge(particles, h, kernel.ssge_eigen_threshold),
    }
}

/// One joint update of the particle set.
pub fn repulsive_step(
    set: &ParticleSet,
    attraction: &Matrix,
    kernel: &KernelConfig,
    step_size: f64,
) -> Result<ParticleSet> {
    kernel.validate()?;
    let rep = repulsion(&set.particles, kernel)?;
    apply_update(set, attraction, &rep, step_size)
}

/// `θ_i ← θ_i + step · (attraction_i − repulsion_i)` with precomputed
/// repulsion vectors.
pub fn apply_update(
    set: &ParticleSet,
    attraction: &Matrix,
    repulsion: &Matrix,
    step_size: f64,
) -> Result<ParticleSet> {
    if attraction.shape() != set.particles.shape() || repulsion.shape() != set.particles.shape() {
        return Err(Error::invalid(format!(
            "update shape mismatch: particles {:?}, attraction {:?}, repulsion {:?}",
            set.particles.shape(),
            attraction.shape(),
            repulsion.shape()
        )));
    }
    let mut next = set.particles.clone();
    for ((t, a), r) in next
        .as_mut_slice()
        .iter_mut()
        .zip(attraction.as_slice())
        .zip(repulsion.as_slice())
    {
        *t += step_size * (a - r);
    }
    if !next.is_finite() {
        return Err(Error::numeric("particle update produced non-finite values"));
    }
    Ok(ParticleSet {
        particles: next,
        role: set.role,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sq_dist, sym_eigh, Rng};

    fn random_particles(p: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(p, m, |_, _| rng.normal())
    }

    #[test]
    fn gram_closed_forms() {
        let same = Matrix::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0]]).unwrap();
        let k = rbf_gram(&same, 0.7);
        assert!(k.as_slice().iter().all(|&v| v == 1.0));

        let h = 0.8;
        let d = h * 2f64.sqrt();
        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![d, 0.0]]).unwrap();
        let k = rbf_gram(&two, h);
        assert!((k[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn gram_is_psd() {
        for seed in 0..10 {
            let x = random_particles(5, 3, seed);
            let k = rbf_gram(&x, median_bandwidth(&x));
            let (vals, _) = sym_eigh(&k).unwrap();
            assert!(vals.iter().all(|&v| v >= -1e-10), "{vals:?}");
        }
    }

    #[test]
    fn median_bandwidth_cases() {
        let same = Matrix::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert_eq!(median_bandwidth(&same), 1.0);

        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let expect = (25.0 / (2.0 * 3f64.ln())).sqrt();
        assert!((median_bandwidth(&two) - expect).abs() < 1e-15);

        let x = random_particles(5, 3, 11);
        let mut d: Vec<f64> = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                d.push(sq_dist(x.row(i), x.row(j)));
            }
        }
        assert_eq!(d.len(), 10);
        d.sort_by(f64::total_cmp);
        let med = 0.5 * (d[4] + d[5]);
        let expect = (med / (2.0 * 6f64.ln())).sqrt();
        assert!((median_bandwidth(&x) - expect).abs() < 1e-14);
    }

    fn log_kde(x: &Matrix, i: usize, h: f64) -> f64 {
        (0..x.rows())
            .map(|j| (-sq_dist(x.row(i), x.row(j)) / (2.0 * h * h)).exp())
            .sum::<f64>()
            .ln()
    }

    #[test]
    fn kde_matches_finite_differences() {
        for seed in 0..20 {
            let p = 2 + (seed as usize % 4);
            let m = 1 + (seed as usize % 4);
            let x = random_particles(p, m, 100 + seed);
            let h = median_bandwidth(&x);
            let r = repulsion_grad_kde(&x, h);
            for i in 0..p {
                for c in 0..m {
                    let eps = 1e-6;
                    let mut xp = x.clone();
                    xp[(i, c)] += eps;
                    let mut xm = x.clone();
                    xm[(i, c)] -= eps;
                    let fd = (log_kde(&xp, i, h) - log_kde(&xm, i, h)) / (2.0 * eps);
                    let err = (fd - r[(i, c)]).abs() / fd.abs().max(r[(i, c)].abs()).max(1e-3);
                    assert!(err < 1e-5, "seed {seed} i {i} c {c}: {fd} vs {}", r[(i, c)]);
                }
            }
        }
    }

    #[test]
    fn kde_identical_and_antisymmetric() {
        let same = Matrix::from_rows(&vec![vec![0.5, -0.25]; 2]).unwrap();
        let r = repulsion_grad_kde(&same, median_bandwidth(&same));
        assert!(r.as_slice().iter().all(|&v| v == 0.0));

        let two = random_particles(2, 4, 3);
        let r = repulsion_grad_kde(&two, median_bandwidth(&two));
        for c in 0..4 {
            assert_eq!(r[(0, c)], -r[(1, c)]);
        }
    }

    #[test]
    fn sge_vanishes_with_huge_ridge() {
        let x = random_particles(30, 2, 5);
        let h = median_distance(&x);
        let small = score_sge(&x, h, 1.0).unwrap().max_abs();
        let big = score_sge(&x, h, 1e12).unwrap().max_abs();
        assert!(big < 1e-9 * small.max(1.0), "{big} vs {small}");
    }

    #[test]
    fn ssge_single_pair_near_zero_at_cluster_center() {
        let mut rng = Rng::new(9);
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0]];
        for _ in 0..40 {
            let v = 0.01 * rng.normal();
            rows.push(vec![v]);
            rows.push(vec![-v]);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let g = score_ssge(&x, median_distance(&x), 1.0).unwrap();
        assert!(g[(0, 0)].abs() < 1e-8, "{}", g[(0, 0)]);
    }

    #[test]
    fn ssge_rejects_bad_threshold() {
        let x = random_particles(5, 1, 1);
        assert!(score_ssge(&x, 1.0, 0.0).is_err());
        assert!(score_ssge(&x, 1.0, 1.5).is_err());
    }

    #[test]
    fn zero_step_is_identity() {
        let x = random_particles(4, 3, 8);
        let set = ParticleSet::new(x.clone(), ParticleRole::LurTransform).unwrap();
        let attraction = random_particles(4, 3, 9);
        for est in [Estimator::Kde, Estimator::Sge, Estimator::Ssge] {
            let next =
                repulsive_step(&set, &attraction, &KernelConfig::with_estimator(est), 0.0).unwrap();
            assert_eq!(next.particles(), &x);
        }
    }

    #[test]
    fn zero_repulsion_is_gradient_ascent() {
        let x = random_particles(3, 2, 12);
        let set = ParticleSet::new(x.clone(), ParticleRole::ClassifierHead).unwrap();
        let a = random_particles(3, 2, 13);
        let next = apply_update(&set, &a, &Matrix::zeros(3, 2), 0.1).unwrap();
        for (i, v) in next.particles().as_slice().iter().enumerate() {
            assert_eq!(*v, x.as_slice()[i] + 0.1 * a.as_slice()[i]);
        }
    }

    #[test]
    fn identical_particles_stay_identical() {
        let x = Matrix::from_rows(&vec![vec![0.2, 0.4, -1.0]; 2]).unwrap();
        let a = Matrix::from_rows(&vec![vec![1.0, -0.5, 0.25]; 2]).unwrap();
        let mut set = ParticleSet::new(x, ParticleRole::LurTransform).unwrap();
        for _ in 0..5 {
            set = repulsive_step(&set, &a, &KernelConfig::default(), 0.05).unwrap();
            assert_eq!(set.particles().row(0), set.particles().row(1));
        }
    }

    #[test]
    fn two_particles_drift_apart() {
        let x = Matrix::from_rows(&[vec![0.0, 0.1], vec![0.3, -0.2]]).unwrap();
        let zero = Matrix::zeros(2, 2);
        let mut set = ParticleSet::new(x, ParticleRole::LurTransform).unwrap();
        let mut d = set.mean_pairwise_distance();
        for _ in 0..10 {
            set = repulsive_step(&set, &zero, &KernelConfig::default(), 0.1).unwrap();
            let next = set.mean_pairwise_distance();
            assert!(next > d, "{next} <= {d}");
            d = next;
        }
    }

    #[test]
    fn particle_set_needs_two() {
        assert!(ParticleSet::new(Matrix::zeros(1, 3), ParticleRole::LurTransform).is_err());
    }

    #[test]
    fn config_validation() {
        let mut k = KernelConfig::default();
        assert!(k.validate().is_ok());
        k.bandwidth_mode = BandwidthMode::Fixed;
        k.fixed_bandwidth = 0.0;
        assert!(k.validate().is_err());
        let k = KernelConfig {
            sge_ridge: 0.0,
            ..Default::default()
        };
        assert!(k.validate().is_err());
    }
}

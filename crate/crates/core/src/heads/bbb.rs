use serde::{Deserialize, Serialize};

use super::linear::LinearHead;
use super::lur::check_latent;
use super::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Matrix, Rng};

/// Mean-field Gaussian linear layer: `w = μ + softplus(ρ) · ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbbHead {
    pub mu: LinearHead,
    pub rho: LinearHead,
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p²))` for one coordinate.
pub fn kl_gaussian(mu: f64, sigma: f64, prior_sigma: f64) -> f64 {
    (prior_sigma / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * prior_sigma * prior_sigma) - 0.5
}

impl BbbHead {
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mu.num_classes()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.rho.is_finite()
    }

    /// Total KL of the variational posterior from the isotropic prior.
    pub fn kl(&self, prior_stdev: f64) -> f64 {
        self.mu
            .flatten()
            .iter()
            .zip(self.rho.flatten())
            .map(|(&m, r)| kl_gaussian(m, softplus(r), prior_stdev))
            .sum()
    }

    /// Draws `ε ~ N(0, I)` (weights row-major, then bias) and returns the
    /// sampled layer together with `ε`.
    pub fn sample(&self, rng: &mut Rng) -> (LinearHead, Vec<f64>) {
        let mu = self.mu.flatten();
        let rho = self.rho.flatten();
        let eps: Vec<f64> = (0..mu.len()).map(|_| rng.normal()).collect();
        let w: Vec<f64> = mu
            .iter()
            .zip(&rho)
            .zip(&eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        (
            LinearHead::unflatten(self.num_classes(), self.dim(), &w),
            eps,
        )
    }

    /// One stochastic step of the evidence lower bound
    /// `mean CE + (β / N) · KL`, with a single weight sample per batch.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn sgd_step(
        &mut self,
        features: &Matrix,
        labels: &[usize],
        rows: &[usize],
        n_train: usize,
        prior_stdev: f64,
        kl_weight: f64,
        lr: f64,
        rng: &mut Rng,
    ) -> f64 {
        let (w, eps) = self.sample(rng);
        let mut gw = LinearHead::zeros(self.num_classes(), self.dim());
        let ce = w.accumulate(features, labels, rows, &mut gw);
        let kl_scale = kl_weight / n_train as f64;
        let loss = ce + kl_scale * self.kl(prior_stdev);

        let gw = gw.flatten();
        let mu = self.mu.flatten();
        let rho = self.rho.flatten();
        let inv_p2 = 1.0 / (prior_stdev * prior_stdev);
        let mut new_mu = Vec::with_capacity(mu.len());
        let mut new_rho = Vec::with_capacity(rho.len());
        for k in 0..mu.len() {
            let sigma = softplus(rho[k]);
            let g_mu = gw[k] + kl_scale * mu[k] * inv_p2;
            let g_sigma = gw[k] * eps[k] + kl_scale * (-1.0 / sigma + sigma * inv_p2);
            let g_rho = g_sigma * sigmoid(rho[k]);
            new_mu.push(mu[k] - lr * g_mu);
            new_rho.push(rho[k] - lr * g_rho);
        }
        self.mu = LinearHead::unflatten(self.num_classes(), self.dim(), &new_mu);
        self.rho = LinearHead::unflatten(self.num_classes(), self.dim(), &new_rho);
        loss
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64], samples: usize, rng: &mut Rng) -> Matrix {
        let mut probs = Matrix::zeros(samples, self.num_classes());
        for s in 0..samples {
            let (w, _) = self.sample(rng);
            probs.row_mut(s).copy_from_slice(&w.probs(z));
        }
        probs
    }
}

/// `S` predictions, each from a fresh weight sample.
pub fn bbb_forward(
    head: &BbbHead,
    z: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<PredictiveDistribution> {
    if samples == 0 {
        return Err(Error::invalid("BBB forward needs at least one sample"));
    }
    check_latent(z, head.dim())?;
    Ok(PredictiveDistribution {
        probs: head.forward_unchecked(z, samples, rng),
        latent_reps: None,
    })
}

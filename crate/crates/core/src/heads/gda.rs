use serde::{Deserialize, Serialize};

use crate::data::{LatentDataset, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, cholesky_log_det, forward_substitute, log_sum_exp, softmax_unchecked, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Shared,
    PerClass,
}

/// Class-conditional Gaussians over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaModel {
    pub means: Matrix,
    pub log_priors: Vec<f64>,
    pub covariance: Covariance,
    /// Cholesky factors of `Σ + εI`: one when shared, `C` otherwise.
    pub chols: Vec<Matrix>,
    pub log_dets: Vec<f64>,
}

/// Fits on the train rows of `ds`. Every class needs at least two rows.
pub fn gda_fit(ds: &LatentDataset, reg: f64, covariance: Covariance) -> Result<GdaModel> {
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(Error::invalid(format!(
            "GDA regularization must be >= 0, got {reg}"
        )));
    }
    let rows = ds.indices_of(SplitTag::Train);
    let c = ds.num_classes();
    let d = ds.dim();
    let counts = ds.class_counts(SplitTag::Train);
    if let Some(k) = counts.iter().position(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "GDA needs >= 2 train rows per class; class `{}` has {}",
            ds.class_names()[k],
            counts[k]
        )));
    }
    let x = ds.features();
    let y = ds.labels();

    let mut means = Matrix::zeros(c, d);
    for &r in &rows {
        for (m, v) in means.row_mut(y[r]).iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        let n = count as f64;
        means.row_mut(k).iter_mut().for_each(|m| *m /= n);
    }

    let groups = match covariance {
        Covariance::Shared => 1,
        Covariance::PerClass => c,
    };
    let mut scatter = vec![Matrix::zeros(d, d); groups];
    for &r in &rows {
        let g = if groups == 1 { 0 } else { y[r] };
        let diff: Vec<f64> = x
            .row(r)
            .iter()
            .zip(means.row(y[r]))
            .map(|(a, b)| a - b)
            .collect();
        scatter[g].add_outer(1.0, &diff, &diff);
    }
    let mut chols = Vec::with_capacity(groups);
    let mut log_dets = Vec::with_capacity(groups);
    for (g, mut s) in scatter.into_iter().enumerate() {
        let n = if groups == 1 { rows.len() } else { counts[g] } as f64;
        s.scale(1.0 / n);
        for i in 0..d {
            s[(i, i)] += reg;
        }
        let l = cholesky(&s).map_err(|_| {
            Error::numeric(format!(
                "GDA covariance is singular after regularization (ε = {reg}); use a larger gda_reg"
            ))
        })?;
        log_dets.push(cholesky_log_det(&l));
        chols.push(l);
    }

    let total = rows.len() as f64;
    Ok(GdaModel {
        means,
        log_priors: counts.iter().map(|&n| (n as f64 / total).ln()).collect(),
        covariance,
        chols,
        log_dets,
    })
}

/// Shared-covariance fit; the scorer is [`GdaModel::score`].
pub fn gda_fit_score(ds: &LatentDataset, reg: f64) -> Result<GdaModel> {
    gda_fit(ds, reg, Covariance::Shared)
}

impl GdaModel {
    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    /// `ln π_c + ln N(z; μ_c, Σ_c)` for every class.
    pub fn class_log_joint(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.num_classes())
            .map(|k| {
                let g = if self.chols.len() == 1 { 0 } else { k };
                let diff: Vec<f64> = z
                    .iter()
                    .zip(self.means.row(k))
                    .map(|(a, b)| a - b)
                    .collect();
                let w = forward_substitute(&self.chols[g], &diff);
                let maha: f64 = w.iter().map(|v| v * v).sum();
                self.log_priors[k] - 0.5 * (d * ln_2pi + self.log_dets[g] + maha)
            })
            .collect()
    }

    /// `−ln Σ_c π_c N(z; μ_c, Σ_c)`; higher means more out-of-distribution.
    pub fn score(&self, z: &[f64]) -> f64 {
        -log_sum_exp(&self.class_log_joint(z))
    }

    /// Class posterior `p(c | z)`.
    pub fn posterior(&self, z: &[f64]) -> Vec<f64> {
        softmax_unchecked(&self.class_log_joint(z))
    }

    pub fn is_finite(&self) -> bool {
        self.means.is_finite()
            && self.chols.iter().all(Matrix::is_finite)
            && self.log_dets.iter().all(|v| v.is_finite())
    }
}

use serde::{Deserialize, Serialize};

use super::linear::{Affine, LinearHead};
use super::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One shared classifier applied to the latent and to `n` affine
/// transformations of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LurHead {
    pub classifier: LinearHead,
    pub transforms: Vec<Affine>,
}

/// Gradients with the same layout as [`LurHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct LurGrads {
    pub classifier: LinearHead,
    pub transforms: Vec<Affine>,
}

impl LurHead {
    pub fn new(classifier: LinearHead, transforms: Vec<Affine>) -> Result<Self> {
        let d = classifier.dim();
        if let Some(i) = transforms.iter().position(|t| t.dim() != d) {
            return Err(Error::invalid(format!(
                "transform {i} has dimension {} but the classifier expects {d}",
                transforms[i].dim()
            )));
        }
        Ok(LurHead {
            classifier,
            transforms,
        })
    }

    pub fn dim(&self) -> usize {
        self.classifier.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn num_transforms(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_finite(&self) -> bool {
        self.classifier.is_finite() && self.transforms.iter().all(Affine::is_finite)
    }

    pub(crate) fn zero_grads(&self) -> LurGrads {
        LurGrads {
            classifier: LinearHead::zeros(self.num_classes(), self.dim()),
            transforms: vec![Affine::zeros(self.dim()); self.num_transforms()],
        }
    }

    /// Row 0 is `z`, row `i` is `W_i z + b_i`.
    pub fn latent_reps(&self, z: &[f64]) -> Matrix {
        let d = self.dim();
        let mut reps = Matrix::zeros(self.num_transforms() + 1, d);
        reps.row_mut(0).copy_from_slice(z);
        for (i, t) in self.transforms.iter().enumerate() {
            reps.row_mut(i + 1).copy_from_slice(&t.apply(z));
        }
        reps
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64]) -> PredictiveDistribution {
        let reps = self.latent_reps(z);
        let c = self.num_classes();
        let mut probs = Matrix::zeros(reps.rows(), c);
        for (s, rep) in reps.row_iter().enumerate() {
            probs
                .row_mut(s)
                .copy_from_slice(&self.classifier.probs(rep));
        }
        PredictiveDistribution {
            probs,
            latent_reps: Some(reps),
        }
    }

    /// Summed cross-entropy over all `n+1` paths, averaged over `rows`.
    /// Gradients are added into `grads`.
    pub(crate) fn accumulate(
        &self,
        features: &Matrix,
        labels: &[usize],
        rows: &[usize],
        grads: &mut LurGrads,
    ) -> f64 {
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        for &r in rows {
            let z = features.row(r);
            let y = labels[r];
            let (l, _) = self.classifier.backprop(z, y, scale, &mut grads.classifier);
            loss += l;
            for (t, gt) in self.transforms.iter().zip(grads.transforms.iter_mut()) {
                let zt = t.apply(z);
                let (l, dz) = self
                    .classifier
                    .backprop(&zt, y, scale, &mut grads.classifier);
                loss += l;
                t.accumulate_grad(z, &dz, gt);
            }
        }
        loss * scale
    }
}

pub fn lur_forward(head: &LurHead, z: &[f64]) -> Result<PredictiveDistribution> {
    check_latent(z, head.dim())?;
    Ok(head.forward_unchecked(z))
}

/// Batch loss `mean_b [CE(θ(z_b), y_b) + Σ_i CE(θ(W_i z_b + b_i), y_b)]` and
/// its gradient with respect to every parameter.
pub fn lur_loss_and_grads(head: &LurHead, z: &Matrix, y: &[usize]) -> Result<(f64, LurGrads)> {
    if z.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if z.rows() != y.len() {
        return Err(Error::invalid(format!(
            "batch has {} rows but {} labels",
            z.rows(),
            y.len()
        )));
    }
    if z.cols() != head.dim() {
        return Err(Error::invalid(format!(
            "batch dimension {} does not match head dimension {}",
            z.cols(),
            head.dim()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= head.num_classes()) {
        return Err(Error::Index {
            index: bad,
            len: head.num_classes(),
        });
    }
    let rows: Vec<usize> = (0..z.rows()).collect();
    let mut grads = head.zero_grads();
    let loss = head.accumulate(z, y, &rows, &mut grads);
    Ok((loss, grads))
}

pub(crate) fn check_latent(z: &[f64], dim: usize) -> Result<()> {
    if z.len() != dim {
        return Err(Error::invalid(format!(
            "latent has length {} but the head expects {dim}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("latent contains non-finite values"));
    }
    Ok(())
}

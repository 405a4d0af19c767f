use serde::{Deserialize, Serialize};

use crate::numerics::{axpy, cross_entropy_unchecked, dot, softmax_unchecked, Matrix, Rng};

/// Linear softmax classifier `logits = W z + b` with `W` stored `C × D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearHead {
            weight: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    /// Weights from `N(0, stdev²)`, zero bias.
    pub fn gaussian(classes: usize, dim: usize, stdev: f64, rng: &mut Rng) -> Self {
        LinearHead {
            weight: Matrix::from_fn(classes, dim, |_, _| stdev * rng.normal()),
            bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, z) + b)
            .collect()
    }

    pub fn probs(&self, z: &[f64]) -> Vec<f64> {
        softmax_unchecked(&self.logits(z))
    }

    /// Cross-entropy for one instance. Accumulates `scale · ∂loss/∂θ` into
    /// `grad` and returns the loss together with `scale · ∂loss/∂z`.
    pub fn backprop(
        &self,
        z: &[f64],
        label: usize,
        scale: f64,
        grad: &mut LinearHead,
    ) -> (f64, Vec<f64>) {
        let (loss, mut g) = cross_entropy_unchecked(&self.logits(z), label);
        g.iter_mut().for_each(|v| *v *= scale);
        grad.weight.add_outer(1.0, &g, z);
        axpy(1.0, &g, &mut grad.bias);
        (loss, self.weight.tr_matvec(&g))
    }

    /// Mean cross-entropy over `rows`; gradients are added into `grad`.
    pub(crate) fn accumulate(
        &self,
        features: &Matrix,
        labels: &[usize],
        rows: &[usize],
        grad: &mut LinearHead,
    ) -> f64 {
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        for &r in rows {
            let (l, _) = self.backprop(features.row(r), labels[r], scale, grad);
            loss += l;
        }
        loss * scale
    }

    /// Pulls an arbitrary upstream logit gradient `g` back to the parameters
    /// and returns `Wᵀ g`.
    pub fn backprop_logit_grad(&self, z: &[f64], g: &[f64], grad: &mut LinearHead) -> Vec<f64> {
        grad.weight.add_outer(1.0, g, z);
        axpy(1.0, g, &mut grad.bias);
        self.weight.tr_matvec(g)
    }

    /// `θ ← θ − lr · g`
    pub fn sgd_update(&mut self, grad: &LinearHead, lr: f64) {
        axpy(-lr, grad.weight.as_slice(), self.weight.as_mut_slice());
        axpy(-lr, &grad.bias, &mut self.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Weights (row-major) followed by bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn unflatten(classes: usize, dim: usize, flat: &[f64]) -> Self {
        debug_assert_eq!(flat.len(), classes * dim + classes);
        let (w, b) = flat.split_at(classes * dim);
        LinearHead {
            weight: Matrix::from_fn(classes, dim, |r, c| w[r * dim + c]),
            bias: b.to_vec(),
        }
    }
}

/// Affine map `z ↦ W z + b` on the latent space (`W` is `D × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(dim: usize) -> Self {
        Affine {
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Affine {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.weight.matvec(z);
        axpy(1.0, &self.bias, &mut out);
        out
    }

    /// Accumulates the parameter gradient given `dz_out = ∂loss/∂(Wz+b)`.
    pub fn accumulate_grad(&self, z: &[f64], dz_out: &[f64], grad: &mut Affine) {
        grad.weight.add_outer(1.0, dz_out, z);
        axpy(1.0, dz_out, &mut grad.bias);
    }

    pub fn sgd_update(&mut self, grad: &Affine, lr: f64) {
        axpy(-lr, grad.weight.as_slice(), self.weight.as_mut_slice());
        axpy(-lr, &grad.bias, &mut self.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.dim() * self.dim() + self.dim()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weight.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn unflatten(dim: usize, flat: &[f64]) -> Self {
        debug_assert_eq!(flat.len(), dim * dim + dim);
        let (w, b) = flat.split_at(dim * dim);
        Affine {
            weight: Matrix::from_fn(dim, dim, |r, c| w[r * dim + c]),
            bias: b.to_vec(),
        }
    }
}

//! Classifier heads over fixed latents.
//!
//! Every head maps a latent `z` to a [`PredictiveDistribution`]: `S` class
//! probability rows, plus the latent representations for the LUR family.
//!
//! | variant        | S     | parameters                                   |
//! |----------------|-------|----------------------------------------------|
//! | `regular`      | 1     | one linear classifier                        |
//! | `sub_ensemble` | n     | n independent classifiers                    |
//! | `lur`          | n + 1 | one classifier shared by `z` and n affine maps of `z` |
//! | `rlur`         | n + 1 | as `lur`, affine maps trained as particles   |
//! | `rlle`         | n     | as `sub_ensemble`, classifiers trained as particles |
//! | `bbb_ll`       | n     | mean-field Gaussian classifier, n samples    |
//! | `gda`          | 1     | class Gaussians; posterior plus a density score |

mod bbb;
mod gda;
mod io;
mod linear;
mod lur;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::repulsion::{KernelConfig, PriorConfig};

pub use bbb::{bbb_forward, kl_gaussian, BbbHead};
pub use gda::{gda_fit, gda_fit_score, Covariance, GdaModel};
pub use io::{decode_model, encode_model, sidecar_path};
pub use linear::{Affine, LinearHead};
pub use lur::{lur_forward, lur_loss_and_grads, LurGrads, LurHead};
pub use train::train_head;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Regular,
    SubEnsemble,
    Lur,
    Rlur,
    Rlle,
    BbbLl,
    Gda,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Regular,
        Variant::SubEnsemble,
        Variant::Lur,
        Variant::Rlur,
        Variant::Rlle,
        Variant::BbbLl,
        Variant::Gda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Regular => "regular",
            Variant::SubEnsemble => "sub_ensemble",
            Variant::Lur => "lur",
            Variant::Rlur => "rlur",
            Variant::Rlle => "rlle",
            Variant::BbbLl => "bbb_ll",
            Variant::Gda => "gda",
        }
    }

    /// Whether `members` changes the model.
    pub fn uses_members(self) -> bool {
        !matches!(self, Variant::Regular | Variant::Gda)
    }

    /// Whether the model is fit by SGD (GDA is closed-form).
    pub fn is_iterative(self) -> bool {
        self != Variant::Gda
    }

    /// Whether predictions carry latent representations.
    pub fn has_latent_reps(self) -> bool {
        matches!(self, Variant::Lur | Variant::Rlur)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant `{s}` ({})", names.join("|")))
            })
    }
}

/// Initialization of the LUR transformation layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformInit {
    /// Weights `N(0, stdev²)`, zero bias.
    Gaussian { stdev: f64 },
    /// Weights and bias `U(−1/√D, 1/√D)`.
    TorchUniform,
    /// `W = I`, `b = 0`.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionSpace {
    /// Particles are the flattened parameters.
    Weight,
    /// Particles are the concatenated logits over a fixed repulsion batch.
    Function,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepulsionConfig {
    pub kernel: KernelConfig,
    pub prior: PriorConfig,
    pub space: RepulsionSpace,
    /// Rows in the function-space repulsion batch.
    pub function_batch: usize,
    /// Turns the repulsion term off, leaving plain gradient ascent on the
    /// log posterior.
    pub enabled: bool,
}

impl Default for RepulsionConfig {
    fn default() -> Self {
        RepulsionConfig {
            kernel: KernelConfig::default(),
            prior: PriorConfig::default(),
            space: RepulsionSpace::Weight,
            function_batch: 32,
            enabled: true,
        }
    }
}

/// Training configuration of one head. The latent dimension and class count
/// come from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: Variant,
    /// Transformation layers (LUR family), classifiers (sub-ensemble, RLLE)
    /// or Monte Carlo samples (BBB).
    #[serde(default = "defaults::members")]
    pub members: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "defaults::classifier_init_stdev")]
    pub classifier_init_stdev: f64,
    #[serde(default = "defaults::transform_init")]
    pub transform_init: TransformInit,
    #[serde(default = "defaults::bbb_prior_stdev")]
    pub bbb_prior_stdev: f64,
    #[serde(default = "defaults::bbb_kl_weight")]
    pub bbb_kl_weight: f64,
    #[serde(default = "defaults::bbb_rho_init")]
    pub bbb_rho_init: f64,
    #[serde(default = "defaults::gda_reg")]
    pub gda_reg: f64,
    #[serde(default = "defaults::gda_covariance")]
    pub gda_covariance: Covariance,
    #[serde(default)]
    pub repulsion: RepulsionConfig,
}

mod defaults {
    use super::{Covariance, TransformInit};

    pub fn members() -> usize {
        10
    }
    pub fn learning_rate() -> f64 {
        1e-2
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        10
    }
    pub fn classifier_init_stdev() -> f64 {
        0.02
    }
    pub fn transform_init() -> TransformInit {
        TransformInit::Gaussian { stdev: 0.02 }
    }
    pub fn bbb_prior_stdev() -> f64 {
        1.0
    }
    pub fn bbb_kl_weight() -> f64 {
        1.0
    }
    pub fn bbb_rho_init() -> f64 {
        -5.0
    }
    pub fn gda_reg() -> f64 {
        1e-6
    }
    pub fn gda_covariance() -> Covariance {
        Covariance::Shared
    }
}

impl HeadConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        HeadConfig {
            variant,
            members: defaults::members(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed,
            classifier_init_stdev: defaults::classifier_init_stdev(),
            transform_init: defaults::transform_init(),
            bbb_prior_stdev: defaults::bbb_prior_stdev(),
            bbb_kl_weight: defaults::bbb_kl_weight(),
            bbb_rho_init: defaults::bbb_rho_init(),
            gda_reg: defaults::gda_reg(),
            gda_covariance: defaults::gda_covariance(),
            repulsion: RepulsionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_members = match self.variant {
            Variant::Regular | Variant::Gda | Variant::Lur => 0,
            Variant::SubEnsemble | Variant::BbbLl => 1,
            Variant::Rlur | Variant::Rlle => 2,
        };
        if self.members < min_members {
            return Err(Error::invalid(format!(
                "{} needs members >= {min_members}, got {}",
                self.variant, self.members
            )));
        }
        if self.variant.is_iterative() {
            if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
                return Err(Error::invalid("learning_rate must be positive and finite"));
            }
            if self.epochs == 0 {
                return Err(Error::invalid("epochs must be >= 1"));
            }
            if self.batch_size == 0 {
                return Err(Error::invalid("batch_size must be >= 1"));
            }
        }
        if !(self.classifier_init_stdev >= 0.0) {
            return Err(Error::invalid("classifier_init_stdev must be >= 0"));
        }
        if let TransformInit::Gaussian { stdev } = self.transform_init {
            if !(stdev >= 0.0) {
                return Err(Error::invalid("transform init stdev must be >= 0"));
            }
        }
        if self.variant == Variant::BbbLl {
            if !(self.bbb_prior_stdev > 0.0) {
                return Err(Error::invalid("bbb_prior_stdev must be > 0"));
            }
            if !(self.bbb_kl_weight >= 0.0) {
                return Err(Error::invalid("bbb_kl_weight must be >= 0"));
            }
            if !self.bbb_rho_init.is_finite() {
                return Err(Error::invalid("bbb_rho_init must be finite"));
            }
        }
        if self.variant == Variant::Gda && !(self.gda_reg >= 0.0) {
            return Err(Error::invalid("gda_reg must be >= 0"));
        }
        if matches!(self.variant, Variant::Rlur | Variant::Rlle) {
            self.repulsion.kernel.validate()?;
            self.repulsion.prior.validate()?;
            if self.repulsion.space == RepulsionSpace::Function
                && self.repulsion.function_batch == 0
            {
                return Err(Error::invalid("function_batch must be >= 1"));
            }
        }
        Ok(())
    }
}

/// `S` class-probability rows for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub probs: Matrix,
    /// `(n+1) × D` latent representations (LUR family only).
    pub latent_reps: Option<Matrix>,
}

impl PredictiveDistribution {
    pub fn num_samples(&self) -> usize {
        self.probs.rows()
    }

    pub fn mean_probs(&self) -> Vec<f64> {
        self.probs.column_means()
    }
}

/// Trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Linear(LinearHead),
    Ensemble(Vec<LinearHead>),
    Lur(LurHead),
    Bbb(BbbHead),
    Gda(GdaModel),
}

/// A trained head. Immutable; prediction takes `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub config: HeadConfig,
    pub dim: usize,
    pub classes: usize,
    pub params: HeadParams,
}

const PREDICT_STREAM: u64 = 0x5052_4544; // "PRED"

impl HeadModel {
    /// Predictions for every row of `features`. Sampling variants draw from
    /// a stream keyed on the config seed, so repeated calls agree.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<PredictiveDistribution>> {
        if features.cols() != self.dim {
            return Err(Error::invalid(format!(
                "features have dimension {} but the head expects {}",
                features.cols(),
                self.dim
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let mut rng = Rng::derive(self.config.seed, PREDICT_STREAM);
        Ok(features
            .row_iter()
            .map(|z| self.predict_one(z, &mut rng))
            .collect())
    }

    fn predict_one(&self, z: &[f64], rng: &mut Rng) -> PredictiveDistribution {
        let single = |p: Vec<f64>| PredictiveDistribution {
            probs: Matrix::from_fn(1, p.len(), |_, c| p[c]),
            latent_reps: None,
        };
        match &self.params {
            HeadParams::Linear(h) => single(h.probs(z)),
            HeadParams::Ensemble(hs) => {
                let mut probs = Matrix::zeros(hs.len(), self.classes);
                for (s, h) in hs.iter().enumerate() {
                    probs.row_mut(s).copy_from_slice(&h.probs(z));
                }
                PredictiveDistribution {
                    probs,
                    latent_reps: None,
                }
            }
            HeadParams::Lur(h) => h.forward_unchecked(z),
            HeadParams::Bbb(h) => PredictiveDistribution {
                probs: h.forward_unchecked(z, self.config.members, rng),
                latent_reps: None,
            },
            HeadParams::Gda(g) => single(g.posterior(z)),
        }
    }

    /// GDA density score per row (higher = more out-of-distribution);
    /// `None` for the other variants.
    pub fn density_scores(&self, features: &Matrix) -> Option<Vec<f64>> {
        match &self.params {
            HeadParams::Gda(g) => Some(features.row_iter().map(|z| g.score(z)).collect()),
            _ => None,
        }
    }

    /// Flattened particle parameters for the LUR family (transforms) and the
    /// ensembles (classifiers).
    pub fn particle_matrix(&self) -> Option<Matrix> {
        let rows: Vec<Vec<f64>> = match &self.params {
            HeadParams::Lur(h) => h.transforms.iter().map(Affine::flatten).collect(),
            HeadParams::Ensemble(hs) => hs.iter().map(LinearHead::flatten).collect(),
            _ => return None,
        };
        if rows.is_empty() {
            return None;
        }
        Matrix::from_rows(&rows).ok()
    }
}

//! Mini-batch SGD for every head variant.
//!
//! All variants draw their initial parameters and then the per-epoch
//! shuffles from one stream seeded by `config.seed`, in that order. A LUR
//! head with no transforms therefore consumes exactly the same random
//! numbers as a regular head and follows the same trajectory.
//!
//! The repulsive variants move their particles with
//! `θ ← θ + (lr/N) · (N·∇ mean log-lik + ∇ log prior − repulsion)`, so the
//! likelihood part matches a plain SGD step at `lr`.

use super::bbb::BbbHead;
use super::gda::gda_fit;
use super::linear::{Affine, LinearHead};
use super::lur::LurHead;
use super::{HeadConfig, HeadModel, HeadParams, RepulsionSpace, TransformInit, Variant};
use crate::data::{LatentDataset, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::repulsion::{apply_update, repulsion, ParticleRole, ParticleSet};

const NOISE_STREAM: u64 = 0x4e4f_4953; // "NOIS"

/// Trains `config.variant` on the train-tagged rows of `ds`.
pub fn train_head(config: &HeadConfig, ds: &LatentDataset) -> Result<HeadModel> {
    config.validate()?;
    let rows = ds.indices_of(SplitTag::Train);
    if rows.is_empty() {
        return Err(Error::invalid("dataset has no train rows"));
    }
    let d = ds.dim();
    let c = ds.num_classes();
    let ctx = Ctx {
        config,
        x: ds.features(),
        y: ds.labels(),
        rows: &rows,
    };
    let mut rng = Rng::new(config.seed);
    let stdev = config.classifier_init_stdev;

    let params = match config.variant {
        Variant::Gda => HeadParams::Gda(gda_fit(ds, config.gda_reg, config.gda_covariance)?),
        Variant::Regular => {
            let mut h = LinearHead::gaussian(c, d, stdev, &mut rng);
            ctx.run(&mut rng, |batch| {
                let mut g = LinearHead::zeros(c, d);
                let loss = h.accumulate(ctx.x, ctx.y, batch, &mut g);
                h.sgd_update(&g, config.learning_rate);
                Ok((loss, h.is_finite()))
            })?;
            HeadParams::Linear(h)
        }
        Variant::SubEnsemble => {
            let mut hs = init_members(config.members, c, d, stdev, &mut rng);
            ctx.run(&mut rng, |batch| {
                let mut loss = 0.0;
                for h in hs.iter_mut() {
                    let mut g = LinearHead::zeros(c, d);
                    loss += h.accumulate(ctx.x, ctx.y, batch, &mut g);
                    h.sgd_update(&g, config.learning_rate);
                }
                Ok((loss, hs.iter().all(LinearHead::is_finite)))
            })?;
            HeadParams::Ensemble(hs)
        }
        Variant::Lur => {
            let mut h = init_lur(config, c, d, &mut rng);
            ctx.run(&mut rng, |batch| {
                let mut g = h.zero_grads();
                let loss = h.accumulate(ctx.x, ctx.y, batch, &mut g);
                h.classifier.sgd_update(&g.classifier, config.learning_rate);
                for (t, gt) in h.transforms.iter_mut().zip(&g.transforms) {
                    t.sgd_update(gt, config.learning_rate);
                }
                Ok((loss, h.is_finite()))
            })?;
            HeadParams::Lur(h)
        }
        Variant::BbbLl => {
            let mut h = BbbHead {
                mu: LinearHead::gaussian(c, d, stdev, &mut rng),
                rho: LinearHead {
                    weight: Matrix::from_fn(c, d, |_, _| config.bbb_rho_init),
                    bias: vec![config.bbb_rho_init; c],
                },
            };
            let mut noise = Rng::derive(config.seed, NOISE_STREAM);
            ctx.run(&mut rng, |batch| {
                let loss = h.sgd_step(
                    ctx.x,
                    ctx.y,
                    batch,
                    ctx.rows.len(),
                    config.bbb_prior_stdev,
                    config.bbb_kl_weight,
                    config.learning_rate,
                    &mut noise,
                );
                Ok((loss, h.is_finite()))
            })?;
            HeadParams::Bbb(h)
        }
        Variant::Rlur => {
            let mut h = init_lur(config, c, d, &mut rng);
            let fbatch = function_batch(&ctx, &mut rng);
            ctx.run(&mut rng, |batch| {
                let loss = rlur_step(&ctx, &mut h, batch, &fbatch)?;
                Ok((loss, h.is_finite()))
            })?;
            HeadParams::Lur(h)
        }
        Variant::Rlle => {
            let mut hs = init_members(config.members, c, d, stdev, &mut rng);
            let fbatch = function_batch(&ctx, &mut rng);
            ctx.run(&mut rng, |batch| {
                let loss = rlle_step(&ctx, &mut hs, batch, &fbatch)?;
                Ok((loss, hs.iter().all(LinearHead::is_finite)))
            })?;
            HeadParams::Ensemble(hs)
        }
    };

    Ok(HeadModel {
        config: config.clone(),
        dim: d,
        classes: c,
        params,
    })
}

struct Ctx<'a> {
    config: &'a HeadConfig,
    x: &'a Matrix,
    y: &'a [usize],
    rows: &'a [usize],
}

impl Ctx<'_> {
    /// Runs the epochs. `step` returns the batch loss and whether all
    /// parameters are still finite.
    fn run(
        &self,
        rng: &mut Rng,
        mut step: impl FnMut(&[usize]) -> Result<(f64, bool)>,
    ) -> Result<()> {
        let mut order = self.rows.to_vec();
        for epoch in 1..=self.config.epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(self.config.batch_size) {
                let (loss, finite) = step(batch).map_err(|e| match e {
                    Error::Numeric(detail) => Error::TrainingDiverged { epoch, detail },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        detail: format!("loss is {loss}"),
                    });
                }
                if !finite {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        detail: "parameters became non-finite".into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn n_train(&self) -> f64 {
        self.rows.len() as f64
    }
}

fn init_members(n: usize, c: usize, d: usize, stdev: f64, rng: &mut Rng) -> Vec<LinearHead> {
    (0..n)
        .map(|_| LinearHead::gaussian(c, d, stdev, &mut Rng::new(rng.next_u64())))
        .collect()
}

fn init_lur(config: &HeadConfig, c: usize, d: usize, rng: &mut Rng) -> LurHead {
    let classifier = LinearHead::gaussian(c, d, config.classifier_init_stdev, rng);
    let transforms = (0..config.members)
        .map(|_| init_transform(config.transform_init, d, rng))
        .collect();
    LurHead {
        classifier,
        transforms,
    }
}

fn init_transform(init: TransformInit, d: usize, rng: &mut Rng) -> Affine {
    match init {
        TransformInit::Gaussian { stdev } => Affine {
            weight: Matrix::from_fn(d, d, |_, _| stdev * rng.normal()),
            bias: vec![0.0; d],
        },
        TransformInit::TorchUniform => {
            let a = 1.0 / (d as f64).sqrt();
            Affine {
                weight: Matrix::from_fn(d, d, |_, _| rng.uniform_range(-a, a)),
                bias: (0..d).map(|_| rng.uniform_range(-a, a)).collect(),
            }
        }
        TransformInit::Identity => Affine::identity(d),
    }
}

/// Fixed rows for function-space repulsion; empty in weight space.
fn function_batch(ctx: &Ctx, rng: &mut Rng) -> Vec<usize> {
    let rep = &ctx.config.repulsion;
    if rep.space != RepulsionSpace::Function {
        return Vec::new();
    }
    let mut rows = ctx.rows.to_vec();
    rng.shuffle(&mut rows);
    rows.truncate(rep.function_batch);
    rows
}

/// `N · (−∇ mean CE) + ∇ log prior` per particle.
fn attraction(ctx: &Ctx, particles: &Matrix, ce_grads: &Matrix) -> Matrix {
    let n = ctx.n_train();
    let mut a = Matrix::from_fn(ce_grads.rows(), ce_grads.cols(), |i, j| {
        -n * ce_grads[(i, j)]
    });
    for i in 0..particles.rows() {
        ctx.config
            .repulsion
            .prior
            .add_grad_log_prior(particles.row(i), a.row_mut(i));
    }
    a
}

fn particle_update(
    ctx: &Ctx,
    particles: Matrix,
    ce_grads: &Matrix,
    rep: Matrix,
    role: ParticleRole,
) -> Result<Matrix> {
    let attr = attraction(ctx, &particles, ce_grads);
    let set = ParticleSet::new(particles, role)?;
    let step = ctx.config.learning_rate / ctx.n_train();
    Ok(apply_update(&set, &attr, &rep, step)?.into_particles())
}

fn rlur_step(ctx: &Ctx, h: &mut LurHead, batch: &[usize], fbatch: &[usize]) -> Result<f64> {
    let cfg = &ctx.config.repulsion;
    let mut g = h.zero_grads();
    let loss = h.accumulate(ctx.x, ctx.y, batch, &mut g);
    let d = h.dim();
    let particles = rows_of(h.transforms.iter().map(Affine::flatten));
    let ce = rows_of(g.transforms.iter().map(Affine::flatten));

    let rep = if !cfg.enabled {
        Matrix::zeros(particles.rows(), particles.cols())
    } else if cfg.space == RepulsionSpace::Weight {
        repulsion(&particles, &cfg.kernel)?
    } else {
        // f_i = concat_b θ_LL(W_i z_b + b_i); pull back through W_LL and the
        // affine map.
        let c = h.num_classes();
        let logits = rows_of(h.transforms.iter().map(|t| {
            fbatch
                .iter()
                .flat_map(|&r| h.classifier.logits(&t.apply(ctx.x.row(r))))
                .collect()
        }));
        let rf = repulsion(&logits, &cfg.kernel)?;
        rows_of(h.transforms.iter().enumerate().map(|(i, t)| {
            let mut gt = Affine::zeros(d);
            for (b, &r) in fbatch.iter().enumerate() {
                let u = h
                    .classifier
                    .weight
                    .tr_matvec(&rf.row(i)[b * c..(b + 1) * c]);
                t.accumulate_grad(ctx.x.row(r), &u, &mut gt);
            }
            gt.flatten()
        }))
    };

    h.classifier
        .sgd_update(&g.classifier, ctx.config.learning_rate);
    let next = particle_update(ctx, particles, &ce, rep, ParticleRole::LurTransform)?;
    for (i, t) in h.transforms.iter_mut().enumerate() {
        *t = Affine::unflatten(d, next.row(i));
    }
    Ok(loss)
}

fn rlle_step(ctx: &Ctx, hs: &mut [LinearHead], batch: &[usize], fbatch: &[usize]) -> Result<f64> {
    let cfg = &ctx.config.repulsion;
    let (c, d) = (hs[0].num_classes(), hs[0].dim());
    let mut loss = 0.0;
    let mut ce_rows = Vec::with_capacity(hs.len());
    for h in hs.iter() {
        let mut g = LinearHead::zeros(c, d);
        loss += h.accumulate(ctx.x, ctx.y, batch, &mut g);
        ce_rows.push(g.flatten());
    }
    let ce = rows_of(ce_rows.into_iter());
    let particles = rows_of(hs.iter().map(LinearHead::flatten));

    let rep = if !cfg.enabled {
        Matrix::zeros(particles.rows(), particles.cols())
    } else if cfg.space == RepulsionSpace::Weight {
        repulsion(&particles, &cfg.kernel)?
    } else {
        let logits = rows_of(hs.iter().map(|h| {
            fbatch
                .iter()
                .flat_map(|&r| h.logits(ctx.x.row(r)))
                .collect()
        }));
        let rf = repulsion(&logits, &cfg.kernel)?;
        rows_of(hs.iter().enumerate().map(|(i, h)| {
            let mut g = LinearHead::zeros(c, d);
            for (b, &r) in fbatch.iter().enumerate() {
                h.backprop_logit_grad(ctx.x.row(r), &rf.row(i)[b * c..(b + 1) * c], &mut g);
            }
            g.flatten()
        }))
    };

    let next = particle_update(ctx, particles, &ce, rep, ParticleRole::ClassifierHead)?;
    for (i, h) in hs.iter_mut().enumerate() {
        *h = LinearHead::unflatten(c, d, next.row(i));
    }
    Ok(loss)
}

fn rows_of(rows: impl Iterator<Item = Vec<f64>>) -> Matrix {
    let rows: Vec<Vec<f64>> = rows.collect();
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

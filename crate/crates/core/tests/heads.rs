mod common;

use common::{blobs, lur_grad_check, naive_lur_loss, random_lur};
use lur::data::{make_ood_split, LatentDataset, OodMode, SplitTag};
use lur::heads::*;
use lur::metrics::{accuracy_and_macro_f1, ScoredPrediction};
use lur::numerics::{Matrix, Rng};
use lur::repulsion::mean_pairwise_distance;
use lur::Error;

fn identity_classifier() -> LinearHead {
    LinearHead {
        weight: Matrix::identity(2),
        bias: vec![0.0; 2],
    }
}

fn swap() -> Affine {
    Affine {
        weight: Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        bias: vec![0.0; 2],
    }
}

#[test]
fn swap_transform_example() {
    let head = LurHead::new(identity_classifier(), vec![swap()]).unwrap();
    let pd = lur_forward(&head, &[1.0, 0.0]).unwrap();
    assert_eq!(pd.num_samples(), 2);
    let expect = [[0.73106, 0.26894], [0.26894, 0.73106]];
    for (s, row) in expect.iter().enumerate() {
        for c in 0..2 {
            assert!((pd.probs[(s, c)] - row[c]).abs() < 1e-5);
        }
    }
    let reps = pd.latent_reps.unwrap();
    assert_eq!(reps.row(0), &[1.0, 0.0]);
    assert_eq!(reps.row(1), &[0.0, 1.0]);

    let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let (loss, _) = lur_loss_and_grads(&head, &z, &[0]).unwrap();
    assert!((loss - 1.62652).abs() < 1e-5);
}

#[test]
fn empty_transform_set_matches_regular() {
    let mut rng = Rng::new(3);
    let head = random_lur(4, 3, 0, &mut rng);
    let z: Vec<f64> = rng.normal_vec(4, 0.0, 1.0);
    let pd = lur_forward(&head, &z).unwrap();
    assert_eq!(pd.num_samples(), 1);
    assert_eq!(pd.probs.row(0), head.classifier.probs(&z).as_slice());

    let batch = Matrix::from_fn(6, 4, |_, _| rng.normal());
    let y = [0, 1, 2, 0, 1, 2];
    let (loss, _) = lur_loss_and_grads(&head, &batch, &y).unwrap();
    assert!((loss - naive_lur_loss(&head, &batch, &y)).abs() < 1e-14);
}

#[test]
fn identity_transforms_triple_the_loss() {
    let mut rng = Rng::new(4);
    let base = random_lur(3, 4, 0, &mut rng);
    let head = LurHead::new(base.classifier.clone(), vec![Affine::identity(3); 2]).unwrap();
    let z = Matrix::from_fn(5, 3, |_, _| rng.normal());
    let y = [0, 1, 2, 3, 0];
    let pd = lur_forward(&head, z.row(0)).unwrap();
    assert_eq!(pd.probs.row(0), pd.probs.row(1));
    assert_eq!(pd.probs.row(1), pd.probs.row(2));
    let (single, _) = lur_loss_and_grads(&base, &z, &y).unwrap();
    let (triple, _) = lur_loss_and_grads(&head, &z, &y).unwrap();
    assert!((triple - 3.0 * single).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    for n in [0, 1, 3] {
        for _ in 0..20 {
            let err = lur_grad_check(n, &mut rng);
            assert!(err < 1e-4, "n={n}: relative error {err}");
        }
    }
}

#[test]
fn classifier_is_shared_across_paths() {
    let mut rng = Rng::new(5);
    let head = random_lur(3, 4, 3, &mut rng);
    let z = rng.normal_vec(3, 0.0, 1.0);
    let base = lur_forward(&head, &z).unwrap();

    for j in 0..3 {
        let mut h = head.clone();
        h.transforms[j].bias[0] += 0.5;
        let pd = lur_forward(&h, &z).unwrap();
        for s in 0..4 {
            let changed = pd.probs.row(s) != base.probs.row(s);
            assert_eq!(changed, s == j + 1, "transform {j}, row {s}");
        }
    }

    let mut h = head.clone();
    h.classifier.weight[(0, 0)] += 0.5;
    let pd = lur_forward(&h, &z).unwrap();
    for s in 0..4 {
        assert_ne!(pd.probs.row(s), base.probs.row(s));
    }
}

#[test]
fn input_validation() {
    let head = LurHead::new(identity_classifier(), vec![swap()]).unwrap();
    assert!(matches!(
        lur_forward(&head, &[1.0]),
        Err(Error::InvalidInput(_))
    ));
    let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert!(matches!(
        lur_loss_and_grads(&head, &z, &[2]),
        Err(Error::Index { .. })
    ));
    assert!(lur_loss_and_grads(&head, &z, &[0, 1]).is_err());
    assert!(lur_loss_and_grads(&head, &Matrix::zeros(0, 2), &[]).is_err());
    assert!(LurHead::new(identity_classifier(), vec![Affine::identity(3)]).is_err());
}

#[test]
fn bbb_without_variance_is_deterministic() {
    let mut rng = Rng::new(6);
    let mu = LinearHead::gaussian(3, 4, 1.0, &mut rng);
    let mut rho = LinearHead::zeros(3, 4);
    rho.weight.as_mut_slice().iter_mut().for_each(|r| *r = -1e3);
    rho.bias.iter_mut().for_each(|r| *r = -1e3);
    let head = BbbHead {
        mu: mu.clone(),
        rho,
    };
    let z = rng.normal_vec(4, 0.0, 1.0);
    let pd = bbb_forward(&head, &z, 5, &mut rng).unwrap();
    for s in 0..5 {
        assert_eq!(pd.probs.row(s), mu.probs(&z).as_slice());
    }
    assert!(bbb_forward(&head, &z, 0, &mut rng).is_err());
}

#[test]
fn gaussian_kl_closed_forms() {
    assert!(kl_gaussian(0.0, 1.0, 1.0).abs() < 1e-15);
    assert!((kl_gaussian(1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    let (m, s, p): (f64, f64, f64) = (0.3, 0.7, 2.0);
    let closed = (p / s).ln() + (s * s + m * m) / (2.0 * p * p) - 0.5;
    assert!((kl_gaussian(m, s, p) - closed).abs() < 1e-15);
}

#[test]
fn bbb_monte_carlo_error_shrinks_with_samples() {
    let mut rng = Rng::new(8);
    let mu = LinearHead::gaussian(3, 4, 1.0, &mut rng);
    let rho = LinearHead::unflatten(3, 4, &[0.0; 15]);
    let head = BbbHead { mu, rho };
    let z = rng.normal_vec(4, 0.0, 1.0);
    let truth = bbb_forward(&head, &z, 200_000, &mut Rng::new(99))
        .unwrap()
        .mean_probs();

    let rms = |s: usize| -> f64 {
        let reps = 40;
        let mut total = 0.0;
        for r in 0..reps {
            let m = bbb_forward(&head, &z, s, &mut Rng::new(1000 + r))
                .unwrap()
                .mean_probs();
            total += m
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        (total / reps as f64).sqrt()
    };
    let (e10, e1000) = (rms(10), rms(1000));
    // 1/√S scaling predicts a ratio of 10
    let ratio = e10 / e1000;
    assert!(ratio > 6.0 && ratio < 16.0, "ratio {ratio}");
}

#[test]
fn gda_density_examples() {
    let ds = blobs(7);
    let model = gda_fit_score(&ds, 1e-6).unwrap();
    let mut train: Vec<f64> = ds
        .indices_of(SplitTag::Train)
        .iter()
        .map(|&r| model.score(ds.features().row(r)))
        .collect();
    train.sort_by(f64::total_cmp);
    let p10 = train[train.len() / 10];
    for k in 0..5 {
        assert!(model.score(model.means.row(k)) < p10);
    }
    let far = vec![1e3; 16];
    assert!(model.score(&far) > *train.last().unwrap());
}

#[test]
fn gda_survives_duplicate_classes() {
    let ds = blobs(7);
    let x = ds.features();
    let rows: Vec<usize> = ds
        .indices_of(SplitTag::Train)
        .into_iter()
        .filter(|&r| ds.labels()[r] == 0)
        .collect();
    let mut data = Vec::new();
    for _ in 0..2 {
        for &r in &rows {
            data.push(x.row(r).to_vec());
        }
    }
    let labels: Vec<usize> = (0..data.len())
        .map(|i| usize::from(i >= rows.len()))
        .collect();
    let dup = LatentDataset::new(
        Matrix::from_rows(&data).unwrap(),
        labels,
        LatentDataset::default_class_names(2),
        vec![SplitTag::Train; data.len()],
    )
    .unwrap();
    let model = gda_fit_score(&dup, 1e-6).unwrap();
    assert!(model.is_finite());
    let s = model.score(x.row(rows[0]));
    assert!(s.is_finite());
    let post = model.posterior(x.row(rows[0]));
    assert!((post[0] - 0.5).abs() < 1e-9);

    let per_class = gda_fit(&dup, 1e-6, Covariance::PerClass).unwrap();
    assert!(per_class.score(x.row(rows[0])).is_finite());
}

#[test]
fn gda_needs_two_rows_per_class() {
    let ds = LatentDataset::new(
        Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
        vec![0, 0, 1],
        LatentDataset::default_class_names(2),
        vec![SplitTag::Train; 3],
    )
    .unwrap();
    assert!(matches!(
        gda_fit_score(&ds, 1e-6),
        Err(Error::InvalidInput(_))
    ));
}

fn test_accuracy(model: &HeadModel, ds: &LatentDataset) -> f64 {
    let test = ds.split(SplitTag::Test).unwrap();
    let preds: Vec<_> = model
        .predict(test.features())
        .unwrap()
        .iter()
        .zip(test.labels())
        .map(|(pd, &y)| ScoredPrediction::from_distribution(pd, y).unwrap())
        .collect();
    accuracy_and_macro_f1(&preds).unwrap().0
}

#[test]
fn regular_and_lur_accuracy() {
    let ds = blobs(7);
    let regular = train_head(&HeadConfig::new(Variant::Regular, 0), &ds).unwrap();
    let mut lc = HeadConfig::new(Variant::Lur, 0);
    lc.members = 5;
    let lur_model = train_head(&lc, &ds).unwrap();
    let (ra, la) = (test_accuracy(&regular, &ds), test_accuracy(&lur_model, &ds));
    assert!(ra >= 0.95, "regular accuracy {ra}");
    assert!((ra - la).abs() <= 0.03, "regular {ra} vs lur {la}");
}

#[test]
fn training_is_deterministic_for_every_variant() {
    let ds = blobs(2);
    for v in Variant::ALL {
        let mut c = HeadConfig::new(v, 17);
        c.members = 3;
        c.epochs = 2;
        let a = train_head(&c, &ds).unwrap();
        let b = train_head(&c, &ds).unwrap();
        assert_eq!(a, b, "{v}");
        assert_eq!(
            a.predict(ds.features()).unwrap(),
            b.predict(ds.features()).unwrap()
        );
    }
}

#[test]
fn predictive_distributions_are_normalized() {
    let ds = blobs(2);
    for v in Variant::ALL {
        let mut c = HeadConfig::new(v, 1);
        c.members = 4;
        c.epochs = 1;
        let m = train_head(&c, &ds).unwrap();
        let expected_rows = match v {
            Variant::Regular | Variant::Gda => 1,
            Variant::Lur | Variant::Rlur => 5,
            _ => 4,
        };
        for pd in m
            .predict(&ds.features().select_rows(&[0, 500, 999]))
            .unwrap()
        {
            assert_eq!(pd.num_samples(), expected_rows, "{v}");
            assert_eq!(pd.latent_reps.is_some(), v.has_latent_reps());
            for row in pd.probs.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}

#[test]
fn lur_without_transforms_trains_like_regular() {
    let ds = blobs(5);
    for epochs in [1, 3] {
        let mut rc = HeadConfig::new(Variant::Regular, 9);
        rc.epochs = epochs;
        let mut lc = HeadConfig::new(Variant::Lur, 9);
        lc.members = 0;
        lc.epochs = epochs;
        let r = train_head(&rc, &ds).unwrap();
        let l = train_head(&lc, &ds).unwrap();
        let (HeadParams::Linear(rh), HeadParams::Lur(lh)) = (&r.params, &l.params) else {
            panic!("unexpected parameter layout");
        };
        assert!(lh.transforms.is_empty());
        assert_eq!(rh.weight.as_slice(), lh.classifier.weight.as_slice());
        assert_eq!(rh.bias, lh.classifier.bias);
    }
}

#[test]
fn repulsion_spreads_transform_particles() {
    let split = make_ood_split(&blobs(7), OodMode::Min).unwrap();
    for p in [5, 10] {
        let mut c = HeadConfig::new(Variant::Rlur, 3);
        c.members = p;
        c.epochs = 3;
        c.repulsion.enabled = false;
        let off = train_head(&c, &split.in_train).unwrap();
        c.repulsion.enabled = true;
        let on = train_head(&c, &split.in_train).unwrap();
        let d_off = mean_pairwise_distance(&off.particle_matrix().unwrap());
        let d_on = mean_pairwise_distance(&on.particle_matrix().unwrap());
        assert!(d_on > d_off, "P={p}: {d_on} <= {d_off}");
    }
}

#[test]
fn rlle_and_function_space_modes_train() {
    let ds = blobs(4);
    for est in [
        lur::repulsion::Estimator::Kde,
        lur::repulsion::Estimator::Sge,
        lur::repulsion::Estimator::Ssge,
    ] {
        for space in [RepulsionSpace::Weight, RepulsionSpace::Function] {
            for v in [Variant::Rlur, Variant::Rlle] {
                let mut c = HeadConfig::new(v, 2);
                c.members = 3;
                c.epochs = 2;
                c.repulsion.kernel.estimator = est;
                c.repulsion.space = space;
                let m = train_head(&c, &ds).unwrap();
                assert!(test_accuracy(&m, &ds) > 0.9, "{v} {est:?} {space:?}");
            }
        }
    }
}

#[test]
fn huge_learning_rate_diverges() {
    let ds = blobs(1);
    let mut c = HeadConfig::new(Variant::Regular, 0);
    c.learning_rate = f64::MAX;
    match train_head(&c, &ds) {
        Err(Error::TrainingDiverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let ds = blobs(1);
    let mut c = HeadConfig::new(Variant::SubEnsemble, 0);
    c.members = 0;
    assert!(train_head(&c, &ds).is_err());
    let mut c = HeadConfig::new(Variant::Rlur, 0);
    c.members = 1;
    assert!(c.validate().is_err());
    let mut c = HeadConfig::new(Variant::Lur, 0);
    c.learning_rate = 0.0;
    assert!(c.validate().is_err());
    c.learning_rate = 0.1;
    c.epochs = 0;
    assert!(c.validate().is_err());
}

#[test]
fn config_json_defaults() {
    let c: HeadConfig = serde_json::from_str(r#"{"variant": "lur", "seed": 4}"#).unwrap();
    assert_eq!(c, HeadConfig::new(Variant::Lur, 4));
    assert!(serde_json::from_str::<HeadConfig>(r#"{"variant": "lur"}"#).is_err());
    let round: HeadConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(round, c);
}

#[test]
fn models_round_trip_through_files() {
    let ds = blobs(3);
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let mut c = HeadConfig::new(v, 5);
        c.members = 3;
        c.epochs = 1;
        let m = train_head(&c, &ds).unwrap();
        let path = dir.path().join(format!("{v}.lurh"));
        m.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = HeadModel::load(&path).unwrap();
        assert_eq!(back, m, "{v}");
        assert_eq!(
            back.predict(ds.features()).unwrap(),
            m.predict(ds.features()).unwrap()
        );
    }
    let mut c = HeadConfig::new(Variant::Gda, 5);
    c.gda_covariance = Covariance::PerClass;
    let m = train_head(&c, &ds).unwrap();
    let path = dir.path().join("per_class.lurh");
    m.save(&path).unwrap();
    assert_eq!(HeadModel::load(&path).unwrap(), m);
}

#[test]
fn corrupt_model_files_are_rejected() {
    let ds = blobs(3);
    let mut c = HeadConfig::new(Variant::Lur, 5);
    c.members = 2;
    c.epochs = 1;
    let m = train_head(&c, &ds).unwrap();
    let bytes = encode_model(&m);
    let p = std::path::Path::new("m.lurh");

    let malformed = |r: lur::Result<HeadModel>| matches!(r, Err(Error::Malformed { .. }));
    assert!(malformed(decode_model(
        p,
        &bytes[..bytes.len() - 3],
        c.clone()
    )));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(malformed(decode_model(p, &extra, c.clone())));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(malformed(decode_model(p, &magic, c.clone())));
    let mut nan = bytes.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(malformed(decode_model(p, &nan, c.clone())));
    assert!(malformed(decode_model(
        p,
        &bytes,
        HeadConfig::new(Variant::Regular, 5)
    )));
    assert!(malformed(decode_model(
        p,
        &bytes,
        HeadConfig::new(Variant::Lur, 6)
    )));
    assert_eq!(decode_model(p, &bytes, c).unwrap(), m);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.lurh");
    assert!(matches!(HeadModel::load(&missing), Err(Error::Io { .. })));
}

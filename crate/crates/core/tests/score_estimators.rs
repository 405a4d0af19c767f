//! Score estimators against the analytic Gaussian score `−(θ−μ)/σ²`.

use lur::numerics::{Matrix, Rng};
use lur::repulsion::{median_distance, repulsion, score_ssge, Estimator, KernelConfig};

fn gaussian_sample(n: usize, mean: f64, stdev: f64, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_fn(n, 1, |_, _| mean + stdev * rng.normal())
}

/// RMS of `ĝ − g` over particles within two standard deviations.
fn central_rms(x: &Matrix, g: &Matrix, mean: f64, stdev: f64) -> f64 {
    let mut err = 0.0;
    let mut n = 0usize;
    for i in 0..x.rows() {
        let t = x[(i, 0)];
        if (t - mean).abs() <= 2.0 * stdev {
            err += (g[(i, 0)] + (t - mean) / (stdev * stdev)).powi(2);
            n += 1;
        }
    }
    (err / n as f64).sqrt()
}

fn slope(x: &Matrix, g: &Matrix) -> f64 {
    let idx: Vec<usize> = (0..x.rows()).filter(|&i| x[(i, 0)].abs() <= 2.0).collect();
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| x[(i, 0)]).sum::<f64>() / n;
    let my = idx.iter().map(|&i| g[(i, 0)]).sum::<f64>() / n;
    let sxy: f64 = idx
        .iter()
        .map(|&i| (x[(i, 0)] - mx) * (g[(i, 0)] - my))
        .sum();
    let sxx: f64 = idx.iter().map(|&i| (x[(i, 0)] - mx).powi(2)).sum();
    sxy / sxx
}

type Estimate = fn(&Matrix) -> Matrix;

// `repulsion` returns the score estimate itself for the Stein estimators.
fn sge(x: &Matrix) -> Matrix {
    repulsion(x, &KernelConfig::with_estimator(Estimator::Sge)).unwrap()
}

fn ssge(x: &Matrix) -> Matrix {
    repulsion(x, &KernelConfig::with_estimator(Estimator::Ssge)).unwrap()
}

const ESTIMATORS: [(&str, Estimate); 2] = [("sge", sge), ("ssge", ssge)];

#[test]
fn standard_normal_score_shape() {
    for (name, est) in ESTIMATORS {
        let x = gaussian_sample(2000, 0.0, 1.0, 1);
        let g = est(&x);
        let near: Vec<f64> = (0..x.rows())
            .filter(|&i| x[(i, 0)].abs() < 0.1)
            .map(|i| g[(i, 0)].abs())
            .collect();
        let mean_abs = near.iter().sum::<f64>() / near.len() as f64;
        assert!(mean_abs < 0.1, "{name}: mean |ĝ| near 0 is {mean_abs}");
        let s = slope(&x, &g);
        assert!((s + 1.0).abs() <= 0.15, "{name}: slope {s}");
    }
}

// Averaged over five seeds and measured in standardized units (σ · RMS), the
// same protocol and tolerance as the standard-normal check.
#[test]
fn shifted_scaled_gaussian() {
    for (name, est) in ESTIMATORS {
        let (mean, stdev) = (3.0, 2.0);
        let std_rms: f64 = (0..5)
            .map(|seed| {
                let x = gaussian_sample(2000, mean, stdev, seed);
                stdev * central_rms(&x, &est(&x), mean, stdev)
            })
            .sum::<f64>()
            / 5.0;
        assert!(std_rms < 0.15, "{name}: standardized rms {std_rms}");
    }
}

#[test]
fn rms_error_shrinks_with_more_particles() {
    for (name, est) in ESTIMATORS {
        let errs: Vec<f64> = [50usize, 400, 2000]
            .iter()
            .map(|&p| {
                (0..5)
                    .map(|seed| {
                        let x = gaussian_sample(p, 0.0, 1.0, 1000 + seed);
                        central_rms(&x, &est(&x), 0.0, 1.0)
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{name}: {errs:?}");
    }
}

#[test]
fn ssge_wide_basis_beats_single_eigenfunction() {
    let x = gaussian_sample(400, 0.0, 1.0, 21);
    let h = median_distance(&x);
    let narrow = score_ssge(&x, h, 1.0).unwrap();
    let wide = score_ssge(&x, h, 1e-6).unwrap();

    let mean = x.column_means()[0];
    let corr = |g: &Matrix| {
        let c: f64 = (0..x.rows()).map(|i| g[(i, 0)] * (x[(i, 0)] - mean)).sum();
        let gn: f64 = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let xn: f64 = (0..x.rows())
            .map(|i| (x[(i, 0)] - mean).powi(2))
            .sum::<f64>()
            .sqrt();
        c / (gn * xn).max(f64::MIN_POSITIVE)
    };
    assert!(corr(&wide) < 0.0, "wide corr {}", corr(&wide));
    let rn = central_rms(&x, &narrow, 0.0, 1.0);
    let rw = central_rms(&x, &wide, 0.0, 1.0);
    assert!(rw < rn, "wide {rw} vs narrow {rn}");
}

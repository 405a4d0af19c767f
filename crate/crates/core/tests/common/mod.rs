//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use lur::data::{gen_synthetic, LatentDataset, SynthSpec};
use lur::heads::{lur_loss_and_grads, Affine, LinearHead, LurHead};
use lur::numerics::{Matrix, Rng};

/// The five-blob dataset used throughout the end-to-end checks.
pub fn blobs(seed: u64) -> LatentDataset {
    gen_synthetic(&SynthSpec {
        classes: 5,
        dim: 16,
        per_class: 200,
        cluster_mean_scale: 3.0,
        cluster_stdev: 0.5,
        seed,
    })
    .unwrap()
}

/// Loss computed from scratch: mean over rows of the summed cross-entropy of
/// every path.
pub fn naive_lur_loss(head: &LurHead, z: &Matrix, y: &[usize]) -> f64 {
    let ce = |w: &LinearHead, x: &[f64], label: usize| -> f64 {
        let logits: Vec<f64> = (0..w.weight.rows())
            .map(|c| w.bias[c] + (0..x.len()).map(|j| w.weight[(c, j)] * x[j]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        lse - logits[label]
    };
    let mut total = 0.0;
    for (r, &label) in y.iter().enumerate() {
        let x = z.row(r);
        total += ce(&head.classifier, x, label);
        for t in &head.transforms {
            let xt: Vec<f64> = (0..x.len())
                .map(|i| t.bias[i] + (0..x.len()).map(|j| t.weight[(i, j)] * x[j]).sum::<f64>())
                .collect();
            total += ce(&head.classifier, &xt, label);
        }
    }
    total / y.len() as f64
}

pub fn random_lur(d: usize, c: usize, n: usize, rng: &mut Rng) -> LurHead {
    let classifier = LinearHead {
        weight: Matrix::from_fn(c, d, |_, _| rng.normal()),
        bias: rng.normal_vec(c, 0.0, 0.5),
    };
    let transforms = (0..n)
        .map(|_| Affine {
            weight: Matrix::from_fn(d, d, |_, _| 0.5 * rng.normal()),
            bias: rng.normal_vec(d, 0.0, 0.5),
        })
        .collect();
    LurHead::new(classifier, transforms).unwrap()
}

/// `|a − f| / max(|a|, |f|, 1e-4)`: relative error, compared absolutely for
/// gradient entries below 1e-4 where finite differences carry no relative
/// precision.
pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

/// Max relative error between analytic and central-difference gradients of
/// the summed-path loss over every parameter of a random head and batch.
pub fn lur_grad_check(n: usize, rng: &mut Rng) -> f64 {
    let (d, c, b) = (3, 4, 5);
    let head = random_lur(d, c, n, rng);
    let z = Matrix::from_fn(b, d, |_, _| rng.normal());
    let y: Vec<usize> = (0..b)
        .map(|_| (rng.next_u64() % c as u64) as usize)
        .collect();
    let (loss, grads) = lur_loss_and_grads(&head, &z, &y).unwrap();
    assert!((loss - naive_lur_loss(&head, &z, &y)).abs() < 1e-12);

    let h = 1e-5;
    let fd = |perturb: &dyn Fn(&mut LurHead, f64)| -> f64 {
        let mut plus = head.clone();
        perturb(&mut plus, h);
        let mut minus = head.clone();
        perturb(&mut minus, -h);
        (naive_lur_loss(&plus, &z, &y) - naive_lur_loss(&minus, &z, &y)) / (2.0 * h)
    };

    let mut worst = 0.0f64;
    for i in 0..c {
        for j in 0..d {
            let f = fd(&|m: &mut LurHead, e| m.classifier.weight[(i, j)] += e);
            worst = worst.max(rel_err(grads.classifier.weight[(i, j)], f));
        }
        let f = fd(&|m: &mut LurHead, e| m.classifier.bias[i] += e);
        worst = worst.max(rel_err(grads.classifier.bias[i], f));
    }
    for t in 0..n {
        for i in 0..d {
            for j in 0..d {
                let f = fd(&|m: &mut LurHead, e| m.transforms[t].weight[(i, j)] += e);
                worst = worst.max(rel_err(grads.transforms[t].weight[(i, j)], f));
            }
            let f = fd(&|m: &mut LurHead, e| m.transforms[t].bias[i] += e);
            worst = worst.max(rel_err(grads.transforms[t].bias[i], f));
        }
    }
    worst
}

/// Pairwise count: `P(ood > id) + ½ P(ood = id)`.
pub fn brute_roc_auc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn unique_desc(id: &[f64], ood: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = id.iter().chain(ood).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Rescans both arrays at every unique threshold.
pub fn brute_pr_auc(id: &[f64], ood: &[f64]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in unique_desc(id, ood) {
        let tp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let fp = id.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / ood.len() as f64;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// Scans every candidate threshold and keeps the largest with TPR ≥ 0.95.
pub fn brute_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let best = unique_desc(id, ood)
        .into_iter()
        .find(|&t| ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64 >= 0.95)
        .expect("the minimum score admits every OOD instance");
    id.iter().filter(|&&s| s >= best).count() as f64 / id.len() as f64
}

/// rAULC from per-instance prefix-inclusion probabilities. An instance with
/// `s` strictly more certain peers and `g` peers of equal uncertainty
/// (itself included) sits uniformly at positions `s+1 ..= s+g`, so it lies in
/// the first `k` with probability `clamp((k − s) / g, 0, 1)`.
pub fn brute_raulc(uncertainty: &[f64], correct: &[bool]) -> Option<f64> {
    let n = correct.len();
    let n_correct = correct.iter().filter(|&&c| c).count();
    if n_correct == 0 || n_correct == n {
        return None;
    }
    let acc = n_correct as f64 / n as f64;
    let mut aulc = 0.0;
    let mut oracle = 0.0;
    for k in 1..=n {
        let mut expected = 0.0;
        for i in 0..n {
            if !correct[i] {
                continue;
            }
            let s = uncertainty.iter().filter(|&&u| u < uncertainty[i]).count() as f64;
            let g = uncertainty.iter().filter(|&&u| u == uncertainty[i]).count() as f64;
            expected += ((k as f64 - s) / g).clamp(0.0, 1.0);
        }
        aulc += expected / k as f64 / acc - 1.0;
        oracle += k.min(n_correct) as f64 / k as f64 / acc - 1.0;
    }
    Some((aulc / n as f64) / (oracle / n as f64))
}

/// Scores on a coarse grid so that ties are common.
pub fn tied_scores(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| (rng.uniform() * 10.0).floor() / 10.0)
        .collect()
}

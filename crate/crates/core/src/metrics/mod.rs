//! Classification, calibration and out-of-distribution metrics.
//!
//! OOD metrics treat out-of-distribution instances as the positive class and
//! expect higher scores to mean "more OOD". Ties are resolved by midranks
//! (ROC-AUC) or by inclusive `score ≥ t` thresholds (PR-AUC, FPR95).

use crate::error::{Error, Result};
use crate::heads::PredictiveDistribution;
use crate::numerics::Matrix;

/// Per-instance summary consumed by the in-distribution metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub mean_probs: Vec<f64>,
    pub predicted: usize,
    pub label: usize,
    pub uncertainty: f64,
    pub correct: bool,
}

impl ScoredPrediction {
    /// Predicted class is the first argmax of `mean_probs`.
    pub fn new(mean_probs: Vec<f64>, label: usize, uncertainty: f64) -> Result<Self> {
        if mean_probs.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if label >= mean_probs.len() {
            return Err(Error::Index {
                index: label,
                len: mean_probs.len(),
            });
        }
        if !uncertainty.is_finite() {
            return Err(Error::invalid("uncertainty must be finite"));
        }
        let predicted = argmax(&mean_probs);
        Ok(ScoredPrediction {
            correct: predicted == label,
            mean_probs,
            predicted,
            label,
            uncertainty,
        })
    }

    /// Uses the predictive entropy as the uncertainty.
    pub fn from_distribution(pd: &PredictiveDistribution, label: usize) -> Result<Self> {
        ScoredPrediction::new(pd.mean_probs(), label, predictive_entropy(&pd.probs))
    }

    pub fn confidence(&self) -> f64 {
        self.mean_probs[self.predicted]
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// In-distribution and out-of-distribution scores for one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct OodScoreSet {
    pub in_dist_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl OodScoreSet {
    pub fn new(in_dist_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if in_dist_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::invalid("OOD metrics need both score sets non-empty"));
        }
        if in_dist_scores
            .iter()
            .chain(&ood_scores)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("OOD scores must be finite"));
        }
        Ok(OodScoreSet {
            in_dist_scores,
            ood_scores,
        })
    }
}

/// Entropy of the row-mean distribution, with `0 · ln 0 = 0`.
pub fn predictive_entropy(probs: &Matrix) -> f64 {
    -probs
        .column_means()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean over dimensions of the per-dimension variance across the `n+1`
/// representations, dividing by `n`.
pub fn latent_variance_score(latent_reps: &Matrix) -> Result<f64> {
    let rows = latent_reps.rows();
    if rows < 2 {
        return Err(Error::invalid(
            "latent variance needs at least one transformed representation",
        ));
    }
    let means = latent_reps.column_means();
    let d = latent_reps.cols();
    let mut total = 0.0;
    for (j, m) in means.iter().enumerate() {
        let ss: f64 = (0..rows).map(|i| (latent_reps[(i, j)] - m).powi(2)).sum();
        total += ss / (rows - 1) as f64;
    }
    Ok(total / d as f64)
}

/// Accuracy and macro-F1 over all classes of the probability vectors.
pub fn accuracy_and_macro_f1(preds: &[ScoredPrediction]) -> Result<(f64, f64)> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid("no predictions"))?;
    let c = first.mean_probs.len();
    let mut tp = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut true_count = vec![0usize; c];
    for p in preds {
        if p.mean_probs.len() != c {
            return Err(Error::invalid("predictions disagree on the class count"));
        }
        pred_count[p.predicted] += 1;
        true_count[p.label] += 1;
        if p.correct {
            tp[p.label] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let f1_sum: f64 = (0..c)
        .map(|k| {
            let precision = if pred_count[k] > 0 {
                tp[k] as f64 / pred_count[k] as f64
            } else {
                0.0
            };
            let recall = if true_count[k] > 0 {
                tp[k] as f64 / true_count[k] as f64
            } else {
                0.0
            };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    Ok((correct as f64 / preds.len() as f64, f1_sum / c as f64))
}

/// Adaptive calibration error with equal-count confidence bins. The first
/// `N mod bins` bins take one extra instance; `bins` is capped at `N`.
pub fn ace(preds: &[ScoredPrediction], bins: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    if bins == 0 {
        return Err(Error::invalid("ACE needs at least one bin"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].confidence().total_cmp(&preds[b].confidence()));
    let n = preds.len();
    let bins = bins.min(n);
    let base = n / bins;
    let extra = n % bins;
    let mut start = 0;
    let mut total = 0.0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        let members = &order[start..start + size];
        let acc = members.iter().filter(|&&i| preds[i].correct).count() as f64 / size as f64;
        let conf = members.iter().map(|&i| preds[i].confidence()).sum::<f64>() / size as f64;
        total += (acc - conf).abs();
        start += size;
    }
    Ok(total / bins as f64)
}

/// Relative area under the lift curve. Instances are ranked by increasing
/// uncertainty; within a group of equal uncertainty the expected number of
/// correct predictions in each prefix is used, which averages over all
/// orderings of the tie. `None` when every prediction is correct or every
/// one is wrong.
pub fn raulc(preds: &[ScoredPrediction]) -> Option<f64> {
    let n = preds.len();
    let n_correct = preds.iter().filter(|p| p.correct).count();
    if n == 0 || n_correct == 0 || n_correct == n {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[a].uncertainty.total_cmp(&preds[b].uncertainty));

    let mut expected_prefix = Vec::with_capacity(n);
    let mut before = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && preds[order[j]].uncertainty == preds[order[i]].uncertainty {
            j += 1;
        }
        let g = (j - i) as f64;
        let c = order[i..j].iter().filter(|&&k| preds[k].correct).count() as f64;
        for m in 1..=(j - i) {
            expected_prefix.push(before + c * m as f64 / g);
        }
        before += c;
        i = j;
    }
    let oracle_prefix: Vec<f64> = (1..=n).map(|k| k.min(n_correct) as f64).collect();
    let acc = n_correct as f64 / n as f64;
    let aulc = |prefix: &[f64]| -> f64 {
        prefix
            .iter()
            .enumerate()
            .map(|(k, &c)| c / (k + 1) as f64 / acc - 1.0)
            .sum::<f64>()
            / n as f64
    };
    Some(aulc(&expected_prefix) / aulc(&oracle_prefix))
}

/// Midranks (1-based) of `values`, ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// `P(ood > id) + ½ P(ood = id)` via the rank-sum statistic.
pub fn roc_auc(scores: &OodScoreSet) -> f64 {
    let n_o = scores.ood_scores.len();
    let n_i = scores.in_dist_scores.len();
    let all: Vec<f64> = scores
        .ood_scores
        .iter()
        .chain(&scores.in_dist_scores)
        .copied()
        .collect();
    let ranks = midranks(&all);
    let r_ood: f64 = ranks[..n_o].iter().sum();
    let u = r_ood - (n_o * (n_o + 1)) as f64 / 2.0;
    u / (n_o as f64 * n_i as f64)
}

/// Average precision over descending unique thresholds.
pub fn pr_auc(scores: &OodScoreSet) -> f64 {
    let mut all: Vec<(f64, bool)> = scores
        .ood_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.in_dist_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_o = scores.ood_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_o;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Fraction of in-distribution scores `≥ t*`, where `t*` is the largest
/// threshold whose OOD recall `#(ood ≥ t) / n_ood` is at least 0.95.
pub fn fpr_at_95_tpr(scores: &OodScoreSet) -> f64 {
    let mut ood = scores.ood_scores.clone();
    ood.sort_by(|a, b| b.total_cmp(a));
    let n_o = ood.len();
    let mut threshold = ood[n_o - 1];
    let mut i = 0;
    while i < n_o {
        let t = ood[i];
        while i < n_o && ood[i] == t {
            i += 1;
        }
        if i as f64 / n_o as f64 >= 0.95 {
            threshold = t;
            break;
        }
    }
    let fp = scores
        .in_dist_scores
        .iter()
        .filter(|&&s| s >= threshold)
        .count();
    fp as f64 / scores.in_dist_scores.len() as f64
}

/// Mean and two standard errors of the mean (`2s/√n`, `s` with `n − 1`
/// denominator). The spread is `None` for fewer than two values.
pub fn aggregate_sem2(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Some(2.0 * var.sqrt() / n.sqrt())))
}

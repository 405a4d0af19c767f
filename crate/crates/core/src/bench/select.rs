use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EvalReport, MetricRow, ScoreKind};
use crate::data::OodMode;
use crate::error::{Error, Result};
use crate::heads::Variant;
use crate::metrics::aggregate_sem2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Best configuration chosen independently for every seed.
    PerSeedBest,
    /// The one configuration with the best seed-mean.
    BestAvgConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub two_sem: Option<f64>,
    /// Number of seeds with a defined value.
    pub n: usize,
}

/// Aggregated metrics of the selected cells of one `(variant, mode)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub mode: OodMode,
    pub selection: Selection,
    pub criterion: String,
    /// `(seed, config)` of every selected cell.
    pub selected: Vec<(u64, String)>,
    pub metrics: BTreeMap<String, MetricStat>,
}

impl SummaryRow {
    pub fn stat(&self, key: &str) -> Option<&MetricStat> {
        self.metrics.get(key)
    }
}

/// Lower is better for calibration error and FPR95, higher for the rest.
pub fn metric_higher_is_better(key: &str) -> bool {
    !(key == "ace" || key.starts_with("fpr95."))
}

fn known_metric_names() -> Vec<String> {
    let mut names: Vec<String> = ["accuracy", "f1", "ace", "raulc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["roc_auc", "pr_auc", "fpr95"] {
        for k in ScoreKind::ALL {
            names.push(format!("{prefix}.{k}"));
        }
    }
    names
}

pub(super) fn check_criterion_name(criterion: &str) -> Result<()> {
    let names = known_metric_names();
    if names.iter().any(|n| n == criterion) {
        Ok(())
    } else {
        Err(Error::UnknownMetric {
            requested: criterion.to_string(),
            available: names,
        })
    }
}

fn better(a: f64, b: f64, higher: bool) -> bool {
    if higher {
        a > b
    } else {
        a < b
    }
}

/// Picks configurations per `(variant, mode)` by `criterion`.
///
/// Only successful cells with a defined criterion take part. Seeds are those
/// where at least one configuration has a value; `best_avg_config` only
/// considers configurations defined on all of them, so the per-seed
/// selection is never worse. Ties go to the lexicographically smaller label.
pub fn select_best(
    report: &EvalReport,
    selection: Selection,
    criterion: &str,
) -> Result<Vec<SummaryRow>> {
    let available: BTreeSet<&str> = report
        .rows
        .iter()
        .filter(|r| r.is_ok())
        .flat_map(|r| {
            r.metrics
                .iter()
                .filter(|(_, v)| v.is_some())
                .map(|(k, _)| k.as_str())
        })
        .collect();
    if !available.contains(criterion) {
        return Err(Error::UnknownMetric {
            requested: criterion.to_string(),
            available: available.into_iter().map(str::to_string).collect(),
        });
    }
    let higher = metric_higher_is_better(criterion);

    let mut groups: BTreeMap<(usize, OodMode), Vec<&MetricRow>> = BTreeMap::new();
    for r in &report.rows {
        let rank = Variant::ALL
            .iter()
            .position(|&v| v == r.variant)
            .expect("listed");
        groups.entry((rank, r.mode)).or_default().push(r);
    }

    let mut out = Vec::new();
    for ((rank, mode), rows) in groups {
        // seed -> config -> row, restricted to rows with the criterion
        let mut table: BTreeMap<u64, BTreeMap<&str, &MetricRow>> = BTreeMap::new();
        for r in rows
            .iter()
            .filter(|r| r.is_ok() && r.metric(criterion).is_some())
        {
            table
                .entry(r.seed)
                .or_default()
                .insert(r.config.as_str(), r);
        }
        let chosen: Vec<&MetricRow> = match selection {
            Selection::PerSeedBest => table
                .values()
                .map(|by_config| {
                    let mut best: Option<&MetricRow> = None;
                    // BTreeMap iterates labels in ascending order, so a strict
                    // improvement is needed to displace an earlier label
                    for r in by_config.values() {
                        if best.is_none_or(|b| {
                            better(
                                r.metric(criterion).unwrap(),
                                b.metric(criterion).unwrap(),
                                higher,
                            )
                        }) {
                            best = Some(r);
                        }
                    }
                    best.expect("non-empty seed entry")
                })
                .collect(),
            Selection::BestAvgConfig => {
                let configs: BTreeSet<&str> =
                    table.values().flat_map(|m| m.keys().copied()).collect();
                let mut best: Option<(&str, f64)> = None;
                for cfg in configs {
                    let values: Option<Vec<f64>> = table
                        .values()
                        .map(|m| m.get(cfg).map(|r| r.metric(criterion).unwrap()))
                        .collect();
                    let Some(values) = values else { continue };
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    if best.is_none_or(|(_, b)| better(mean, b, higher)) {
                        best = Some((cfg, mean));
                    }
                }
                match best {
                    Some((cfg, _)) => table.values().map(|m| m[cfg]).collect(),
                    None => Vec::new(),
                }
            }
        };
        out.push(summarize(
            Variant::ALL[rank],
            mode,
            selection,
            criterion,
            &chosen,
        )?);
    }
    Ok(out)
}

fn summarize(
    variant: Variant,
    mode: OodMode,
    selection: Selection,
    criterion: &str,
    chosen: &[&MetricRow],
) -> Result<SummaryRow> {
    let keys: BTreeSet<&str> = chosen
        .iter()
        .flat_map(|r| r.metrics.keys().map(String::as_str))
        .collect();
    let mut metrics = BTreeMap::new();
    for key in keys {
        let values: Vec<f64> = chosen.iter().filter_map(|r| r.metric(key)).collect();
        if values.is_empty() {
            continue;
        }
        let (mean, two_sem) = aggregate_sem2(&values)?;
        metrics.insert(
            key.to_string(),
            MetricStat {
                mean,
                two_sem,
                n: values.len(),
            },
        );
    }
    Ok(SummaryRow {
        variant,
        mode,
        selection,
        criterion: criterion.to_string(),
        selected: chosen.iter().map(|r| (r.seed, r.config.clone())).collect(),
        metrics,
    })
}

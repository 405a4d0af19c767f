use std::fmt::Write;

use super::{select_best, DatasetSource, EvalReport, MetricStat, ScoreKind, Selection, SummaryRow};
use crate::data::OodMode;
use crate::error::Result;

fn cell(stat: Option<&MetricStat>) -> String {
    match stat {
        Some(MetricStat {
            mean,
            two_sem: Some(s),
            ..
        }) => format!("{mean:.4} ± {s:.4}"),
        Some(MetricStat { mean, .. }) => format!("{mean:.4}"),
        None => "n/a".to_string(),
    }
}

fn selection_name(s: Selection) -> &'static str {
    match s {
        Selection::PerSeedBest => "per_seed_best",
        Selection::BestAvgConfig => "best_avg_config",
    }
}

fn configs(row: &SummaryRow) -> String {
    let mut c: Vec<&str> = row.selected.iter().map(|(_, c)| c.as_str()).collect();
    c.sort_unstable();
    c.dedup();
    c.join("; ")
}

/// Human-readable tables: in-distribution metrics from the stored
/// aggregation rows, OOD metrics selected by each score's ROC-AUC, and a
/// per-cell latent-variance vs entropy comparison.
pub fn render_markdown(report: &EvalReport) -> Result<String> {
    let mut out = String::new();
    let plan = &report.plan;
    writeln!(out, "# Evaluation report\n").unwrap();
    match &plan.dataset {
        DatasetSource::Synthetic(s) => writeln!(
            out,
            "Dataset: synthetic blobs (C={}, D={}, {} per class, mean scale {}, stdev {}, seed {})",
            s.classes, s.dim, s.per_class, s.cluster_mean_scale, s.cluster_stdev, s.seed
        ),
        DatasetSource::File { path, .. } => writeln!(out, "Dataset: {}", path.display()),
    }
    .unwrap();
    writeln!(
        out,
        "Cells: {} ({} failed). Seeds: {:?}. Cells show mean ± two standard errors over seeds.\n",
        report.rows.len(),
        report.failed_cells(),
        plan.seeds
    )
    .unwrap();

    let mut modes: Vec<OodMode> = report.rows.iter().map(|r| r.mode).collect();
    modes.sort_unstable();
    modes.dedup();

    for mode in modes {
        let held = report
            .rows
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.held_out_class.as_str())
            .unwrap_or("?");
        writeln!(out, "## OOD-{mode} (held out: {held})\n").unwrap();

        for selection in [Selection::PerSeedBest, Selection::BestAvgConfig] {
            writeln!(
                out,
                "### In-distribution, {} by {}\n",
                selection_name(selection),
                plan.selection_criterion
            )
            .unwrap();
            writeln!(out, "| Variant | Accuracy | F1 | ACE | rAULC | Configs |").unwrap();
            writeln!(out, "|---|---|---|---|---|---|").unwrap();
            for row in report
                .aggregates
                .iter()
                .filter(|a| a.mode == mode && a.selection == selection && !a.selected.is_empty())
            {
                writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    row.variant,
                    cell(row.stat("accuracy")),
                    cell(row.stat("f1")),
                    cell(row.stat("ace")),
                    cell(row.stat("raulc")),
                    configs(row)
                )
                .unwrap();
            }
            writeln!(out).unwrap();
        }

        for selection in [Selection::PerSeedBest, Selection::BestAvgConfig] {
            writeln!(
                out,
                "### OOD detection, {} by ROC-AUC of each score\n",
                selection_name(selection)
            )
            .unwrap();
            writeln!(
                out,
                "| Variant | Score | ROC-AUC | PR-AUC | FPR95 | Configs |"
            )
            .unwrap();
            writeln!(out, "|---|---|---|---|---|---|").unwrap();
            for kind in ScoreKind::ALL {
                let criterion = format!("roc_auc.{kind}");
                let Ok(rows) = select_best(report, selection, &criterion) else {
                    continue;
                };
                for row in rows
                    .iter()
                    .filter(|r| r.mode == mode && !r.selected.is_empty())
                {
                    writeln!(
                        out,
                        "| {} | {} | {} | {} | {} | {} |",
                        row.variant,
                        kind,
                        cell(row.stat(&criterion)),
                        cell(row.stat(&format!("pr_auc.{kind}"))),
                        cell(row.stat(&format!("fpr95.{kind}"))),
                        configs(row)
                    )
                    .unwrap();
                }
            }
            writeln!(out).unwrap();
        }
    }

    let paired: Vec<_> = report
        .rows
        .iter()
        .filter_map(|r| {
            Some((
                r,
                r.metric("roc_auc.entropy")?,
                r.metric("roc_auc.latent_variance")?,
            ))
        })
        .collect();
    if !paired.is_empty() {
        writeln!(out, "## Latent variance vs entropy (ROC-AUC per cell)\n").unwrap();
        writeln!(
            out,
            "| Variant | Mode | Config | Seed | Entropy | Latent variance |"
        )
        .unwrap();
        writeln!(out, "|---|---|---|---|---|---|").unwrap();
        for (r, e, v) in &paired {
            writeln!(
                out,
                "| {} | {} | {} | {} | {e:.4} | {v:.4} |",
                r.variant, r.mode, r.config, r.seed
            )
            .unwrap();
        }
        let wins = paired.iter().filter(|(_, e, v)| e > v).count();
        writeln!(
            out,
            "\nEntropy ROC-AUC exceeds latent-variance ROC-AUC in {wins} of {} cells.\n",
            paired.len()
        )
        .unwrap();
    }

    let failed: Vec<_> = report.rows.iter().filter(|r| !r.is_ok()).collect();
    if !failed.is_empty() {
        writeln!(out, "## Failed cells\n").unwrap();
        for r in failed {
            if let super::CellStatus::Failed(msg) = &r.status {
                writeln!(
                    out,
                    "- {} {} seed {} OOD-{}: {msg}",
                    r.variant, r.config, r.seed, r.mode
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

//! Grid experiments over head variants, hyperparameters, seeds and OOD
//! holdout modes, plus the report they produce.
//!
//! A plan expands into cells `(variant, config, seed, mode)`. Each cell
//! trains one head on the in-distribution train rows, scores the
//! in-distribution test rows and the held-out class, and records a flat map
//! of metric values. Cells run on a rayon pool; rows are sorted afterwards,
//! so the report does not depend on the pool size.
//!
//! Metric keys are `accuracy`, `f1`, `ace`, `raulc` and, per uncertainty
//! score `<s>`, `roc_auc.<s>`, `pr_auc.<s>`, `fpr95.<s>`.

mod render;
mod select;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_latents, make_ood_split, LatentDataset, LatentFormat, OodMode, OodSplit,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::heads::{
    train_head, Covariance, HeadConfig, HeadModel, RepulsionConfig, TransformInit, Variant,
};
use crate::metrics::{
    accuracy_and_macro_f1, ace, fpr_at_95_tpr, latent_variance_score, pr_auc, predictive_entropy,
    raulc, roc_auc, OodScoreSet, ScoredPrediction,
};

pub use render::render_markdown;
pub use select::{metric_higher_is_better, select_best, MetricStat, Selection, SummaryRow};

pub const SCHEMA_VERSION: &str = "1.0";

/// Where the latents come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    File {
        path: PathBuf,
        /// Guessed from the extension when absent.
        #[serde(default)]
        format: Option<LatentFormat>,
        /// Class count for CSV input.
        #[serde(default)]
        classes: Option<usize>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LatentDataset> {
        match self {
            DatasetSource::Synthetic(spec) => gen_synthetic(spec),
            DatasetSource::File {
                path,
                format,
                classes,
            } => {
                let format = format.unwrap_or_else(|| LatentFormat::from_path(path));
                load_latents(path, format, *classes)
            }
        }
    }
}

/// OOD score computed from a trained head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Predictive entropy; every variant.
    Entropy,
    /// Variance across the latent representations; LUR and RLUR with n ≥ 1.
    LatentVariance,
    /// Gaussian mixture negative log-density; GDA only.
    Density,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [
        ScoreKind::Entropy,
        ScoreKind::LatentVariance,
        ScoreKind::Density,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Entropy => "entropy",
            ScoreKind::LatentVariance => "latent_variance",
            ScoreKind::Density => "density",
        }
    }

    fn applies_to(self, config: &HeadConfig) -> bool {
        match self {
            ScoreKind::Entropy => true,
            ScoreKind::LatentVariance => config.variant.has_latent_reps() && config.members >= 1,
            ScoreKind::Density => config.variant == Variant::Gda,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown score `{s}` (entropy|latent_variance|density)"
                ))
            })
    }
}

/// Hyperparameter axes. Axes a variant ignores are collapsed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub members: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            members: (1..=10).map(|i| 5 * i).collect(),
            batch_sizes: vec![16, 32, 64],
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            epochs: vec![5, 10, 15, 20, 25],
        }
    }
}

/// One point of the grid as applied to a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub members: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epochs: Option<usize>,
}

impl GridPoint {
    /// Stable label used for grouping and tie-breaking.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(n) = self.members {
            parts.push(format!("n={n}"));
        }
        if let Some(b) = self.batch_size {
            parts.push(format!("bs={b}"));
        }
        if let Some(lr) = self.learning_rate {
            parts.push(format!("lr={lr}"));
        }
        if let Some(e) = self.epochs {
            parts.push(format!("ep={e}"));
        }
        if parts.is_empty() {
            "fit".to_string()
        } else {
            parts.join(",")
        }
    }
}

/// Head settings outside the grid; unset fields keep the head defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_init_stdev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform_init: Option<TransformInit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbb_prior_stdev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbb_kl_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbb_rho_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gda_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gda_covariance: Option<Covariance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repulsion: Option<RepulsionConfig>,
}

impl HeadSettings {
    fn apply(&self, c: &mut HeadConfig) {
        if let Some(v) = self.classifier_init_stdev {
            c.classifier_init_stdev = v;
        }
        if let Some(v) = self.transform_init {
            c.transform_init = v;
        }
        if let Some(v) = self.bbb_prior_stdev {
            c.bbb_prior_stdev = v;
        }
        if let Some(v) = self.bbb_kl_weight {
            c.bbb_kl_weight = v;
        }
        if let Some(v) = self.bbb_rho_init {
            c.bbb_rho_init = v;
        }
        if let Some(v) = self.gda_reg {
            c.gda_reg = v;
        }
        if let Some(v) = self.gda_covariance {
            c.gda_covariance = v;
        }
        if let Some(v) = &self.repulsion {
            c.repulsion = v.clone();
        }
    }
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_modes() -> Vec<OodMode> {
    vec![OodMode::Min, OodMode::Max]
}
fn default_scores() -> Vec<ScoreKind> {
    ScoreKind::ALL.to_vec()
}
fn default_criterion() -> String {
    "f1".to_string()
}
fn default_ace_bins() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub dataset: DatasetSource,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub ood_modes: Vec<OodMode>,
    #[serde(default = "default_scores")]
    pub uncertainty_scores: Vec<ScoreKind>,
    /// Metric key that picks configurations in the stored aggregation rows.
    #[serde(default = "default_criterion")]
    pub selection_criterion: String,
    #[serde(default = "default_ace_bins")]
    pub ace_bins: usize,
    #[serde(default)]
    pub head: HeadSettings,
}

impl ExperimentPlan {
    pub fn new(dataset: DatasetSource) -> Self {
        ExperimentPlan {
            dataset,
            variants: default_variants(),
            grid: GridSpec::default(),
            seeds: default_seeds(),
            ood_modes: default_modes(),
            uncertainty_scores: default_scores(),
            selection_criterion: default_criterion(),
            ace_bins: default_ace_bins(),
            head: HeadSettings::default(),
        }
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::malformed(path, format!("bad plan: {e}")))
    }

    /// Makes a relative dataset path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::File { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, n: usize| {
            if n == 0 {
                Err(Error::invalid(format!("plan `{name}` must not be empty")))
            } else {
                Ok(())
            }
        };
        empty("variants", self.variants.len())?;
        empty("seeds", self.seeds.len())?;
        empty("ood_modes", self.ood_modes.len())?;
        empty("uncertainty_scores", self.uncertainty_scores.len())?;
        empty("grid.batch_sizes", self.grid.batch_sizes.len())?;
        empty("grid.learning_rates", self.grid.learning_rates.len())?;
        empty("grid.epochs", self.grid.epochs.len())?;
        if self.variants.iter().any(|v| v.uses_members()) {
            empty("grid.members", self.grid.members.len())?;
        }
        if self.ace_bins == 0 {
            return Err(Error::invalid("ace_bins must be >= 1"));
        }
        select::check_criterion_name(&self.selection_criterion)?;
        for cell in self.cells() {
            cell.config.validate()?;
        }
        Ok(())
    }

    /// Grid points for one variant, axes it ignores collapsed.
    pub fn grid_points(&self, variant: Variant) -> Vec<GridPoint> {
        if !variant.is_iterative() {
            return vec![GridPoint {
                members: None,
                batch_size: None,
                learning_rate: None,
                epochs: None,
            }];
        }
        let members: Vec<Option<usize>> = if variant.uses_members() {
            dedup(&self.grid.members).into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        let mut out = Vec::new();
        for &n in &members {
            for &b in &dedup(&self.grid.batch_sizes) {
                for &lr in &dedup_f(&self.grid.learning_rates) {
                    for &e in &dedup(&self.grid.epochs) {
                        out.push(GridPoint {
                            members: n,
                            batch_size: Some(b),
                            learning_rate: Some(lr),
                            epochs: Some(e),
                        });
                    }
                }
            }
        }
        out
    }

    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &variant in &dedup_variants(&self.variants) {
            for point in self.grid_points(variant) {
                for &seed in &dedup(&self.seeds) {
                    for &mode in &dedup(&self.ood_modes) {
                        let mut config = HeadConfig::new(variant, seed);
                        self.head.apply(&mut config);
                        if let Some(n) = point.members {
                            config.members = n;
                        } else if variant == Variant::Regular {
                            config.members = 0;
                        }
                        if let Some(b) = point.batch_size {
                            config.batch_size = b;
                        }
                        if let Some(lr) = point.learning_rate {
                            config.learning_rate = lr;
                        }
                        if let Some(e) = point.epochs {
                            config.epochs = e;
                        }
                        out.push(Cell {
                            config,
                            point: point.clone(),
                            mode,
                        });
                    }
                }
            }
        }
        out
    }
}

fn dedup<T: Copy + Ord>(v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

fn dedup_f(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn dedup_variants(v: &[Variant]) -> Vec<Variant> {
    Variant::ALL.into_iter().filter(|x| v.contains(x)).collect()
}

struct Cell {
    config: HeadConfig,
    point: GridPoint,
    mode: OodMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

/// Metrics of one cell with its full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: Variant,
    pub config: String,
    pub params: GridPoint,
    pub seed: u64,
    pub mode: OodMode,
    pub held_out_class: String,
    pub status: CellStatus,
    /// `None` marks an undefined value (e.g. rAULC with no errors).
    pub metrics: BTreeMap<String, Option<f64>>,
}

impl MetricRow {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    /// Seconds since the Unix epoch; ignored by [`EvalReport::canonical_json`].
    pub generated_unix: u64,
    pub plan: ExperimentPlan,
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<SummaryRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the timestamp zeroed, for reproducibility comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.generated_unix = 0;
        r.to_json()
    }

    /// Parses a report, accepting any `1.x` schema.
    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::malformed(path, format!("bad report JSON: {e}")))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::malformed(path, "report has no schema_version"))?;
        let major = SCHEMA_VERSION.split('.').next().expect("non-empty");
        if version.split('.').next() != Some(major) {
            return Err(Error::malformed(
                path,
                format!("unsupported report schema {version} (expected {major}.x)"),
            ));
        }
        serde_json::from_value(value)
            .map_err(|e| Error::malformed(path, format!("bad report: {e}")))
    }

    pub fn failed_cells(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Runs every cell of `plan` on a pool of `jobs` threads.
pub fn run_plan(plan: &ExperimentPlan, jobs: usize) -> Result<EvalReport> {
    plan.validate()?;
    if jobs == 0 {
        return Err(Error::invalid("jobs must be >= 1"));
    }
    let ds = plan.dataset.load()?;
    let splits: BTreeMap<OodMode, OodSplit> = dedup(&plan.ood_modes)
        .into_iter()
        .map(|m| Ok((m, make_ood_split(&ds, m)?)))
        .collect::<Result<_>>()?;
    let cells = plan.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {jobs} worker threads: {e}")))?;
    let mut rows: Vec<MetricRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| evaluate_cell(plan, cell, &splits[&cell.mode]))
            .collect()
    });
    let variant_rank = |v: Variant| Variant::ALL.iter().position(|&x| x == v);
    rows.sort_by(|a, b| {
        (variant_rank(a.variant), &a.config, a.seed, a.mode).cmp(&(
            variant_rank(b.variant),
            &b.config,
            b.seed,
            b.mode,
        ))
    });

    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION.to_string(),
        generated_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        plan: plan.clone(),
        rows,
        aggregates: Vec::new(),
    };
    let mut aggregates = Vec::new();
    for selection in [Selection::PerSeedBest, Selection::BestAvgConfig] {
        aggregates.extend(select_best(&report, selection, &plan.selection_criterion)?);
    }
    aggregates.sort_by(|a, b| {
        (variant_rank(a.variant), a.mode, a.selection).cmp(&(
            variant_rank(b.variant),
            b.mode,
            b.selection,
        ))
    });
    report.aggregates = aggregates;
    Ok(report)
}

fn evaluate_cell(plan: &ExperimentPlan, cell: &Cell, split: &OodSplit) -> MetricRow {
    let c = &cell.config;
    let mut row = MetricRow {
        variant: c.variant,
        config: cell.point.label(),
        params: cell.point.clone(),
        seed: c.seed,
        mode: cell.mode,
        held_out_class: split.ood.class_names()[split.held_out_class].clone(),
        status: CellStatus::Ok,
        metrics: BTreeMap::new(),
    };
    match cell_metrics(plan, c, split) {
        Ok(m) => row.metrics = m,
        Err(e) => row.status = CellStatus::Failed(e.to_string()),
    }
    row
}

fn cell_metrics(
    plan: &ExperimentPlan,
    config: &HeadConfig,
    split: &OodSplit,
) -> Result<BTreeMap<String, Option<f64>>> {
    let model = train_head(config, &split.in_train)?;
    let mut m = BTreeMap::new();

    let in_pd = model.predict(split.in_test.features())?;
    let preds: Vec<ScoredPrediction> = in_pd
        .iter()
        .zip(split.in_test.labels())
        .map(|(pd, &y)| ScoredPrediction::from_distribution(pd, y))
        .collect::<Result<_>>()?;
    let (acc, f1) = accuracy_and_macro_f1(&preds)?;
    m.insert("accuracy".to_string(), Some(acc));
    m.insert("f1".to_string(), Some(f1));
    m.insert("ace".to_string(), Some(ace(&preds, plan.ace_bins)?));
    m.insert("raulc".to_string(), raulc(&preds));

    let ood_pd = model.predict(split.ood.features())?;
    for &kind in &dedup(&plan.uncertainty_scores) {
        if !kind.applies_to(config) {
            continue;
        }
        let scores = OodScoreSet::new(
            ood_scores(kind, &model, &in_pd, split.in_test.features())?,
            ood_scores(kind, &model, &ood_pd, split.ood.features())?,
        )?;
        m.insert(format!("roc_auc.{kind}"), Some(roc_auc(&scores)));
        m.insert(format!("pr_auc.{kind}"), Some(pr_auc(&scores)));
        m.insert(format!("fpr95.{kind}"), Some(fpr_at_95_tpr(&scores)));
    }
    Ok(m)
}

fn ood_scores(
    kind: ScoreKind,
    model: &HeadModel,
    pds: &[crate::heads::PredictiveDistribution],
    features: &crate::numerics::Matrix,
) -> Result<Vec<f64>> {
    match kind {
        ScoreKind::Entropy => Ok(pds.iter().map(|pd| predictive_entropy(&pd.probs)).collect()),
        ScoreKind::LatentVariance => pds
            .iter()
            .map(|pd| {
                let reps = pd
                    .latent_reps
                    .as_ref()
                    .ok_or_else(|| Error::invalid("head has no latent representations"))?;
                latent_variance_score(reps)
            })
            .collect(),
        ScoreKind::Density => model
            .density_scores(features)
            .ok_or_else(|| Error::invalid("only GDA heads provide density scores")),
    }
}

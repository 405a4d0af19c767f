//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! or training failure. Diagnostics go to stderr; results go to stdout or the
//! `--out` file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench::{
    render_markdown, run_plan, select_best, EvalReport, ExperimentPlan, ScoreKind, Selection,
};
use crate::data::{
    gen_synthetic, load_latents, make_ood_split, write_csv, write_latf, LatentDataset,
    LatentFormat, OodMode, SplitTag, SynthSpec,
};
use crate::error::{Error, ErrorClass, Result};
use crate::heads::{train_head, HeadConfig, HeadModel, Variant};
use crate::metrics::{
    accuracy_and_macro_f1, ace, fpr_at_95_tpr, latent_variance_score, pr_auc, predictive_entropy,
    raulc, roc_auc, OodScoreSet, ScoredPrediction,
};

#[derive(Debug, Parser)]
#[command(
    name = "lur",
    version,
    about = "Uncertainty heads over frozen latent features"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Gaussian-blob latent dataset.
    GenSynth(GenSynthArgs),
    /// Validate a latent file and convert it between CSV and LATF.
    Ingest(IngestArgs),
    /// Train one head and save it with a JSON config sidecar.
    Train(TrainArgs),
    /// In-distribution metrics of a saved head.
    Eval(EvalArgs),
    /// OOD metrics of a head trained on a class-holdout split.
    OodEval(OodEvalArgs),
    /// Run an experiment plan and write the JSON report.
    Grid(GridArgs),
    /// Render a JSON report as markdown tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    per_class: usize,
    /// Stdev of the class means around the origin.
    #[arg(long, default_value_t = 3.0)]
    mean_scale: f64,
    /// Within-class stdev.
    #[arg(long, default_value_t = 0.5)]
    stdev: f64,
    #[arg(long)]
    seed: u64,
    /// Output file; `.csv` writes CSV, anything else LATF.
    #[arg(long)]
    out: PathBuf,
    /// Override the format implied by the extension.
    #[arg(long)]
    format: Option<LatentFormat>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Latent file (`.csv` or LATF).
    #[arg(long)]
    data: PathBuf,
    /// Override the format implied by the extension.
    #[arg(long)]
    data_format: Option<LatentFormat>,
    /// Class count for CSV input (default: max label + 1).
    #[arg(long)]
    classes: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<LatentDataset> {
        let format = self
            .data_format
            .unwrap_or_else(|| LatentFormat::from_path(&self.data));
        load_latents(&self.data, format, self.classes)
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Converted copy; omitted to only validate.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<LatentFormat>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Head config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// regular | sub_ensemble | lur | rlur | rlle | bbb_ll | gda
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: u64,
    /// Transformations (LUR), heads (SE, RLLE) or samples (BBB-LL).
    #[arg(long)]
    members: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the in-distribution part of this class-holdout split.
    #[arg(long)]
    ood_mode: Option<OodMode>,
    /// Model file; the config is written to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Rows to evaluate: test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    ace_bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OodEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Holdout used when the model was trained.
    #[arg(long)]
    mode: OodMode,
    /// Scores to report (repeatable); default: every score the head supports.
    #[arg(long = "score")]
    scores: Vec<ScoreKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Experiment plan JSON. Relative dataset paths resolve against its directory.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; the report does not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write the markdown rendering here.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    /// Recompute the in-distribution aggregation with this metric key.
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::OodEval(a) => ood_eval(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    }
}

fn write_dataset(ds: &LatentDataset, path: &Path, format: Option<LatentFormat>) -> Result<()> {
    match format.unwrap_or_else(|| LatentFormat::from_path(path)) {
        LatentFormat::Csv => write_csv(ds, path),
        LatentFormat::Latf => write_latf(ds, path),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn summary(ds: &LatentDataset) -> Value {
    json!({
        "rows": ds.len(),
        "dim": ds.dim(),
        "classes": ds.num_classes(),
        "class_names": ds.class_names(),
        "train_counts": ds.class_counts(SplitTag::Train),
        "test_counts": ds.class_counts(SplitTag::Test),
    })
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let ds = gen_synthetic(&SynthSpec {
        classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        cluster_mean_scale: a.mean_scale,
        cluster_stdev: a.stdev,
        seed: a.seed,
    })?;
    write_dataset(&ds, &a.out, a.format)?;
    eprintln!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ds = a.input.load()?;
    if let Some(out) = &a.out {
        write_dataset(&ds, out, a.format)?;
        eprintln!("wrote {}", out.display());
    }
    emit(&summary(&ds), None)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::malformed(p, format!("bad config JSON: {e}")))?;
            // the seed flag is mandatory and always wins
            if let Some(obj) = v.as_object_mut() {
                obj.insert("seed".into(), json!(a.seed));
                if let Some(variant) = a.variant {
                    obj.insert("variant".into(), json!(variant));
                }
            }
            serde_json::from_value::<HeadConfig>(v)
                .map_err(|e| Error::malformed(p, format!("bad config: {e}")))?
        }
        None => {
            let variant = a
                .variant
                .ok_or_else(|| Error::invalid("--variant is required without --config"))?;
            HeadConfig::new(variant, a.seed)
        }
    };
    if let Some(n) = a.members {
        config.members = n;
    }
    if let Some(lr) = a.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;

    let ds = a.data.load()?;
    let train_set = match a.ood_mode {
        Some(mode) => make_ood_split(&ds, mode)?.in_train,
        None => ds,
    };
    let model = train_head(&config, &train_set)?;
    model.save(&a.out)?;
    eprintln!("saved {} head to {}", config.variant, a.out.display());
    emit(
        &json!({
            "model": a.out,
            "variant": config.variant,
            "dim": model.dim,
            "classes": model.classes,
            "train_rows": train_set.indices_of(SplitTag::Train).len(),
        }),
        None,
    )
}

fn rows_for(ds: &LatentDataset, split: &str) -> Result<LatentDataset> {
    match split {
        "all" => Ok(ds.clone()),
        other => ds.split(other.parse::<SplitTag>()?),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = HeadModel::load(&a.model)?;
    let ds = a.data.load()?;
    if ds.num_classes() != model.classes || ds.dim() != model.dim {
        return Err(Error::invalid(format!(
            "model expects D={} C={}, data has D={} C={}",
            model.dim,
            model.classes,
            ds.dim(),
            ds.num_classes()
        )));
    }
    let rows = rows_for(&ds, &a.split)?;
    if rows.is_empty() {
        return Err(Error::invalid(format!("no `{}` rows to evaluate", a.split)));
    }
    let preds: Vec<ScoredPrediction> = model
        .predict(rows.features())?
        .iter()
        .zip(rows.labels())
        .map(|(pd, &y)| ScoredPrediction::from_distribution(pd, y))
        .collect::<Result<_>>()?;
    let (accuracy, f1) = accuracy_and_macro_f1(&preds)?;
    emit(
        &json!({
            "variant": model.config.variant,
            "rows": preds.len(),
            "accuracy": accuracy,
            "f1": f1,
            "ace": ace(&preds, a.ace_bins)?,
            "raulc": raulc(&preds),
        }),
        a.out.as_deref(),
    )
}

fn ood_eval(a: OodEvalArgs) -> Result<()> {
    let model = HeadModel::load(&a.model)?;
    let ds = a.data.load()?;
    let split = make_ood_split(&ds, a.mode)?;
    if split.in_test.num_classes() != model.classes || ds.dim() != model.dim {
        return Err(Error::invalid(format!(
            "model expects D={} C={}; the OOD-{} split of this data has D={} C={}",
            model.dim,
            model.classes,
            a.mode,
            ds.dim(),
            split.in_test.num_classes()
        )));
    }
    let kinds: Vec<ScoreKind> = if a.scores.is_empty() {
        ScoreKind::ALL.to_vec()
    } else {
        a.scores.clone()
    };
    let in_pd = model.predict(split.in_test.features())?;
    let ood_pd = model.predict(split.ood.features())?;
    let mut results = serde_json::Map::new();
    for kind in kinds {
        let score = |pds: &[crate::heads::PredictiveDistribution], x| -> Result<Vec<f64>> {
            match kind {
                ScoreKind::Entropy => {
                    Ok(pds.iter().map(|p| predictive_entropy(&p.probs)).collect())
                }
                ScoreKind::LatentVariance => pds
                    .iter()
                    .map(|p| match &p.latent_reps {
                        Some(r) => latent_variance_score(r),
                        None => Err(Error::invalid(format!(
                            "{} heads have no latent representations",
                            model.config.variant
                        ))),
                    })
                    .collect(),
                ScoreKind::Density => model
                    .density_scores(x)
                    .ok_or_else(|| Error::invalid("density scores need a gda head")),
            }
        };
        let pair = score(&in_pd, split.in_test.features())
            .and_then(|i| Ok((i, score(&ood_pd, split.ood.features())?)));
        let (in_s, ood_s) = match pair {
            Ok(p) => p,
            Err(e) if a.scores.is_empty() => {
                eprintln!("skipping {kind}: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let set = OodScoreSet::new(in_s, ood_s)?;
        results.insert(
            kind.to_string(),
            json!({
                "roc_auc": roc_auc(&set),
                "pr_auc": pr_auc(&set),
                "fpr95": fpr_at_95_tpr(&set),
            }),
        );
    }
    emit(
        &json!({
            "variant": model.config.variant,
            "mode": a.mode,
            "held_out_class": ds.class_names()[split.held_out_class],
            "in_rows": split.in_test.len(),
            "ood_rows": split.ood.len(),
            "scores": results,
        }),
        a.out.as_deref(),
    )
}

fn grid(a: GridArgs) -> Result<()> {
    let text = fs::read_to_string(&a.plan).map_err(|e| Error::io(&a.plan, e))?;
    let mut plan = ExperimentPlan::from_json(&a.plan, &text)?;
    if let Some(dir) = a.plan.parent() {
        plan.resolve_paths(dir);
    }
    let report = run_plan(&plan, a.jobs)?;
    fs::write(&a.out, report.to_json()? + "\n").map_err(|e| Error::io(&a.out, e))?;
    if let Some(md) = &a.markdown {
        fs::write(md, render_markdown(&report)?).map_err(|e| Error::io(md, e))?;
    }
    eprintln!(
        "{} cells ({} failed) written to {}",
        report.rows.len(),
        report.failed_cells(),
        a.out.display()
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let mut report = EvalReport::from_json(&a.report, &text)?;
    if let Some(c) = a.criterion {
        let mut rows = Vec::new();
        for selection in [Selection::PerSeedBest, Selection::BestAvgConfig] {
            rows.extend(select_best(&report, selection, &c)?);
        }
        report.plan.selection_criterion = c;
        report.aggregates = rows;
    }
    let md = render_markdown(&report)?;
    match &a.out {
        Some(p) => fs::write(p, md).map_err(|e| Error::io(p, e)),
        None => {
            print!("{md}");
            Ok(())
        }
    }
}

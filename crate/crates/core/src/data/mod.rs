//! Latent datasets: the in-memory representation, file formats, a synthetic
//! Gaussian-blob generator and class-holdout OOD splits.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub use io::{load_latents, write_csv, write_latf, LatentFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// N latent vectors of dimension D with class labels and train/test tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
    splits: Vec<SplitTag>,
}

impl LatentDataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
        splits: Vec<SplitTag>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 || features.cols() == 0 {
            return Err(Error::invalid(
                "dataset needs at least one row and one column",
            ));
        }
        if labels.len() != n || splits.len() != n {
            return Err(Error::invalid(format!(
                "dataset has {n} rows but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(row) = labels.iter().position(|&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "row {row}: label {} >= class count {}",
                labels[row],
                class_names.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("dataset features contain non-finite values"));
        }
        Ok(LatentDataset {
            features,
            labels,
            class_names,
            splits,
        })
    }

    pub fn default_class_names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("class{i}")).collect()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[SplitTag] {
        &self.splits
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices_of(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == tag).collect()
    }

    /// Rows `idx`, keeping class names.
    pub fn subset(&self, idx: &[usize]) -> Result<LatentDataset> {
        LatentDataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
            idx.iter().map(|&i| self.splits[i]).collect(),
        )
    }

    pub fn split(&self, tag: SplitTag) -> Result<LatentDataset> {
        let idx = self.indices_of(tag);
        if idx.is_empty() {
            return Err(Error::invalid(format!("dataset has no {tag} rows")));
        }
        self.subset(&idx)
    }

    /// Per-class row counts restricted to `tag`.
    pub fn class_counts(&self, tag: SplitTag) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (l, s) in self.labels.iter().zip(&self.splits) {
            if *s == tag {
                counts[*l] += 1;
            }
        }
        counts
    }
}

/// Parameters of the isotropic Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub cluster_mean_scale: f64,
    pub cluster_stdev: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::invalid("synthetic counts must all be >= 1"));
        }
        if !(self.cluster_stdev > 0.0) || !self.cluster_stdev.is_finite() {
            return Err(Error::invalid("cluster_stdev must be positive and finite"));
        }
        if !(self.cluster_mean_scale >= 0.0) || !self.cluster_mean_scale.is_finite() {
            return Err(Error::invalid(
                "cluster_mean_scale must be non-negative and finite",
            ));
        }
        Ok(())
    }
}

/// Draws one mean per class from `N(0, scale² I)`, then `per_class` rows from
/// `N(mean, stdev² I)`. The last fifth (rounded down) of each class is tagged
/// `test`, the rest `train`. Rows are grouped by class.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<LatentDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| rng.normal_vec(spec.dim, 0.0, spec.cluster_mean_scale))
        .collect();

    let n = spec.classes * spec.per_class;
    let n_test = spec.per_class / 5;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..spec.per_class {
            data.extend(mean.iter().map(|&m| m + spec.cluster_stdev * rng.normal()));
            labels.push(c);
            splits.push(if i < spec.per_class - n_test {
                SplitTag::Train
            } else {
                SplitTag::Test
            });
        }
    }
    LatentDataset::new(
        Matrix::from_vec(n, spec.dim, data)?,
        labels,
        LatentDataset::default_class_names(spec.classes),
        splits,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodMode {
    /// Hold out the least frequent class.
    Min,
    /// Hold out the most frequent class.
    Max,
}

impl fmt::Display for OodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodMode::Min => "min",
            OodMode::Max => "max",
        })
    }
}

impl FromStr for OodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(OodMode::Min),
            "max" => Ok(OodMode::Max),
            other => Err(Error::invalid(format!(
                "unknown OOD mode `{other}` (min|max)"
            ))),
        }
    }
}

/// A class-holdout split. `in_train`/`in_test` are re-indexed densely;
/// `ood` keeps the original class indexing.
#[derive(Debug, Clone)]
pub struct OodSplit {
    pub in_train: LatentDataset,
    pub in_test: LatentDataset,
    pub ood: LatentDataset,
    pub held_out_class: usize,
    pub mode: OodMode,
    /// `kept_classes[new] = original` for the in-distribution label space.
    pub kept_classes: Vec<usize>,
}

/// Picks the held-out class from train-row counts. Ties go to the lowest index.
pub fn held_out_class(train_counts: &[usize], mode: OodMode) -> usize {
    let mut best = 0;
    for (c, &n) in train_counts.iter().enumerate().skip(1) {
        let better = match mode {
            OodMode::Min => n < train_counts[best],
            OodMode::Max => n > train_counts[best],
        };
        if better {
            best = c;
        }
    }
    best
}

pub fn make_ood_split(ds: &LatentDataset, mode: OodMode) -> Result<OodSplit> {
    let c = ds.num_classes();
    if c < 2 {
        return Err(Error::invalid("an OOD split needs at least two classes"));
    }
    let counts = ds.class_counts(SplitTag::Train);
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class `{}` has no train rows",
            ds.class_names()[empty]
        )));
    }
    let held = held_out_class(&counts, mode);
    let kept_classes: Vec<usize> = (0..c).filter(|&k| k != held).collect();
    let mut remap = vec![usize::MAX; c];
    for (new, &orig) in kept_classes.iter().enumerate() {
        remap[orig] = new;
    }
    let kept_names: Vec<String> = kept_classes
        .iter()
        .map(|&k| ds.class_names()[k].clone())
        .collect();

    let pick = |tag: SplitTag| -> Result<LatentDataset> {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.splits()[i] == tag && ds.labels()[i] != held)
            .collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!(
                "no in-distribution {tag} rows left"
            )));
        }
        LatentDataset::new(
            ds.features().select_rows(&idx),
            idx.iter().map(|&i| remap[ds.labels()[i]]).collect(),
            kept_names.clone(),
            vec![tag; idx.len()],
        )
    };
    let in_train = pick(SplitTag::Train)?;
    let in_test = pick(SplitTag::Test)?;
    let ood_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == held).collect();
    let ood = ds.subset(&ood_idx)?;

    Ok(OodSplit {
        in_train,
        in_test,
        ood,
        held_out_class: held,
        mode,
        kept_classes,
    })
}

//! CSV and LATF readers/writers.
//!
//! CSV: header `f0,...,f{D-1},label,split`, one row per instance, `split` is
//! `train` or `test`.
//!
//! LATF (little-endian):
//!
//! ```text
//! "LATF" | u32 version=1 | u32 N | u32 D | u32 C
//! u8 split flag × N        (0 = train, 1 = test)
//! u32 label × N
//! f32 feature × N·D        (row-major)
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{LatentDataset, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const LATF_MAGIC: &[u8; 4] = b"LATF";
const LATF_VERSION: u32 = 1;
const LATF_HEADER: usize = 4 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFormat {
    Csv,
    Latf,
}

impl LatentFormat {
    /// Guess from the file extension, defaulting to LATF.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LatentFormat::Csv,
            _ => LatentFormat::Latf,
        }
    }
}

impl FromStr for LatentFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(LatentFormat::Csv),
            "latf" => Ok(LatentFormat::Latf),
            other => Err(Error::invalid(format!(
                "unknown format `{other}` (csv|latf)"
            ))),
        }
    }
}

/// Reads a latent dataset. `declared_classes` fixes C for CSV input (LATF
/// carries it in the header); when absent C is `max label + 1`.
pub fn load_latents(
    path: &Path,
    format: LatentFormat,
    declared_classes: Option<usize>,
) -> Result<LatentDataset> {
    match format {
        LatentFormat::Csv => read_csv(path, declared_classes),
        LatentFormat::Latf => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let ds = parse_latf(path, &bytes)?;
            if let Some(c) = declared_classes {
                if c != ds.num_classes() {
                    return Err(Error::malformed(
                        path,
                        format!("header declares {} classes, expected {c}", ds.num_classes()),
                    ));
                }
            }
            Ok(ds)
        }
    }
}

fn read_csv(path: &Path, declared_classes: Option<usize>) -> Result<LatentDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::malformed(path, format!("unreadable header: {e}")))?
        .clone();
    let cols = header.len();
    if cols < 3 {
        return Err(Error::malformed(
            path,
            "header needs at least one feature, label and split",
        ));
    }
    let dim = cols - 2;
    for (i, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::malformed(
                path,
                format!("header column {i} is `{name}`, expected `f{i}`"),
            ));
        }
    }
    if &header[dim] != "label" || &header[dim + 1] != "split" {
        return Err(Error::malformed(path, "header must end with `label,split`"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, row, e.to_string()))?;
        if record.len() != cols {
            return Err(Error::format(
                path,
                row,
                format!("expected {cols} fields, found {}", record.len()),
            ));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::format(path, row, format!("bad float `{field}`")))?;
            if !v.is_finite() {
                return Err(Error::format(path, row, "non-finite feature value"));
            }
            data.push(v);
        }
        let label: usize = record[dim]
            .parse()
            .map_err(|_| Error::format(path, row, format!("bad label `{}`", &record[dim])))?;
        if let Some(c) = declared_classes {
            if label >= c {
                return Err(Error::format(
                    path,
                    row,
                    format!("label {label} >= declared class count {c}"),
                ));
            }
        }
        labels.push(label);
        splits.push(
            SplitTag::from_str(&record[dim + 1]).map_err(|_| {
                Error::format(path, row, format!("bad split `{}`", &record[dim + 1]))
            })?,
        );
    }
    if labels.is_empty() {
        return Err(Error::malformed(path, "no data rows"));
    }
    let c = declared_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let n = labels.len();
    LatentDataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels,
        LatentDataset::default_class_names(c),
        splits,
    )
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn parse_latf(path: &Path, bytes: &[u8]) -> Result<LatentDataset> {
    if bytes.len() < LATF_HEADER || &bytes[..4] != LATF_MAGIC {
        return Err(Error::malformed(path, "missing LATF magic"));
    }
    let version = read_u32(bytes, 4);
    if version != LATF_VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported LATF version {version}"),
        ));
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    let c = read_u32(bytes, 16) as usize;
    if n == 0 || d == 0 || c == 0 {
        return Err(Error::malformed(
            path,
            format!("degenerate header N={n} D={d} C={c}"),
        ));
    }
    let expected = LATF_HEADER + n + 4 * n + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::malformed(
            path,
            format!("file is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let flags = &bytes[LATF_HEADER..LATF_HEADER + n];
    let labels_at = LATF_HEADER + n;
    let feats_at = labels_at + 4 * n;

    let mut splits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for row in 0..n {
        splits.push(match flags[row] {
            0 => SplitTag::Train,
            1 => SplitTag::Test,
            f => return Err(Error::format(path, row, format!("bad split flag {f}"))),
        });
        let label = read_u32(bytes, labels_at + 4 * row) as usize;
        if label >= c {
            return Err(Error::format(
                path,
                row,
                format!("label {label} >= class count {c}"),
            ));
        }
        labels.push(label);
        for k in 0..d {
            let at = feats_at + 4 * (row * d + k);
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"));
            if !v.is_finite() {
                return Err(Error::format(path, row, "non-finite feature value"));
            }
            data.push(f64::from(v));
        }
    }
    LatentDataset::new(
        Matrix::from_vec(n, d, data)?,
        labels,
        LatentDataset::default_class_names(c),
        splits,
    )
}

/// Serializes to LATF. Features are narrowed to `f32`.
pub fn encode_latf(ds: &LatentDataset) -> Vec<u8> {
    let n = ds.len();
    let d = ds.dim();
    let mut out = Vec::with_capacity(LATF_HEADER + 5 * n + 4 * n * d);
    out.extend_from_slice(LATF_MAGIC);
    for v in [LATF_VERSION, n as u32, d as u32, ds.num_classes() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(ds.splits().iter().map(|s| match s {
        SplitTag::Train => 0u8,
        SplitTag::Test => 1u8,
    }));
    for &l in ds.labels() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in ds.features().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_latf(ds: &LatentDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_latf(ds)).map_err(|e| Error::io(path, e))
}

pub fn write_csv(ds: &LatentDataset, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("split".into());
    w.write_record(&header).map_err(io_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds
            .features()
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        rec.push(ds.labels()[i].to_string());
        rec.push(ds.splits()[i].to_string());
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

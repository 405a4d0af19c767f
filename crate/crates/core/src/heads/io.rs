//! Binary model files.
//!
//! Layout (little-endian): magic `LURH`, `u32` version, `u8` variant tag,
//! `u8` flags (GDA: 1 = per-class covariance), `u32` D, `u32` C, `u32` n
//! (blocks that follow the fixed part), `u64` seed, then `f64` arrays:
//!
//! - regular: W (C·D), b (C)
//! - sub_ensemble, rlle: n × [W, b]
//! - lur, rlur: W, b, then n × [W_i (D·D), b_i (D)]
//! - bbb_ll: μ_W, μ_b, ρ_W, ρ_b
//! - gda: means (C·D), log priors (C), n × [Cholesky factor (D·D)], n log-dets
//!
//! The originating [`HeadConfig`] is stored next to the blob as
//! `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use super::bbb::BbbHead;
use super::gda::{Covariance, GdaModel};
use super::linear::{Affine, LinearHead};
use super::lur::LurHead;
use super::{HeadConfig, HeadModel, HeadParams, Variant};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"LURH";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 1 + 1 + 4 + 4 + 4 + 8;

fn variant_tag(v: Variant) -> u8 {
    Variant::ALL
        .iter()
        .position(|&x| x == v)
        .expect("listed variant") as u8
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Writer(Vec<u8>);

impl Writer {
    fn floats(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn linear(&mut self, h: &LinearHead) {
        self.floats(h.weight.as_slice());
        self.floats(&h.bias);
    }
}

pub fn encode_model(model: &HeadModel) -> Vec<u8> {
    let (blocks, flags) = match &model.params {
        HeadParams::Linear(_) | HeadParams::Bbb(_) => (0, 0u8),
        HeadParams::Ensemble(hs) => (hs.len(), 0),
        HeadParams::Lur(h) => (h.transforms.len(), 0),
        HeadParams::Gda(g) => (
            g.chols.len(),
            u8::from(g.covariance == Covariance::PerClass),
        ),
    };
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.0.push(variant_tag(model.config.variant));
    w.0.push(flags);
    for v in [model.dim, model.classes, blocks] {
        w.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    w.0.extend_from_slice(&model.config.seed.to_le_bytes());
    match &model.params {
        HeadParams::Linear(h) => w.linear(h),
        HeadParams::Ensemble(hs) => hs.iter().for_each(|h| w.linear(h)),
        HeadParams::Lur(h) => {
            w.linear(&h.classifier);
            for t in &h.transforms {
                w.floats(t.weight.as_slice());
                w.floats(&t.bias);
            }
        }
        HeadParams::Bbb(h) => {
            w.linear(&h.mu);
            w.linear(&h.rho);
        }
        HeadParams::Gda(g) => {
            w.floats(g.means.as_slice());
            w.floats(&g.log_priors);
            g.chols.iter().for_each(|l| w.floats(l.as_slice()));
            w.floats(&g.log_dets);
        }
    }
    w.0
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.path, "model file is truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::malformed(self.path, "model dimensions overflow"))?,
        )?;
        let v: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::malformed(
                self.path,
                "model contains non-finite parameters",
            ));
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.floats(rows * cols)?)
    }

    fn linear(&mut self, c: usize, d: usize) -> Result<LinearHead> {
        Ok(LinearHead {
            weight: self.matrix(c, d)?,
            bias: self.floats(c)?,
        })
    }
}

/// Parses a blob; `config` is the sidecar and must name the same variant.
pub fn decode_model(path: &Path, bytes: &[u8], config: HeadConfig) -> Result<HeadModel> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::malformed(path, "missing LURH magic"));
    }
    let mut r = Reader { path, bytes, at: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported model version {version}"),
        ));
    }
    let tag = r.u8()? as usize;
    let variant = *Variant::ALL
        .get(tag)
        .ok_or_else(|| Error::malformed(path, format!("unknown variant tag {tag}")))?;
    if variant != config.variant {
        return Err(Error::malformed(
            path,
            format!(
                "blob holds a {variant} head but the sidecar says {}",
                config.variant
            ),
        ));
    }
    let flags = r.u8()?;
    let d = r.u32()?;
    let c = r.u32()?;
    let n = r.u32()?;
    let seed = r.u64()?;
    if d == 0 || c == 0 {
        return Err(Error::malformed(
            path,
            format!("degenerate dimensions D={d} C={c}"),
        ));
    }
    if seed != config.seed {
        return Err(Error::malformed(
            path,
            "blob seed differs from the sidecar seed",
        ));
    }

    let params = match variant {
        Variant::Regular => HeadParams::Linear(r.linear(c, d)?),
        Variant::SubEnsemble | Variant::Rlle => {
            HeadParams::Ensemble((0..n).map(|_| r.linear(c, d)).collect::<Result<_>>()?)
        }
        Variant::Lur | Variant::Rlur => {
            let classifier = r.linear(c, d)?;
            let transforms = (0..n)
                .map(|_| {
                    Ok(Affine {
                        weight: r.matrix(d, d)?,
                        bias: r.floats(d)?,
                    })
                })
                .collect::<Result<_>>()?;
            HeadParams::Lur(LurHead {
                classifier,
                transforms,
            })
        }
        Variant::BbbLl => HeadParams::Bbb(BbbHead {
            mu: r.linear(c, d)?,
            rho: r.linear(c, d)?,
        }),
        Variant::Gda => {
            let means = r.matrix(c, d)?;
            let log_priors = r.floats(c)?;
            let chols = (0..n).map(|_| r.matrix(d, d)).collect::<Result<_>>()?;
            let log_dets = r.floats(n)?;
            let covariance = if flags & 1 == 1 {
                Covariance::PerClass
            } else {
                Covariance::Shared
            };
            let expected = if covariance == Covariance::Shared {
                1
            } else {
                c
            };
            if n != expected {
                return Err(Error::malformed(
                    path,
                    format!("expected {expected} covariance factors, found {n}"),
                ));
            }
            HeadParams::Gda(GdaModel {
                means,
                log_priors,
                covariance,
                chols,
                log_dets,
            })
        }
    };
    if r.at != bytes.len() {
        return Err(Error::malformed(
            path,
            format!("{} trailing bytes after the parameters", bytes.len() - r.at),
        ));
    }
    Ok(HeadModel {
        config,
        dim: d,
        classes: c,
        params,
    })
}

impl HeadModel {
    /// Writes the blob to `path` and the config to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_model(self)).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<HeadModel> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: HeadConfig = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(&side, format!("bad config JSON: {e}")))?;
        decode_model(path, &bytes, config)
    }
}

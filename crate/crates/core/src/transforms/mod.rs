//! Embedding-space preprocessing: per-dataset centering, discriminant
//! projections (see [`discriminant`]), covariance alignment, in-domain
//! whitening and length normalization.
//!
//! Every fit yields a [`LinearTransform`] `y = matrix * x + offset` (or a
//! [`DatasetMeans`] table for per-dataset centering), so chains compose
//! associatively and serialize to a single container.

mod discriminant;

pub use discriminant::{fit_lda, fit_lsda};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::data::{to_array1, EmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg;

const LXF_MAGIC: &[u8; 4] = b"LXF1";
const DMN_MAGIC: &[u8; 4] = b"DMN1";

/// Which fit produced a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Center,
    Lda,
    Lsda,
    Coral,
    Whiten,
    Compose,
}

impl TransformKind {
    fn tag(self) -> u8 {
        match self {
            TransformKind::Center => 0,
            TransformKind::Lda => 1,
            TransformKind::Lsda => 2,
            TransformKind::Coral => 3,
            TransformKind::Whiten => 4,
            TransformKind::Compose => 5,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => TransformKind::Center,
            1 => TransformKind::Lda,
            2 => TransformKind::Lsda,
            3 => TransformKind::Coral,
            4 => TransformKind::Whiten,
            5 => TransformKind::Compose,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown transform kind tag {other}"
                )))
            }
        })
    }
}

/// Affine map `y = matrix * x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
    pub kind: TransformKind,
}

impl LinearTransform {
    pub fn new(matrix: Array2<f64>, offset: Array1<f64>, kind: TransformKind) -> Result<Self> {
        if matrix.nrows() != offset.len() {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} rows but offset has {} entries",
                matrix.nrows(),
                offset.len()
            )));
        }
        if matrix.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("transform contains non-finite values".into()));
        }
        Ok(LinearTransform { matrix, offset, kind })
    }

    pub fn identity(dim: usize) -> Self {
        LinearTransform {
            matrix: Array2::eye(dim),
            offset: Array1::zeros(dim),
            kind: TransformKind::Compose,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "transform expects dim {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let y = self.matrix.dot(&to_array1(x)) + &self.offset;
        Ok(y.to_vec())
    }

    /// Apply to every record; parallel over records, output order preserved.
    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "transform expects dim {}, set has dim {}",
                self.in_dim(),
                set.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = set
            .records()
            .par_iter()
            .map(|rec| self.apply_vec(&rec.vector).expect("dims checked"))
            .collect();
        let mut m = Array2::zeros((rows.len(), self.out_dim()));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        set.with_vectors(m)
    }
}

/// `compose(t1, t2)` applies `t1` first: `apply(compose(t1,t2), x) ==
/// apply(t2, apply(t1, x))`.
pub fn compose(t1: &LinearTransform, t2: &LinearTransform) -> Result<LinearTransform> {
    if t2.in_dim() != t1.out_dim() {
        return Err(Error::DimensionMismatch(format!(
            "cannot compose: first transform outputs dim {}, second expects {}",
            t1.out_dim(),
            t2.in_dim()
        )));
    }
    let matrix = t2.matrix.dot(&t1.matrix);
    let offset = t2.matrix.dot(&t1.offset) + &t2.offset;
    LinearTransform::new(matrix, offset, TransformKind::Compose)
}

/// Per-dataset mean table fitted by [`fit_dataset_centering`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeans {
    dim: usize,
    means: BTreeMap<String, Array1<f64>>,
}

/// Behaviour of [`apply_centering`] for datasets unseen at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterFallback {
    /// Subtract the mean of all stored dataset means.
    GlobalMean,
    Error,
}

impl CenterFallback {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global_mean" | "global-mean" => Ok(CenterFallback::GlobalMean),
            "error" => Ok(CenterFallback::Error),
            other => Err(Error::InvalidArgument(format!(
                "unknown centering fallback '{other}'"
            ))),
        }
    }
}

impl DatasetMeans {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn datasets(&self) -> impl Iterator<Item = (&str, &Array1<f64>)> {
        self.means.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, dataset_id: &str) -> Option<&Array1<f64>> {
        self.means.get(dataset_id)
    }

    /// Mean of all stored dataset means (the unseen-dataset fallback).
    pub fn global_mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim);
        for v in self.means.values() {
            m += v;
        }
        m / self.means.len() as f64
    }
}

/// Arithmetic mean of each dataset present in `train`.
pub fn fit_dataset_centering(train: &EmbeddingSet) -> Result<DatasetMeans> {
    if train.is_empty() {
        return Err(Error::Degenerate("cannot fit centering on an empty set".into()));
    }
    let mut sums: BTreeMap<String, (Array1<f64>, usize)> = BTreeMap::new();
    for rec in train.iter() {
        let entry = sums
            .entry(rec.dataset_id.clone())
            .or_insert_with(|| (Array1::zeros(train.dim()), 0));
        entry.0 += &to_array1(&rec.vector);
        entry.1 += 1;
    }
    let means = sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    Ok(DatasetMeans {
        dim: train.dim(),
        means,
    })
}

/// Subtract each record's dataset mean; unseen datasets follow `fallback`.
pub fn apply_centering(
    set: &EmbeddingSet,
    means: &DatasetMeans,
    fallback: CenterFallback,
) -> Result<EmbeddingSet> {
    if set.dim() != means.dim {
        return Err(Error::DimensionMismatch(format!(
            "centering means have dim {}, set has dim {}",
            means.dim,
            set.dim()
        )));
    }
    let global = means.global_mean();
    let mut m = set.matrix();
    for (i, rec) in set.iter().enumerate() {
        let mean = match means.get(&rec.dataset_id) {
            Some(mu) => mu,
            None => match fallback {
                CenterFallback::GlobalMean => &global,
                CenterFallback::Error => {
                    return Err(Error::UnknownId(format!(
                        "dataset '{}' was not seen when centering was fitted",
                        rec.dataset_id
                    )))
                }
            },
        };
        let mut row = m.row_mut(i);
        row -= mean;
    }
    set.with_vectors(m)
}

fn relative_ridge(cov: &mut Array2<f64>, ridge: f64) -> Result<()> {
    if ridge < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    if ridge > 0.0 {
        let d = cov.nrows();
        let trace: f64 = (0..d).map(|i| cov[[i, i]]).sum();
        let r = ridge * trace / d as f64;
        for i in 0..d {
            cov[[i, i]] += r;
        }
    }
    Ok(())
}

/// Covariance alignment: maps source-domain embeddings so their covariance
/// matches the target domain's. `ridge` is relative: each covariance gets
/// `ridge * trace(C)/D` added to its diagonal before the matrix roots.
pub fn fit_coral(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    ridge: f64,
) -> Result<LinearTransform> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "source dim {} != target dim {}",
            source.dim(),
            target.dim()
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Degenerate("coral needs nonempty source and target".into()));
    }
    let (_, mut c_s) = linalg::covariance(source.matrix().view());
    let (_, mut c_t) = linalg::covariance(target.matrix().view());
    relative_ridge(&mut c_s, ridge)?;
    relative_ridge(&mut c_t, ridge)?;

    // Recoloring map: whiten with the source covariance, recolor with the
    // target's. cov(A x_s) = C_t.
    let whiten_s = linalg::spd_inv_sqrt(c_s.view())?;
    let color_t = linalg::spd_sqrt(c_t.view())?;
    let matrix = color_t.dot(&whiten_s);
    let dim = source.dim();
    LinearTransform::new(matrix, Array1::zeros(dim), TransformKind::Coral)
}

/// In-domain whitening `y = C^{-1/2} (x - mu)` with mean and covariance
/// taken from the in-domain set. Same relative `ridge` convention as
/// [`fit_coral`]; default 0 keeps the defining property exact.
pub fn fit_whitening(indomain: &EmbeddingSet, ridge: f64) -> Result<LinearTransform> {
    if indomain.is_empty() {
        return Err(Error::Degenerate("cannot fit whitening on an empty set".into()));
    }
    let (mean, mut cov) = linalg::covariance(indomain.matrix().view());
    relative_ridge(&mut cov, ridge)?;
    let w = linalg::spd_inv_sqrt(cov.view())?;
    let offset = -w.dot(&mean);
    LinearTransform::new(w, offset, TransformKind::Whiten)
}

/// Scale every vector to unit Euclidean norm.
pub fn length_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut m = set.matrix();
    for (i, rec) in set.iter().enumerate() {
        let norm = rec.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "cannot length-normalize zero vector '{}'",
                rec.utt_id
            )));
        }
        let mut row = m.row_mut(i);
        row /= norm;
    }
    set.with_vectors(m)
}

pub fn write_transform(t: &LinearTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(LXF_MAGIC).map_err(io_err)?;
    w.write_all(&[t.kind.tag()]).map_err(io_err)?;
    w.write_all(&(t.out_dim() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(t.in_dim() as u32).to_le_bytes()).map_err(io_err)?;
    for v in t.matrix.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for v in t.offset.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::parse(format!("{}", path.display()), "truncated container"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<LinearTransform> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(format!("{}", path.display()), "truncated header"))?;
    if &magic != LXF_MAGIC {
        return Err(Error::parse(
            format!("{}", path.display()),
            format!("bad magic {magic:?}, expected LXF1"),
        ));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::parse(format!("{}", path.display()), "truncated header"))?;
    let kind = TransformKind::from_tag(tag[0])?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| Error::parse(format!("{}", path.display()), "truncated header"))?;
    let rows = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)
        .map_err(|_| Error::parse(format!("{}", path.display()), "truncated header"))?;
    let cols = u32::from_le_bytes(b4) as usize;
    let mat = read_f64s(&mut r, rows * cols, path)?;
    let off = read_f64s(&mut r, rows, path)?;
    let matrix = Array2::from_shape_vec((rows, cols), mat)
        .map_err(|e| Error::parse(format!("{}", path.display()), e.to_string()))?;
    LinearTransform::new(matrix, Array1::from_vec(off), kind)
}

pub fn write_dataset_means(means: &DatasetMeans, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(DMN_MAGIC).map_err(io_err)?;
    w.write_all(&(means.dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(means.means.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, mean) in &means.means {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        for v in mean.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_dataset_means(path: impl AsRef<Path>) -> Result<DatasetMeans> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::parse(format!("{}", path.display()), msg.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != DMN_MAGIC {
        return Err(bad("bad magic, expected DMN1"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut means = BTreeMap::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|_| bad("truncated entry"))?;
        let len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated entry"))?;
        let name = String::from_utf8(name).map_err(|_| bad("invalid UTF-8 dataset id"))?;
        let vals = read_f64s(&mut r, dim, path)?;
        means.insert(name, Array1::from_vec(vals));
    }
    Ok(DatasetMeans { dim, means })
}

/// Detect the container kind of a serialized artifact by magic.
pub fn sniff_magic(path: impl AsRef<Path>) -> Result<[u8; 4]> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::parse(format!("{}", path.display()), "file shorter than 4 bytes"))?;
    Ok(magic)
}

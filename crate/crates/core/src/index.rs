//! Exact gallery search over known identity embeddings.
//!
//! Every query is a full scan. Scores accumulate in `f64` from the stored
//! `f32` values; under [`Metric::Cosine`] rows are stored pre-normalized,
//! queries are normalized on the fly, and each dot product is divided by the
//! stored row's norm so the score is the exact cosine of the stored values.
//!
//! # File format
//!
//! ```text
//! magic    "KEIX"
//! version  u32 = 1
//! metric   u8 (0 = Cosine, 1 = L2), 3 reserved zero bytes
//! dim      u32
//! count    u32
//! vectors  count × dim f32, row-major
//! ids      u32 byte length + UTF-8 JSON array of strings
//! crc32c   u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{cosine_confidence, l2_confidence};

pub const MAGIC: &[u8; 4] = b"KEIX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::L2 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::Cosine),
            1 => Some(Metric::L2),
            _ => None,
        }
    }

    /// Orders raw scores best-first.
    fn better(self, a: f64, b: f64) -> Ordering {
        match self {
            Metric::Cosine => b.total_cmp(&a),
            Metric::L2 => a.total_cmp(&b),
        }
    }

    /// Whether `raw_score` passes `threshold` under this metric.
    pub fn accepts(self, raw_score: f64, threshold: f64) -> bool {
        match self {
            Metric::Cosine => raw_score >= threshold,
            Metric::L2 => raw_score <= threshold,
        }
    }

    /// Confidence in `[0, 1]` stored on appearance records.
    pub fn confidence(self, raw_score: f64) -> f32 {
        match self {
            Metric::Cosine => cosine_confidence(raw_score),
            Metric::L2 => l2_confidence(raw_score),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric {other:?}, expected cosine or l2")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate identity {0:?}")]
    DuplicateId(String),
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroVector(usize),
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("{ids} ids for {rows} rows")]
    LengthMismatch { ids: usize, rows: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index version {0}")]
    VersionUnsupported(u32),
    #[error("index file is truncated")]
    TruncatedFile,
    #[error("index checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for IndexError {
    fn from(e: std::io::Error) -> Self {
        IndexError::Io(e.to_string())
    }
}

/// One ranked gallery hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub celebrity_id: String,
    /// Similarity under Cosine (higher is better), distance under L2 (lower is better).
    pub raw_score: f64,
    pub rank: usize,
    /// Gallery row of the hit.
    pub row: usize,
}

/// The known-identity gallery: `count × dim` row-major vectors plus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownIdentityIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    /// Euclidean norm of each stored row. Normalized `f32` rows are only
    /// unit length to about 1e-7, so cosine divides by these.
    norms: Vec<f64>,
    metric: Metric,
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|v| *v as f64 * *v as f64).sum::<f64>().sqrt()
}

/// `Σ f(row[i], q[i])` in `f64`, split over eight independent accumulators
/// so the loop vectorizes.
#[inline]
fn lanes(row: &[f32], q: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    const W: usize = 8;
    let mut acc = [0.0f64; W];
    let (rc, qc) = (row.chunks_exact(W), q.chunks_exact(W));
    let tail: f64 = rc.remainder().iter().zip(qc.remainder()).map(|(a, b)| f(*a as f64, *b)).sum();
    for (r, q) in rc.zip(qc) {
        for i in 0..W {
            acc[i] += f(r[i] as f64, q[i]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

impl KnownIdentityIndex {
    /// Builds an index, preserving row order. Cosine rows are normalized.
    pub fn build<S, R>(ids: &[S], rows: &[R], metric: Metric) -> Result<Self, IndexError>
    where
        S: AsRef<str>,
        R: AsRef<[f32]>,
    {
        if ids.len() != rows.len() {
            return Err(IndexError::LengthMismatch { ids: ids.len(), rows: rows.len() });
        }
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut index = Self::empty(dim, metric);
        let mut seen = HashSet::with_capacity(ids.len());
        for (id, row) in ids.iter().zip(rows) {
            if !seen.insert(id.as_ref()) {
                return Err(IndexError::DuplicateId(id.as_ref().to_string()));
            }
            index.push(id.as_ref(), row.as_ref())?;
        }
        Ok(index)
    }

    /// Builds from a flat row-major buffer.
    pub fn from_flat<S: AsRef<str>>(ids: &[S], dim: usize, vectors: &[f32], metric: Metric) -> Result<Self, IndexError> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(IndexError::DimMismatch { expected: dim, found: vectors.len() });
        }
        let rows: Vec<&[f32]> = vectors.chunks_exact(dim).collect();
        let mut index = Self::build(ids, &rows, metric)?;
        index.dim = dim;
        Ok(index)
    }

    pub fn empty(dim: usize, metric: Metric) -> Self {
        Self { dim, ids: Vec::new(), vectors: Vec::new(), norms: Vec::new(), metric }
    }

    fn push(&mut self, id: &str, row: &[f32]) -> Result<(), IndexError> {
        let pos = self.ids.len();
        if row.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, found: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos));
        }
        match self.metric {
            Metric::Cosine => {
                let n = norm(row);
                if n < 1e-12 {
                    return Err(IndexError::ZeroVector(pos));
                }
                self.vectors.extend(row.iter().map(|v| (*v as f64 / n) as f32));
            }
            Metric::L2 => self.vectors.extend_from_slice(row),
        }
        self.norms.push(norm(self.row(pos)));
        self.ids.push(id.to_string());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Same rows under a different metric. Going to Cosine normalizes.
    pub fn with_metric(&self, metric: Metric) -> Result<Self, IndexError> {
        if metric == self.metric {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(Self::empty(self.dim, metric));
        }
        Self::from_flat(&self.ids, self.dim, &self.vectors, metric)
    }

    /// Raw score of `query` against every row, in row order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, found: query.len() });
        }
        let rows = self.vectors.chunks_exact(self.dim.max(1));
        Ok(match self.metric {
            Metric::Cosine => {
                let norm = norm(query);
                if norm < 1e-12 {
                    return Err(IndexError::ZeroQuery);
                }
                let q: Vec<f64> = query.iter().map(|v| *v as f64 / norm).collect();
                rows.zip(&self.norms).map(|(r, n)| lanes(r, &q, |a, b| a * b) / n).collect()
            }
            Metric::L2 => {
                let q: Vec<f64> = query.iter().map(|v| *v as f64).collect();
                rows.map(|r| lanes(r, &q, |a, b| (a - b) * (a - b)).sqrt()).collect()
            }
        })
    }

    /// Top-`k` rows for `query`, best first; ties go to the lower row.
    pub fn search_topk(&self, query: &[f32], k: usize) -> Result<Vec<Match>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, found: query.len() });
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let scores = self.scores(query)?;
        let metric = self.metric;
        let cmp = |a: &usize, b: &usize| metric.better(scores[*a], scores[*b]).then(a.cmp(b));
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .enumerate()
            .map(|(rank, row)| Match { celebrity_id: self.ids[row].clone(), raw_score: scores[row], rank, row })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids_json = serde_json::to_vec(&self.ids).expect("string list serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4 + ids_json.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&[self.metric.code(), 0, 0, 0]);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(ids_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&ids_json);
        let crc = crc32c::crc32c(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, IndexError> {
        if data.len() < 4 {
            return Err(IndexError::TruncatedFile);
        }
        if &data[..4] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        if data.len() < HEADER_LEN {
            return Err(IndexError::TruncatedFile);
        }
        let u32_at = |off: usize| u32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]]);
        let version = u32_at(4);
        if version != VERSION {
            return Err(IndexError::VersionUnsupported(version));
        }
        let metric = Metric::from_code(data[8]).ok_or_else(|| IndexError::Malformed(format!("metric code {}", data[8])))?;
        let dim = u32_at(12) as usize;
        let count = u32_at(16) as usize;

        let vec_bytes = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(IndexError::TruncatedFile)?;
        let ids_len_at = HEADER_LEN + vec_bytes;
        if data.len() < ids_len_at + 4 + 4 {
            return Err(IndexError::TruncatedFile);
        }
        let ids_len = u32_at(ids_len_at) as usize;
        let ids_at = ids_len_at + 4;
        let crc_at = ids_at + ids_len;
        if data.len() < crc_at + 4 {
            return Err(IndexError::TruncatedFile);
        }
        if data.len() > crc_at + 4 {
            return Err(IndexError::Malformed(format!("{} trailing bytes", data.len() - crc_at - 4)));
        }
        let stored = u32_at(crc_at);
        let computed = crc32c::crc32c(&data[..crc_at]);
        if stored != computed {
            return Err(IndexError::ChecksumMismatch { stored, computed });
        }

        let vectors: Vec<f32> = data[HEADER_LEN..ids_len_at]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let ids: Vec<String> =
            serde_json::from_slice(&data[ids_at..crc_at]).map_err(|e| IndexError::Malformed(format!("ids: {e}")))?;
        if ids.len() != count {
            return Err(IndexError::LengthMismatch { ids: ids.len(), rows: count });
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos / dim.max(1)));
        }
        let norms: Vec<f64> = vectors.chunks_exact(dim.max(1)).map(norm).collect();
        if metric == Metric::Cosine {
            if let Some(row) = norms.iter().position(|n| *n < 1e-12) {
                return Err(IndexError::ZeroVector(row));
            }
        }
        Ok(Self { dim, ids, vectors, norms, metric })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let tmp = path.with_extension("keix.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Accepts the rank-0 match when it passes `threshold` under `metric`.
pub fn classify(matches: &[Match], threshold: f64, metric: Metric) -> Option<&Match> {
    matches.first().filter(|m| metric.accepts(m.raw_score, threshold))
}

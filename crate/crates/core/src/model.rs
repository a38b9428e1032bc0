//! Shared domain types: episodes, appearance records, intervals, and the
//! canonical `(t_ms, pos_index)` ordering.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Episode metadata as tracked by the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_id: String,
    pub series_id: String,
    pub season: u32,
    pub episode_number: u32,
    pub duration_ms: u64,
    #[serde(default)]
    pub processed: bool,
}

impl EpisodeMeta {
    pub fn new(
        episode_id: impl Into<String>,
        series_id: impl Into<String>,
        season: u32,
        episode_number: u32,
        duration_ms: u64,
    ) -> Self {
        Self {
            episode_id: episode_id.into(),
            series_id: series_id.into(),
            season,
            episode_number,
            duration_ms,
            processed: false,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.episode_id.is_empty() {
            return Err(ModelError::BadMeta("episode_id is empty".into()));
        }
        if self.season == 0 || self.episode_number == 0 {
            return Err(ModelError::BadMeta(
                "season and episode_number must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Face bounding box relative to the frame: `(x, y, width, height)`, all in `[0, 1]`.
///
/// Serialized as a JSON array of four numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
}

impl BBox {
    pub const FULL: BBox = BBox { x: 0.0, y: 0.0, width: 1.0, height: 1.0 };

    pub fn new(x: f32, y: f32, width: f32, height: f32) -> Self {
        Self { x, y, width, height }
    }

    /// True when every component lies in `[0, 1]` and the box stays inside the frame.
    pub fn is_valid(&self) -> bool {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        unit(self.x)
            && unit(self.y)
            && unit(self.width)
            && unit(self.height)
            && self.x + self.width <= 1.0
            && self.y + self.height <= 1.0
    }
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

/// One identity-resolved detection at a timestamp.
///
/// Fields this crate does not know about are kept in `extra` and written back
/// out unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceRecord {
    pub episode_id: String,
    pub celebrity_id: String,
    pub t_ms: u64,
    pub pos_index: u64,
    pub bbox: BBox,
    pub score: f32,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl AppearanceRecord {
    pub fn new(
        episode_id: impl Into<String>,
        celebrity_id: impl Into<String>,
        t_ms: u64,
        pos_index: u64,
        bbox: BBox,
        score: f32,
    ) -> Self {
        Self {
            episode_id: episode_id.into(),
            celebrity_id: celebrity_id.into(),
            t_ms,
            pos_index,
            bbox,
            score,
            extra: serde_json::Map::new(),
        }
    }

    #[inline]
    pub fn canonical_key(&self) -> (u64, u64) {
        (self.t_ms, self.pos_index)
    }
}

/// Lexicographic `(t_ms, pos_index)` comparison.
#[inline]
pub fn canonical_cmp(a: &AppearanceRecord, b: &AppearanceRecord) -> Ordering {
    a.canonical_key().cmp(&b.canonical_key())
}

/// Sorts records by [`canonical_cmp`]. Stable, so records sharing a key keep
/// their relative order (only possible for invalid input).
pub fn sort_canonical(records: &mut [AppearanceRecord]) {
    records.sort_by(canonical_cmp);
}

/// A half-open presence span `[start_ms, end_ms)` for one celebrity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub celebrity_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Interval {
    pub fn len_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn midpoint_ms(&self) -> u64 {
        self.start_ms + (self.end_ms - self.start_ms) / 2
    }

    /// Length of the intersection with `[from, to)`.
    pub fn overlap_ms(&self, from: u64, to: u64) -> u64 {
        let lo = self.start_ms.max(from);
        let hi = self.end_ms.min(to);
        hi.saturating_sub(lo)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("t_ms {t_ms} is outside episode duration {duration_ms}")]
    OutOfRange { t_ms: u64, duration_ms: u64 },
    #[error("bounding box {0:?} is outside the unit frame")]
    BadBBox([f32; 4]),
    #[error("score {0} is negative or not a number")]
    NegativeScore(f32),
    #[error("score {0} is above 1")]
    ScoreAboveOne(f32),
    #[error("record belongs to episode {found:?}, expected {expected:?}")]
    EpisodeMismatch { expected: String, found: String },
    #[error("invalid episode metadata: {0}")]
    BadMeta(String),
}

/// Checks a record against its episode. Returns the record unchanged when
/// every invariant holds.
pub fn validate_record<'a>(
    record: &'a AppearanceRecord,
    meta: &EpisodeMeta,
) -> Result<&'a AppearanceRecord, ModelError> {
    if record.episode_id != meta.episode_id {
        return Err(ModelError::EpisodeMismatch {
            expected: meta.episode_id.clone(),
            found: record.episode_id.clone(),
        });
    }
    if record.t_ms > meta.duration_ms {
        return Err(ModelError::OutOfRange { t_ms: record.t_ms, duration_ms: meta.duration_ms });
    }
    if !record.bbox.is_valid() {
        return Err(ModelError::BadBBox(record.bbox.into()));
    }
    // NaN fails both comparisons, so check the accepted range positively.
    if record.score.is_nan() || record.score < 0.0 {
        return Err(ModelError::NegativeScore(record.score));
    }
    if record.score > 1.0 {
        return Err(ModelError::ScoreAboveOne(record.score));
    }
    Ok(record)
}

/// Maps a cosine similarity in `[-1, 1]` to a confidence in `[0, 1]`.
pub fn cosine_confidence(similarity: f64) -> f32 {
    (((similarity + 1.0) / 2.0).clamp(0.0, 1.0)) as f32
}

/// Maps an L2 distance to a confidence in `(0, 1]`.
pub fn l2_confidence(distance: f64) -> f32 {
    (1.0 / (1.0 + distance.max(0.0))) as f32
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl JsonlError {
    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Parse { line, .. } => Some(*line),
            JsonlError::Io(_) => None,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<'a, W, I>(mut out: W, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a AppearanceRecord>,
{
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON Lines records. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<AppearanceRecord>, JsonlError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: i + 1, source })?;
        records.push(rec);
    }
    Ok(records)
}

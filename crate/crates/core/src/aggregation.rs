//! Episode timelines: merging worker outputs and turning point detections
//! into presence intervals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, validate_record, AppearanceRecord, EpisodeMeta, Interval, ModelError};
use crate::pipeline::WorkerOutput;

pub const DEFAULT_GAP_MS: u64 = 2_000;
pub const DEFAULT_TAIL_MS: u64 = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("worker chunks [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingChunks { a_start: u64, a_end: u64, b_start: u64, b_end: u64 },
    #[error("record from episode {found:?} merged into {expected:?}")]
    MixedEpisodes { expected: String, found: String },
    #[error("duplicate record key (t_ms={t_ms}, pos_index={pos_index})")]
    DuplicateKey { t_ms: u64, pos_index: u64 },
    #[error("record (t_ms={t_ms}, pos_index={pos_index}) has no matching worker output")]
    UnknownRecord { t_ms: u64, pos_index: u64 },
    #[error("record {index}: {source}")]
    InvalidRecord {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("unknown celebrity {0:?}")]
    UnknownCelebrity(String),
}

/// The canonical, sorted record set of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    meta: EpisodeMeta,
    records: Vec<AppearanceRecord>,
}

impl Timeline {
    /// Validates and sorts `records`. Fails on any invalid record or a
    /// repeated `(t_ms, pos_index)` key.
    pub fn new(meta: EpisodeMeta, mut records: Vec<AppearanceRecord>) -> Result<Self, AggregationError> {
        for (index, r) in records.iter().enumerate() {
            validate_record(r, &meta).map_err(|source| match source {
                ModelError::EpisodeMismatch { expected, found } => AggregationError::MixedEpisodes { expected, found },
                source => AggregationError::InvalidRecord { index, source },
            })?;
        }
        model::sort_canonical(&mut records);
        if let Some(w) = records.windows(2).find(|w| w[0].canonical_key() == w[1].canonical_key()) {
            let (t_ms, pos_index) = w[0].canonical_key();
            return Err(AggregationError::DuplicateKey { t_ms, pos_index });
        }
        Ok(Self { meta, records })
    }

    pub fn empty(meta: EpisodeMeta) -> Self {
        Self { meta, records: Vec::new() }
    }

    pub fn with_processed(mut self, processed: bool) -> Self {
        self.meta.processed = processed;
        self
    }

    pub fn meta(&self) -> &EpisodeMeta {
        &self.meta
    }

    pub fn episode_id(&self) -> &str {
        &self.meta.episode_id
    }

    pub fn duration_ms(&self) -> u64 {
        self.meta.duration_ms
    }

    pub fn records(&self) -> &[AppearanceRecord] {
        &self.records
    }

    pub fn into_parts(self) -> (EpisodeMeta, Vec<AppearanceRecord>) {
        (self.meta, self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Celebrities with at least one record, ascending.
    pub fn celebrities(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.celebrity_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Detection times per celebrity, ascending.
    pub fn times_by_celebrity(&self) -> BTreeMap<String, Vec<u64>> {
        let mut out: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.celebrity_id.clone()).or_default().push(r.t_ms);
        }
        out
    }

    /// Writes the records as JSON Lines.
    pub fn write_jsonl<W: Write>(&self, out: W) -> std::io::Result<()> {
        model::write_jsonl(out, &self.records)
    }

    pub fn export_meta(&self, params: &CoalesceParams) -> ExportMeta {
        ExportMeta {
            episode_id: self.meta.episode_id.clone(),
            duration_ms: self.meta.duration_ms,
            record_count: self.records.len(),
            params: *params,
        }
    }
}

/// Sidecar written next to an exported timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub episode_id: String,
    pub duration_ms: u64,
    pub record_count: usize,
    pub params: CoalesceParams,
}

/// Merges worker outputs and their accepted records into a timeline.
///
/// Worker position indices are replaced by each detection's ordinal among
/// all detections of the episode in `(t_ms, pos_index)` order, so the result
/// does not depend on how the episode was chunked.
pub fn merge_outputs(
    meta: &EpisodeMeta,
    outputs: &[WorkerOutput],
    records: Vec<AppearanceRecord>,
) -> Result<Timeline, AggregationError> {
    let mut spans: Vec<_> = outputs.iter().map(|o| o.span).collect();
    spans.sort();
    if let Some(w) = spans.windows(2).find(|w| w[0].overlaps(&w[1])) {
        return Err(AggregationError::OverlappingChunks {
            a_start: w[0].start_ms,
            a_end: w[0].end_ms,
            b_start: w[1].start_ms,
            b_end: w[1].end_ms,
        });
    }

    let mut keys: Vec<(u64, u64)> = outputs.iter().flat_map(|o| o.items.iter().map(|i| (i.t_ms, i.pos_index))).collect();
    keys.sort_unstable();
    if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
        return Err(AggregationError::DuplicateKey { t_ms: w[0].0, pos_index: w[0].1 });
    }
    let ordinal: HashMap<(u64, u64), u64> = keys.into_iter().enumerate().map(|(i, k)| (k, i as u64)).collect();

    let mut merged = Vec::with_capacity(records.len());
    for mut r in records {
        if r.episode_id != meta.episode_id {
            return Err(AggregationError::MixedEpisodes { expected: meta.episode_id.clone(), found: r.episode_id });
        }
        let key = r.canonical_key();
        r.pos_index = *ordinal
            .get(&key)
            .ok_or(AggregationError::UnknownRecord { t_ms: key.0, pos_index: key.1 })?;
        merged.push(r);
    }
    Timeline::new(meta.clone(), merged)
}

/// Point-to-interval rule: detections of one identity closer than `gap_ms`
/// share an interval, and each interval runs `tail_ms` past its last
/// detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoalesceParams {
    pub gap_ms: u64,
    pub tail_ms: u64,
}

impl Default for CoalesceParams {
    fn default() -> Self {
        Self { gap_ms: DEFAULT_GAP_MS, tail_ms: DEFAULT_TAIL_MS }
    }
}

impl CoalesceParams {
    /// Tail equal to one sampling period at `fps`.
    pub fn for_fps(fps: f64) -> Self {
        let tail_ms = if fps > 0.0 && fps.is_finite() { (1000.0 / fps).round() as u64 } else { DEFAULT_TAIL_MS };
        Self { tail_ms, ..Self::default() }
    }
}

/// Coalesces ascending detection times into disjoint sorted intervals,
/// clipped to `[0, duration_ms]`. A detection also joins the running interval
/// when it falls at or before that interval's tail end, so intervals never
/// overlap even when `tail_ms > gap_ms`. Intervals emptied by clipping are
/// dropped.
pub fn coalesce_times(celebrity_id: &str, times: &[u64], params: &CoalesceParams, duration_ms: u64) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut iter = times.iter().copied();
    let Some(first) = iter.next() else {
        return out;
    };
    let mut push = |start: u64, last: u64| {
        let end = last.saturating_add(params.tail_ms).min(duration_ms);
        if start < end {
            out.push(Interval { celebrity_id: celebrity_id.to_string(), start_ms: start, end_ms: end });
        }
    };
    let (mut start, mut last) = (first, first);
    for t in iter {
        debug_assert!(t >= last, "times must be sorted");
        let joins = t - last <= params.gap_ms || t <= last.saturating_add(params.tail_ms);
        if !joins {
            push(start, last);
            start = t;
        }
        last = t;
    }
    push(start, last);
    out
}

/// Presence intervals of one celebrity. No records gives an empty list.
pub fn coalesce_intervals(timeline: &Timeline, celebrity_id: &str, params: &CoalesceParams) -> Vec<Interval> {
    let times: Vec<u64> =
        timeline.records().iter().filter(|r| r.celebrity_id == celebrity_id).map(|r| r.t_ms).collect();
    coalesce_times(celebrity_id, &times, params, timeline.duration_ms())
}

/// Like [`coalesce_intervals`], but rejects ids outside `known`.
pub fn coalesce_known(
    timeline: &Timeline,
    celebrity_id: &str,
    params: &CoalesceParams,
    known: &BTreeSet<String>,
) -> Result<Vec<Interval>, AggregationError> {
    if !known.contains(celebrity_id) {
        return Err(AggregationError::UnknownCelebrity(celebrity_id.to_string()));
    }
    Ok(coalesce_intervals(timeline, celebrity_id, params))
}

pub fn total_duration(intervals: &[Interval]) -> u64 {
    intervals.iter().map(Interval::len_ms).sum()
}

/// Intervals of every celebrity present, keyed by id.
pub fn intervals_by_celebrity(timeline: &Timeline, params: &CoalesceParams) -> BTreeMap<String, Vec<Interval>> {
    timeline
        .times_by_celebrity()
        .into_iter()
        .map(|(id, times)| {
            let iv = coalesce_times(&id, &times, params, timeline.duration_ms());
            (id, iv)
        })
        .collect()
}

/// Total screen time of every celebrity present.
pub fn durations_by_celebrity(timeline: &Timeline, params: &CoalesceParams) -> BTreeMap<String, u64> {
    intervals_by_celebrity(timeline, params).into_iter().map(|(id, iv)| (id, total_duration(&iv))).collect()
}

//! Embedded episode store: appearance records, episode metadata with
//! processed flags, and the appearance, co-occurrence and aggregate queries.
//!
//! # On-disk layout
//!
//! ```text
//! <root>/catalog.sldb        "SLDB", u32 version, u8 kind = 0, entry*
//!   entry                    u32 len, u32 crc32c(body), body (JSON)
//! <root>/segments/<gen>.sldb "SLDB", u32 version, u8 kind = 1,
//!                            u64 len, body, u32 crc32c(body)
//! ```
//!
//! The catalog is an append-only log of registrations, processed marks, and
//! segment publications. Each stored timeline lives in its own immutable
//! segment whose body is a meta line followed by the records as JSON Lines.
//! A put writes and syncs the new segment before appending the log entry
//! that points to it, so a crash at any point leaves either the old or the
//! new version. A short final log entry (torn write) is cut off on open; a
//! checksum failure anywhere else is reported as corruption.
//!
//! # Concurrency
//!
//! Readers clone an `Arc` of the current state and never wait on writers.
//! Writers are serialized and publish a whole new state in one swap.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{coalesce_times, AggregationError, CoalesceParams, Timeline};
use crate::analytics::{co_matrix_records, CoMatrix};
use crate::model::{self, AppearanceRecord, EpisodeMeta};

pub const MAGIC: &[u8; 4] = b"SLDB";
pub const VERSION: u32 = 1;

const KIND_LOG: u8 = 0;
const KIND_SEGMENT: u8 = 1;
const HEADER_LEN: u64 = 9;
const CATALOG: &str = "catalog.sldb";
const SEGMENTS: &str = "segments";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store is full: {requested} records would exceed the cap of {cap}")]
    StorageFull { cap: usize, requested: usize },
    #[error("corrupt store file {path}: {reason}")]
    CorruptSegment { path: PathBuf, reason: String },
    #[error("unknown episode {0:?}")]
    UnknownEpisode(String),
    #[error("duration statistics need coalesce parameters")]
    MissingCoalesceParams,
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error(transparent)]
    Timeline(#[from] AggregationError),
    #[error("invalid episode metadata: {0}")]
    BadMeta(String),
    #[error("store was opened read-only")]
    ReadOnly,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    /// Upper bound on the total number of stored records.
    pub max_records: usize,
    /// Never modify files: no repair on open, and writes fail with
    /// [`StoreError::ReadOnly`]. Safe next to a live writer process.
    pub read_only: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { max_records: 50_000_000, read_only: false }
    }
}

/// Conjunction of optional clauses. The time range is half-open.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    pub episode_id: Option<String>,
    pub series_id: Option<String>,
    pub season: Option<u32>,
    pub celebrities: Option<BTreeSet<String>>,
    pub from_ms: Option<u64>,
    pub to_ms: Option<u64>,
}

impl QueryFilter {
    pub fn episode(id: impl Into<String>) -> Self {
        Self { episode_id: Some(id.into()), ..Self::default() }
    }

    pub fn check(&self) -> Result<(), StoreError> {
        match (self.from_ms, self.to_ms) {
            (Some(a), Some(b)) if a >= b => Err(StoreError::InvalidFilter(format!("from_ms {a} must be below to_ms {b}"))),
            _ => Ok(()),
        }
    }

    pub fn matches_meta(&self, meta: &EpisodeMeta) -> bool {
        self.episode_id.as_ref().is_none_or(|e| *e == meta.episode_id)
            && self.series_id.as_ref().is_none_or(|s| *s == meta.series_id)
            && self.season.is_none_or(|s| s == meta.season)
    }

    pub fn matches(&self, meta: &EpisodeMeta, r: &AppearanceRecord) -> bool {
        self.matches_meta(meta)
            && self.celebrities.as_ref().is_none_or(|c| c.contains(&r.celebrity_id))
            && self.from_ms.is_none_or(|f| r.t_ms >= f)
            && self.to_ms.is_none_or(|t| r.t_ms < t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Count,
    Duration,
    FirstSeen,
    LastSeen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Celebrity,
    Episode,
    Season,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateRequest {
    pub statistic: Statistic,
    pub group_by: GroupBy,
    #[serde(default)]
    pub filter: QueryFilter,
    /// Required for [`Statistic::Duration`].
    #[serde(default)]
    pub coalesce: Option<CoalesceParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupKey {
    Season(u32),
    Id(String),
}

/// Catalog view of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub meta: EpisodeMeta,
    pub record_count: usize,
    pub detections: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogEntry {
    Register { meta: EpisodeMeta, detections: Option<PathBuf> },
    Processed { episode_id: String },
    Put { meta: EpisodeMeta, segment: u64, records: usize },
}

/// A stored timeline plus its per-celebrity row index.
#[derive(Debug)]
struct EpisodeData {
    timeline: Arc<Timeline>,
    /// Row numbers per celebrity, ascending (and so time-sorted).
    by_celebrity: BTreeMap<String, Vec<usize>>,
    segment: u64,
}

impl EpisodeData {
    fn new(timeline: Timeline, segment: u64) -> Self {
        let mut by_celebrity: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in timeline.records().iter().enumerate() {
            by_celebrity.entry(r.celebrity_id.clone()).or_default().push(i);
        }
        Self { timeline: Arc::new(timeline), by_celebrity, segment }
    }

    /// Rows matching the celebrity and time clauses, ascending.
    fn rows(&self, filter: &QueryFilter) -> Vec<usize> {
        let records = self.timeline.records();
        let lo = |t: Option<u64>, rows: &[usize]| t.map_or(0, |t| rows.partition_point(|&i| records[i].t_ms < t));
        let hi = |t: Option<u64>, rows: &[usize]| t.map_or(rows.len(), |t| rows.partition_point(|&i| records[i].t_ms < t));
        match &filter.celebrities {
            None => {
                let from = filter.from_ms.map_or(0, |t| records.partition_point(|r| r.t_ms < t));
                let to = filter.to_ms.map_or(records.len(), |t| records.partition_point(|r| r.t_ms < t));
                (from..to.max(from)).collect()
            }
            Some(celebs) => {
                let mut out: Vec<usize> = celebs
                    .iter()
                    .filter_map(|c| self.by_celebrity.get(c))
                    .flat_map(|rows| {
                        let (a, b) = (lo(filter.from_ms, rows), hi(filter.to_ms, rows));
                        rows[a..b.max(a)].iter().copied()
                    })
                    .collect();
                out.sort_unstable();
                out
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Episode {
    meta: EpisodeMeta,
    detections: Option<PathBuf>,
    data: Option<Arc<EpisodeData>>,
}

impl Episode {
    fn info(&self) -> EpisodeInfo {
        EpisodeInfo {
            meta: self.meta.clone(),
            record_count: self.data.as_ref().map_or(0, |d| d.timeline.len()),
            detections: self.detections.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct State {
    episodes: BTreeMap<String, Episode>,
    /// Episodes holding records of each celebrity.
    by_celebrity: BTreeMap<String, BTreeSet<String>>,
    records: usize,
}

impl State {
    fn reindex(&mut self) {
        self.by_celebrity.clear();
        self.records = 0;
        for (id, ep) in &self.episodes {
            if let Some(d) = &ep.data {
                self.records += d.timeline.len();
                for c in d.by_celebrity.keys() {
                    self.by_celebrity.entry(c.clone()).or_default().insert(id.clone());
                }
            }
        }
    }

    fn register(&mut self, mut meta: EpisodeMeta, detections: Option<PathBuf>) {
        match self.episodes.get_mut(&meta.episode_id) {
            Some(ep) => {
                let same = EpisodeMeta { processed: ep.meta.processed, ..meta.clone() } == ep.meta;
                if !same {
                    // a changed episode invalidates what was stored for it
                    ep.meta = meta;
                    ep.data = None;
                }
                if detections.is_some() {
                    ep.detections = detections;
                }
            }
            None => {
                meta.processed = false;
                self.episodes.insert(meta.episode_id.clone(), Episode { meta, detections, data: None });
            }
        }
    }

    /// Episodes the filter can touch, in id order.
    fn candidates(&self, filter: &QueryFilter) -> Result<Vec<&Episode>, StoreError> {
        filter.check()?;
        let eps: Vec<&Episode> = match (&filter.episode_id, &filter.celebrities) {
            (Some(id), _) => vec![self.episodes.get(id).ok_or_else(|| StoreError::UnknownEpisode(id.clone()))?],
            (None, Some(celebs)) => {
                let ids: BTreeSet<&String> = celebs.iter().filter_map(|c| self.by_celebrity.get(c)).flatten().collect();
                ids.into_iter().map(|id| &self.episodes[id]).collect()
            }
            (None, None) => self.episodes.values().collect(),
        };
        Ok(eps.into_iter().filter(|e| filter.matches_meta(&e.meta)).collect())
    }

    fn matching(&self, filter: &QueryFilter) -> Result<Vec<(&EpisodeData, Vec<usize>)>, StoreError> {
        Ok(self
            .candidates(filter)?
            .into_iter()
            .filter_map(|e| e.data.as_deref())
            .map(|d| (d, d.rows(filter)))
            .filter(|(_, rows)| !rows.is_empty())
            .collect())
    }
}

struct Writer {
    log: Option<File>,
    next_segment: u64,
}

impl Writer {
    fn log(&mut self) -> Result<&mut File, StoreError> {
        self.log.as_mut().ok_or(StoreError::ReadOnly)
    }
}

pub struct Store {
    root: PathBuf,
    config: StoreConfig,
    state: RwLock<Arc<State>>,
    writer: Mutex<Writer>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).field("config", &self.config).finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreConfig::default())
    }

    /// Opens or creates the store at `root`, replaying its catalog.
    pub fn open_with(root: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        let log_path = root.join(CATALOG);
        let mut log = None;
        let mut bytes = Vec::new();
        if config.read_only {
            match fs::read(&log_path) {
                Ok(b) => bytes = b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
            if bytes.is_empty() {
                bytes = header(KIND_LOG).to_vec();
            }
        } else {
            fs::create_dir_all(root.join(SEGMENTS))?;
            let mut f = OpenOptions::new().read(true).append(true).create(true).open(&log_path)?;
            f.read_to_end(&mut bytes)?;
            if bytes.is_empty() {
                f.write_all(&header(KIND_LOG))?;
                f.sync_all()?;
                bytes = header(KIND_LOG).to_vec();
            }
            log = Some(f);
        }
        let corrupt = |reason: String| StoreError::CorruptSegment { path: log_path.clone(), reason };
        check_header(&bytes, KIND_LOG).map_err(&corrupt)?;

        let mut state = State::default();
        let mut segments: BTreeMap<String, u64> = BTreeMap::new();
        let mut next_segment = 0;
        let mut pos = HEADER_LEN as usize;
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            let torn = rest.len() < 8 || {
                let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
                rest.len() < 8 + len
            };
            if torn {
                if let Some(f) = log.as_mut() {
                    tracing::warn!(path = %log_path.display(), offset = pos, "dropping torn catalog tail");
                    f.set_len(pos as u64)?;
                    f.seek(SeekFrom::End(0))?;
                }
                break;
            }
            let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(rest[4..8].try_into().unwrap());
            let body = &rest[8..8 + len];
            if crc32c::crc32c(body) != crc {
                return Err(corrupt(format!("catalog entry at offset {pos} fails its checksum")));
            }
            let entry: LogEntry =
                serde_json::from_slice(body).map_err(|e| corrupt(format!("catalog entry at offset {pos}: {e}")))?;
            match entry {
                LogEntry::Register { meta, detections } => state.register(meta, detections),
                LogEntry::Processed { episode_id } => {
                    if let Some(ep) = state.episodes.get_mut(&episode_id) {
                        ep.meta.processed = true;
                    }
                }
                LogEntry::Put { meta, segment, .. } => {
                    next_segment = next_segment.max(segment + 1);
                    segments.insert(meta.episode_id.clone(), segment);
                    let id = meta.episode_id.clone();
                    state.register(meta, None);
                    let ep = state.episodes.get_mut(&id).expect("just registered");
                    ep.meta.processed = true;
                }
            }
            pos += 8 + len;
        }

        for (id, segment) in &segments {
            let ep = state.episodes.get_mut(id).expect("segment owner registered");
            let timeline = read_segment(&segment_path(&root, *segment))?.with_processed(true);
            ep.data = Some(Arc::new(EpisodeData::new(timeline, *segment)));
        }
        state.reindex();
        if !config.read_only {
            remove_orphans(&root, &segments.values().copied().collect())?;
        }

        Ok(Self {
            root,
            config,
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(Writer { log, next_segment }),
        })
    }

    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreConfig { read_only: true, ..StoreConfig::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn snapshot(&self) -> Arc<State> {
        self.state.read().clone()
    }

    fn publish(&self, state: State) {
        *self.state.write() = Arc::new(state);
    }

    /// Registers an episode for processing, optionally with the detection
    /// file to process. Re-registering unchanged metadata keeps stored
    /// records and the processed flag; changed metadata drops them.
    pub fn register(&self, meta: EpisodeMeta, detections: Option<PathBuf>) -> Result<(), StoreError> {
        meta.check().map_err(|e| StoreError::BadMeta(e.to_string()))?;
        let mut w = self.writer.lock();
        append(w.log()?, &LogEntry::Register { meta: meta.clone(), detections: detections.clone() })?;
        let mut state = (*self.snapshot()).clone();
        state.register(meta, detections);
        state.reindex();
        self.publish(state);
        Ok(())
    }

    /// Stores `timeline`, replacing any previous version of the episode,
    /// and marks the episode processed. Returns the stored record count.
    pub fn put_timeline(&self, timeline: Timeline) -> Result<usize, StoreError> {
        timeline.meta().check().map_err(|e| StoreError::BadMeta(e.to_string()))?;
        let timeline = timeline.with_processed(true);
        let id = timeline.episode_id().to_string();
        let mut w = self.writer.lock();
        w.log()?;
        let current = self.snapshot();

        let replaced = current.episodes.get(&id).and_then(|e| e.data.as_ref()).map_or(0, |d| d.timeline.len());
        let requested = current.records - replaced + timeline.len();
        if requested > self.config.max_records {
            return Err(StoreError::StorageFull { cap: self.config.max_records, requested });
        }

        let segment = w.next_segment;
        let path = segment_path(&self.root, segment);
        write_segment(&path, &timeline)?;
        let entry = LogEntry::Put { meta: timeline.meta().clone(), segment, records: timeline.len() };
        if let Err(e) = append(w.log()?, &entry) {
            let _ = fs::remove_file(&path);
            return Err(e);
        }
        w.next_segment += 1;

        let mut state = (*current).clone();
        state.register(timeline.meta().clone(), None);
        let ep = state.episodes.get_mut(&id).expect("just registered");
        ep.meta.processed = true;
        let previous = ep.data.replace(Arc::new(EpisodeData::new(timeline, segment)));
        let count = ep.data.as_ref().map_or(0, |d| d.timeline.len());
        state.reindex();
        self.publish(state);

        if let Some(old) = previous {
            if let Err(e) = fs::remove_file(segment_path(&self.root, old.segment)) {
                tracing::warn!(error = %e, "could not remove replaced segment");
            }
        }
        Ok(count)
    }

    /// Idempotent.
    pub fn mark_processed(&self, episode_id: &str) -> Result<(), StoreError> {
        let mut w = self.writer.lock();
        let current = self.snapshot();
        let ep = current.episodes.get(episode_id).ok_or_else(|| StoreError::UnknownEpisode(episode_id.to_string()))?;
        if ep.meta.processed {
            return Ok(());
        }
        append(w.log()?, &LogEntry::Processed { episode_id: episode_id.to_string() })?;
        let mut state = (*current).clone();
        state.episodes.get_mut(episode_id).expect("checked above").meta.processed = true;
        self.publish(state);
        Ok(())
    }

    pub fn list_unprocessed(&self) -> Vec<EpisodeMeta> {
        self.snapshot().episodes.values().filter(|e| !e.meta.processed).map(|e| e.meta.clone()).collect()
    }

    pub fn episodes(&self) -> Vec<EpisodeInfo> {
        self.snapshot().episodes.values().map(Episode::info).collect()
    }

    pub fn episode(&self, episode_id: &str) -> Option<EpisodeInfo> {
        self.snapshot().episodes.get(episode_id).map(Episode::info)
    }

    /// The stored timeline of a processed episode. A processed episode
    /// without stored records yields an empty timeline.
    pub fn timeline(&self, episode_id: &str) -> Option<Arc<Timeline>> {
        let state = self.snapshot();
        let ep = state.episodes.get(episode_id)?;
        match &ep.data {
            Some(d) => Some(d.timeline.clone()),
            None if ep.meta.processed => Some(Arc::new(Timeline::empty(ep.meta.clone()))),
            None => None,
        }
    }

    /// Processed timelines of a series, optionally limited to some seasons,
    /// ordered by (season, episode number, id).
    pub fn series_timelines(&self, series_id: &str, seasons: Option<&[u32]>) -> Vec<Arc<Timeline>> {
        let state = self.snapshot();
        let mut eps: Vec<&Episode> = state
            .episodes
            .values()
            .filter(|e| e.meta.series_id == series_id && e.meta.processed)
            .filter(|e| seasons.is_none_or(|s| s.contains(&e.meta.season)))
            .collect();
        eps.sort_by(|a, b| {
            (a.meta.season, a.meta.episode_number, &a.meta.episode_id).cmp(&(b.meta.season, b.meta.episode_number, &b.meta.episode_id))
        });
        eps.into_iter().filter_map(|e| self.timeline(&e.meta.episode_id)).collect()
    }

    pub fn record_count(&self) -> usize {
        self.snapshot().records
    }

    /// Matching records ordered by episode id, then canonically.
    pub fn query_appearances(&self, filter: &QueryFilter) -> Result<Vec<AppearanceRecord>, StoreError> {
        let state = self.snapshot();
        let mut out = Vec::new();
        for (data, rows) in state.matching(filter)? {
            let records = data.timeline.records();
            out.extend(rows.into_iter().map(|i| records[i].clone()));
        }
        Ok(out)
    }

    /// Co-appearance counts over the matching records. Buckets never span
    /// episodes, so the result is the sum of the per-episode matrices.
    pub fn query_cooccurrence(&self, filter: &QueryFilter, window_ms: u64) -> Result<CoMatrix, StoreError> {
        let state = self.snapshot();
        let mut labels = BTreeSet::new();
        let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (data, rows) in state.matching(filter)? {
            let records: Vec<AppearanceRecord> = rows.iter().map(|&i| data.timeline.records()[i].clone()).collect();
            let m = co_matrix_records(&records, window_ms);
            for (a, b, n) in m.pairs() {
                *pairs.entry((a, b)).or_default() += n;
            }
            labels.extend(m.labels);
        }
        let labels: Vec<String> = labels.into_iter().collect();
        let pos: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut cells = vec![vec![0u64; labels.len()]; labels.len()];
        for ((a, b), n) in &pairs {
            let (i, j) = (pos[a.as_str()], pos[b.as_str()]);
            cells[i][j] = *n;
            cells[j][i] = *n;
        }
        Ok(CoMatrix { labels, cells })
    }

    /// Grouped statistics over the matching records. Durations coalesce each
    /// (episode, celebrity) run of matching records and are summed per group.
    pub fn aggregate(&self, req: &AggregateRequest) -> Result<BTreeMap<GroupKey, u64>, StoreError> {
        if req.statistic == Statistic::Duration && req.coalesce.is_none() {
            return Err(StoreError::MissingCoalesceParams);
        }
        let state = self.snapshot();
        let mut out: BTreeMap<GroupKey, u64> = BTreeMap::new();
        for (data, rows) in state.matching(&req.filter)? {
            let tl = &data.timeline;
            let key = |r: &AppearanceRecord| match req.group_by {
                GroupBy::Celebrity => GroupKey::Id(r.celebrity_id.clone()),
                GroupBy::Episode => GroupKey::Id(tl.episode_id().to_string()),
                GroupBy::Season => GroupKey::Season(tl.meta().season),
            };
            match req.statistic {
                Statistic::Count => {
                    for &i in &rows {
                        *out.entry(key(&tl.records()[i])).or_default() += 1;
                    }
                }
                Statistic::FirstSeen | Statistic::LastSeen => {
                    for &i in &rows {
                        let r = &tl.records()[i];
                        let slot = out.entry(key(r)).or_insert(r.t_ms);
                        *slot = if req.statistic == Statistic::FirstSeen { (*slot).min(r.t_ms) } else { (*slot).max(r.t_ms) };
                    }
                }
                Statistic::Duration => {
                    let params = req.coalesce.expect("checked above");
                    let mut times: BTreeMap<&str, (GroupKey, Vec<u64>)> = BTreeMap::new();
                    for &i in &rows {
                        let r = &tl.records()[i];
                        times.entry(r.celebrity_id.as_str()).or_insert_with(|| (key(r), Vec::new())).1.push(r.t_ms);
                    }
                    for (c, (k, ts)) in times {
                        let d: u64 = coalesce_times(c, &ts, &params, tl.duration_ms()).iter().map(|i| i.len_ms()).sum();
                        *out.entry(k).or_default() += d;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Writes a stored episode as JSON Lines.
    pub fn export_jsonl<W: Write>(&self, episode_id: &str, out: W) -> Result<Arc<Timeline>, StoreError> {
        let tl = self.timeline(episode_id).ok_or_else(|| StoreError::UnknownEpisode(episode_id.to_string()))?;
        tl.write_jsonl(out)?;
        Ok(tl)
    }
}

fn header(kind: u8) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    h[8] = kind;
    h
}

fn check_header(bytes: &[u8], kind: u8) -> Result<(), String> {
    if bytes.len() < HEADER_LEN as usize {
        return Err("file is shorter than its header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if bytes[8] != kind {
        return Err(format!("expected file kind {kind}, found {}", bytes[8]));
    }
    Ok(())
}

fn append(log: &mut File, entry: &LogEntry) -> Result<(), StoreError> {
    let body = serde_json::to_vec(entry).expect("log entries serialize");
    let mut buf = Vec::with_capacity(body.len() + 8);
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32c::crc32c(&body).to_le_bytes());
    buf.extend_from_slice(&body);
    log.write_all(&buf)?;
    log.sync_data()?;
    Ok(())
}

fn segment_path(root: &Path, segment: u64) -> PathBuf {
    root.join(SEGMENTS).join(format!("{segment:016x}.sldb"))
}

fn write_segment(path: &Path, timeline: &Timeline) -> Result<(), StoreError> {
    let mut body = serde_json::to_vec(timeline.meta()).expect("meta serializes");
    body.push(b'\n');
    model::write_jsonl(&mut body, timeline.records())?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&header(KIND_SEGMENT))?;
        f.write_all(&(body.len() as u64).to_le_bytes())?;
        f.write_all(&body)?;
        f.write_all(&crc32c::crc32c(&body).to_le_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_segment(path: &Path) -> Result<Timeline, StoreError> {
    let corrupt = |reason: String| StoreError::CorruptSegment { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => corrupt("segment file is missing".into()),
        _ => StoreError::Io(e),
    })?;
    check_header(&bytes, KIND_SEGMENT).map_err(corrupt)?;
    let rest = &bytes[HEADER_LEN as usize..];
    if rest.len() < 8 {
        return Err(corrupt("truncated segment".into()));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    if rest.len() != 8 + len + 4 {
        return Err(corrupt(format!("segment length {len} does not match file size")));
    }
    let body = &rest[8..8 + len];
    let crc = u32::from_le_bytes(rest[8 + len..].try_into().unwrap());
    if crc32c::crc32c(body) != crc {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut reader = BufReader::new(body);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let meta: EpisodeMeta = serde_json::from_str(&line).map_err(|e| corrupt(format!("segment meta: {e}")))?;
    let records = model::read_jsonl(reader).map_err(|e| corrupt(e.to_string()))?;
    Timeline::new(meta, records).map_err(|e| corrupt(e.to_string()))
}

fn remove_orphans(root: &Path, live: &BTreeSet<u64>) -> io::Result<()> {
    for entry in fs::read_dir(root.join(SEGMENTS))? {
        let path = entry?.path();
        let keep = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .is_some_and(|g| live.contains(&g) && path.extension().is_some_and(|e| e == "sldb"));
        if !keep {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

//! Chunked parallel inference.
//!
//! An episode is split into `N` half-open time chunks and each chunk is
//! handed to its own worker thread. A worker pushes its frames through
//!
//! ```text
//! detector (detect_batch frames) → position encoder → embedder (embed_batch faces)
//! ```
//!
//! The position encoder stamps every detection with `(t_ms, pos_index)`
//! before it is re-batched for the embedder, so embeddings can always be
//! joined back to the detection they came from. Chunk `i` numbers its
//! detections from `i · 2^32`, which keeps indices unique across workers
//! without any coordination.
//!
//! Workers share nothing mutable; each returns a [`WorkerOutput`] and the
//! merge in [`crate::aggregation`] is the only join point.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{merge_outputs, AggregationError, Timeline};
use crate::detections::{Frame, Payload};
use crate::index::{classify, IndexError, KnownIdentityIndex};
use crate::model::{AppearanceRecord, BBox, EpisodeMeta};

/// Spacing between the position-index bases of consecutive chunks.
pub const POSITION_STRIDE: u64 = 1 << 32;

pub const DEFAULT_DETECT_BATCH: usize = 64;
pub const DEFAULT_EMBED_BATCH: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("episode duration must be at least 1 ms")]
    ZeroDuration,
    #[error("need at least one worker")]
    ZeroWorkers,
    #[error("batch sizes must be at least 1")]
    ZeroBatch,
    #[error("chunk {chunk} produced more than 2^32 detections")]
    OffsetOverflow { chunk: usize },
    #[error("chunk {chunk}, batch {batch}: {stage} stage failed: {source}")]
    StageFailure {
        chunk: usize,
        batch: usize,
        stage: &'static str,
        #[source]
        source: StageError,
    },
    #[error("chunk {chunk}, batch {batch}: {stage} stage broke order preservation: {reason}")]
    MisalignedStage { chunk: usize, batch: usize, stage: &'static str, reason: String },
    #[error("frame at {t_ms} ms lies outside chunk [{start_ms}, {end_ms})")]
    FrameOutsideChunk { t_ms: u64, start_ms: u64, end_ms: u64 },
    #[error("frames are not in time order at {t_ms} ms")]
    UnorderedFrames { t_ms: u64 },
    #[error("frame at {t_ms} ms is past the episode end ({duration_ms} ms)")]
    FrameOutOfRange { t_ms: u64, duration_ms: u64 },
    #[error("embeddings have dimension {found}, gallery has {expected}")]
    GalleryDimMismatch { expected: usize, found: usize },
    #[error("worker {worker} failed: {source}")]
    Worker {
        worker: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("worker {0} panicked")]
    WorkerPanicked(usize),
    #[error(transparent)]
    Search(#[from] IndexError),
    #[error(transparent)]
    Merge(#[from] AggregationError),
}

/// Error raised by a detector or embedder implementation.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct StageError(pub String);

/// A half-open span `[start_ms, end_ms)` of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl ChunkSpan {
    pub fn contains(&self, t_ms: u64) -> bool {
        self.start_ms <= t_ms && t_ms < self.end_ms
    }

    pub fn overlaps(&self, other: &ChunkSpan) -> bool {
        self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub episode_id: String,
    pub n_workers: usize,
    pub chunks: Vec<ChunkSpan>,
}

impl ChunkPlan {
    pub fn new(episode_id: impl Into<String>, duration_ms: u64, n_workers: usize) -> Result<Self, PipelineError> {
        Ok(Self { episode_id: episode_id.into(), n_workers, chunks: plan_chunks(duration_ms, n_workers)? })
    }
}

/// Chunk `i` is `[⌊i·D/N⌋, ⌊(i+1)·D/N⌋)`; empty chunks are dropped.
pub fn plan_chunks(duration_ms: u64, n_workers: usize) -> Result<Vec<ChunkSpan>, PipelineError> {
    if duration_ms == 0 {
        return Err(PipelineError::ZeroDuration);
    }
    if n_workers == 0 {
        return Err(PipelineError::ZeroWorkers);
    }
    let d = duration_ms as u128;
    let n = n_workers as u128;
    let bound = |i: u128| (i * d / n) as u64;
    Ok((0..n)
        .map(|i| ChunkSpan { start_ms: bound(i), end_ms: bound(i + 1) })
        .filter(|c| c.start_ms < c.end_ms)
        .collect())
}

/// Detection and embedding batch sizes. They are independent of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub detect_batch: usize,
    pub embed_batch: usize,
    /// Re-embed the first face of every embed batch as a sentinel and
    /// require both copies to agree.
    pub sentinel_checks: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { detect_batch: DEFAULT_DETECT_BATCH, embed_batch: DEFAULT_EMBED_BATCH, sentinel_checks: true }
    }
}

impl BatchConfig {
    pub fn new(detect_batch: usize, embed_batch: usize) -> Self {
        Self { detect_batch, embed_batch, ..Self::default() }
    }

    fn check(&self) -> Result<(), PipelineError> {
        if self.detect_batch == 0 || self.embed_batch == 0 {
            return Err(PipelineError::ZeroBatch);
        }
        Ok(())
    }
}

/// A face found by the detector, still without a position index.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub t_ms: u64,
    pub bbox: BBox,
    pub payload: Payload,
}

/// A detection stamped by the position encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDetection {
    pub t_ms: u64,
    pub pos_index: u64,
    pub bbox: BBox,
    pub payload: Payload,
}

/// Maps a batch of frames to the faces found in them, in frame order.
pub trait Detector {
    fn detect(&mut self, frames: &[Frame]) -> Result<Vec<Detection>, StageError>;
}

/// Maps a batch of face payloads to embeddings. Output `i` must belong to
/// input `i`.
pub trait Embedder {
    fn embed(&mut self, faces: &[&Payload]) -> Result<Vec<Vec<f32>>, StageError>;
}

/// Detector for streams whose frames already list their faces.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrameFaceDetector;

impl Detector for FrameFaceDetector {
    fn detect(&mut self, frames: &[Frame]) -> Result<Vec<Detection>, StageError> {
        Ok(frames
            .iter()
            .flat_map(|f| f.faces.iter().map(move |face| Detection { t_ms: f.t_ms, bbox: face.bbox, payload: face.payload.clone() }))
            .collect())
    }
}

/// Embedder for synthetic streams that carry raw embeddings.
#[derive(Debug, Default, Clone, Copy)]
pub struct PayloadEmbedder;

impl Embedder for PayloadEmbedder {
    fn embed(&mut self, faces: &[&Payload]) -> Result<Vec<Vec<f32>>, StageError> {
        faces
            .iter()
            .map(|p| match p {
                Payload::Embedding(e) => Ok(e.clone()),
                Payload::Crop(_) => Err(StageError("crop payloads need a model-backed embedder".into())),
            })
            .collect()
    }
}

/// Base position index for a chunk ordinal.
pub fn base_offset(chunk: usize) -> u64 {
    (chunk as u64) * POSITION_STRIDE
}

/// Numbers detections `base_offset(chunk) + arrival ordinal` across however
/// many batches the chunk is fed in.
#[derive(Debug, Clone)]
pub struct PositionEncoder {
    chunk: usize,
    base: u64,
    next: u64,
}

impl PositionEncoder {
    pub fn new(chunk: usize) -> Self {
        Self { chunk, base: base_offset(chunk), next: 0 }
    }

    pub fn encode(&mut self, detections: Vec<Detection>) -> Result<Vec<EncodedDetection>, PipelineError> {
        if self.next + detections.len() as u64 > POSITION_STRIDE {
            return Err(PipelineError::OffsetOverflow { chunk: self.chunk });
        }
        Ok(detections
            .into_iter()
            .map(|d| {
                let pos_index = self.base + self.next;
                self.next += 1;
                EncodedDetection { t_ms: d.t_ms, pos_index, bbox: d.bbox, payload: d.payload }
            })
            .collect())
    }

    pub fn assigned(&self) -> u64 {
        self.next
    }
}

/// One-shot encoding of a chunk's detections.
pub fn encode_positions(detections: Vec<Detection>, chunk: usize) -> Result<Vec<EncodedDetection>, PipelineError> {
    PositionEncoder::new(chunk).encode(detections)
}

/// An embedding with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedFace {
    pub t_ms: u64,
    pub pos_index: u64,
    pub bbox: BBox,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub worker: usize,
    pub span: ChunkSpan,
    /// Sorted by `(t_ms, pos_index)`.
    pub items: Vec<EmbeddedFace>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub detections: u64,
    pub embeddings: u64,
    pub detect_calls: u64,
    pub embed_calls: u64,
    /// Most encoded detections waiting for the embedder at any time.
    pub peak_pending: usize,
}

/// Runs one chunk through detect → encode → embed.
///
/// `frames` must be time-ordered and inside `span`. Pending detections are
/// flushed to the embedder as soon as a full embed batch is available, so at
/// most `embed_batch - 1` plus one detect batch's output wait at a time.
pub fn run_worker<D, E>(
    worker: usize,
    span: ChunkSpan,
    frames: &[Frame],
    detector: &mut D,
    embedder: &mut E,
    config: &BatchConfig,
) -> Result<(WorkerOutput, WorkerStats), PipelineError>
where
    D: Detector + ?Sized,
    E: Embedder + ?Sized,
{
    config.check()?;
    let mut last_t = None;
    for f in frames {
        if !span.contains(f.t_ms) {
            return Err(PipelineError::FrameOutsideChunk { t_ms: f.t_ms, start_ms: span.start_ms, end_ms: span.end_ms });
        }
        if last_t.is_some_and(|t| f.t_ms < t) {
            return Err(PipelineError::UnorderedFrames { t_ms: f.t_ms });
        }
        last_t = Some(f.t_ms);
    }

    let mut encoder = PositionEncoder::new(worker);
    let mut pending: VecDeque<EncodedDetection> = VecDeque::new();
    let mut items = Vec::new();
    let mut stats = WorkerStats::default();
    let mut embed_batch_no = 0usize;

    for (batch, group) in frames.chunks(config.detect_batch).enumerate() {
        let dets = detector
            .detect(group)
            .map_err(|source| PipelineError::StageFailure { chunk: worker, batch, stage: "detect", source })?;
        stats.detect_calls += 1;
        check_detections(worker, batch, group, &dets)?;
        stats.detections += dets.len() as u64;
        pending.extend(encoder.encode(dets)?);
        stats.peak_pending = stats.peak_pending.max(pending.len());
        while pending.len() >= config.embed_batch {
            let chunk: Vec<_> = pending.drain(..config.embed_batch).collect();
            embed_batch(worker, embed_batch_no, chunk, embedder, config, &mut items)?;
            embed_batch_no += 1;
            stats.embed_calls += 1;
        }
    }
    if !pending.is_empty() {
        let chunk: Vec<_> = pending.drain(..).collect();
        embed_batch(worker, embed_batch_no, chunk, embedder, config, &mut items)?;
        stats.embed_calls += 1;
    }
    stats.embeddings = items.len() as u64;
    Ok((WorkerOutput { worker, span, items }, stats))
}

fn check_detections(chunk: usize, batch: usize, frames: &[Frame], dets: &[Detection]) -> Result<(), PipelineError> {
    let misaligned = |reason: String| PipelineError::MisalignedStage { chunk, batch, stage: "detect", reason };
    let mut frame_iter = frames.iter().map(|f| f.t_ms).peekable();
    for d in dets {
        // advance through frame times; detections must walk them in order
        while frame_iter.peek().is_some_and(|&t| t < d.t_ms) {
            frame_iter.next();
        }
        if frame_iter.peek() != Some(&d.t_ms) {
            return Err(misaligned(format!("detection at {} ms does not follow frame order", d.t_ms)));
        }
    }
    Ok(())
}

fn embed_batch<E: Embedder + ?Sized>(
    chunk: usize,
    batch: usize,
    detections: Vec<EncodedDetection>,
    embedder: &mut E,
    config: &BatchConfig,
    out: &mut Vec<EmbeddedFace>,
) -> Result<(), PipelineError> {
    let misaligned = |reason: String| PipelineError::MisalignedStage { chunk, batch, stage: "embed", reason };
    let sentinel = config.sentinel_checks && !detections.is_empty();
    let mut inputs: Vec<&Payload> = Vec::with_capacity(detections.len() + 1);
    if sentinel {
        inputs.push(&detections[0].payload);
    }
    inputs.extend(detections.iter().map(|d| &d.payload));
    let mut vectors = embedder
        .embed(&inputs)
        .map_err(|source| PipelineError::StageFailure { chunk, batch, stage: "embed", source })?;
    if vectors.len() != inputs.len() {
        return Err(misaligned(format!("{} inputs produced {} embeddings", inputs.len(), vectors.len())));
    }
    if sentinel {
        let probe = vectors.remove(0);
        if !nearly_equal(&probe, &vectors[0]) {
            return Err(misaligned("sentinel embedding does not match its twin".into()));
        }
    }
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().position(|v| v.len() != first.len()) {
            return Err(misaligned(format!("embedding {bad} has dimension {}", vectors[bad].len())));
        }
    }
    out.extend(detections.into_iter().zip(vectors).map(|(d, embedding)| EmbeddedFace {
        t_ms: d.t_ms,
        pos_index: d.pos_index,
        bbox: d.bbox,
        embedding,
    }));
    Ok(())
}

fn nearly_equal(a: &[f32], b: &[f32]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let (mut diff, mut norm) = (0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        diff += (x - y) * (x - y);
        norm += x * x;
    }
    diff.sqrt() <= 1e-4 * norm.sqrt() + 1e-12
}

/// Search and acceptance settings for an episode run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch: BatchConfig,
    pub n_workers: usize,
    /// Cosine: minimum similarity. L2: maximum distance.
    pub threshold: f64,
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch: BatchConfig::default(),
            n_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threshold: DEFAULT_THRESHOLD,
            k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub episode_id: String,
    pub workers: usize,
    pub detections: u64,
    pub embeddings: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub outputs: Vec<WorkerOutput>,
    /// Accepted records, still carrying worker-level position indices.
    pub records: Vec<AppearanceRecord>,
    pub report: RunReport,
}

/// Runs every chunk of an episode on its own thread and resolves each
/// embedding against `index`. `stages(worker)` builds a fresh detector and
/// embedder for every worker.
pub fn run_episode<F, D, E>(
    meta: &EpisodeMeta,
    frames: &[Frame],
    index: &KnownIdentityIndex,
    stages: F,
    config: &RunConfig,
) -> Result<EpisodeRun, PipelineError>
where
    F: Fn(usize) -> (D, E) + Sync,
    D: Detector,
    E: Embedder,
{
    let started = Instant::now();
    config.batch.check()?;
    if config.k == 0 {
        return Err(IndexError::ZeroK.into());
    }
    let chunks = plan_chunks(meta.duration_ms, config.n_workers)?;
    for w in frames.windows(2) {
        if w[1].t_ms < w[0].t_ms {
            return Err(PipelineError::UnorderedFrames { t_ms: w[1].t_ms });
        }
    }
    if let Some(last) = frames.last().filter(|f| f.t_ms >= meta.duration_ms) {
        return Err(PipelineError::FrameOutOfRange { t_ms: last.t_ms, duration_ms: meta.duration_ms });
    }

    let slices: Vec<&[Frame]> = chunks
        .iter()
        .map(|c| {
            let lo = frames.partition_point(|f| f.t_ms < c.start_ms);
            let hi = frames.partition_point(|f| f.t_ms < c.end_ms);
            &frames[lo..hi]
        })
        .collect();

    type Done = Result<(WorkerOutput, WorkerStats, Vec<AppearanceRecord>), PipelineError>;
    let results: Vec<Done> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .zip(&slices)
                .enumerate()
                .map(|(worker, (span, slice))| {
                    let stages = &stages;
                    scope.spawn(move || {
                        let (mut detector, mut embedder) = stages(worker);
                        let (output, stats) = run_worker(worker, *span, slice, &mut detector, &mut embedder, &config.batch)?;
                        let records = resolve(meta, &output, index, config)?;
                        Ok((output, stats, records))
                    })
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(worker, h)| h.join().unwrap_or(Err(PipelineError::WorkerPanicked(worker))))
                .collect()
        });

    let mut outputs = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    let mut detections = 0;
    let mut embeddings = 0;
    for (worker, res) in results.into_iter().enumerate() {
        let (output, stats, recs) = res.map_err(|e| match e {
            PipelineError::WorkerPanicked(_) => e,
            other => PipelineError::Worker { worker, source: Box::new(other) },
        })?;
        detections += stats.detections;
        embeddings += stats.embeddings;
        outputs.push(output);
        records.extend(recs);
    }
    let accepted = records.len() as u64;
    let report = RunReport {
        episode_id: meta.episode_id.clone(),
        workers: outputs.len(),
        detections,
        embeddings,
        accepted,
        rejected: embeddings - accepted,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok(EpisodeRun { outputs, records, report })
}

/// Gallery search plus threshold for every embedding of one worker.
fn resolve(
    meta: &EpisodeMeta,
    output: &WorkerOutput,
    index: &KnownIdentityIndex,
    config: &RunConfig,
) -> Result<Vec<AppearanceRecord>, PipelineError> {
    let metric = index.metric();
    let mut records = Vec::new();
    for item in &output.items {
        if item.embedding.len() != index.dim() {
            return Err(PipelineError::GalleryDimMismatch { expected: index.dim(), found: item.embedding.len() });
        }
        let matches = match index.search_topk(&item.embedding, config.k) {
            Ok(m) => m,
            // a zero vector cannot be compared under cosine; treat it as unmatched
            Err(IndexError::ZeroQuery) => continue,
            Err(e) => return Err(e.into()),
        };
        if let Some(best) = classify(&matches, config.threshold, metric) {
            records.push(AppearanceRecord::new(
                meta.episode_id.clone(),
                best.celebrity_id.clone(),
                item.t_ms,
                item.pos_index,
                item.bbox,
                metric.confidence(best.raw_score),
            ));
        }
    }
    Ok(records)
}

/// Runs an episode and merges the worker outputs into its timeline.
pub fn process_episode<F, D, E>(
    meta: &EpisodeMeta,
    frames: &[Frame],
    index: &KnownIdentityIndex,
    stages: F,
    config: &RunConfig,
) -> Result<(Timeline, RunReport), PipelineError>
where
    F: Fn(usize) -> (D, E) + Sync,
    D: Detector,
    E: Embedder,
{
    let run = run_episode(meta, frames, index, stages, config)?;
    let timeline = merge_outputs(meta, &run.outputs, run.records)?;
    Ok((timeline, run.report))
}

/// Stage factory for synthetic `DETS` streams.
pub fn synthetic_stages(_worker: usize) -> (FrameFaceDetector, PayloadEmbedder) {
    (FrameFaceDetector, PayloadEmbedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::Face;

    fn span(a: u64, b: u64) -> ChunkSpan {
        ChunkSpan { start_ms: a, end_ms: b }
    }

    #[test]
    fn plan_identity_partition() {
        assert_eq!(plan_chunks(60_000, 1).unwrap(), vec![span(0, 60_000)]);
    }

    #[test]
    fn plan_floor_formula() {
        assert_eq!(
            plan_chunks(60_000, 4).unwrap(),
            vec![span(0, 15_000), span(15_000, 30_000), span(30_000, 45_000), span(45_000, 60_000)]
        );
        assert_eq!(plan_chunks(10, 3).unwrap(), vec![span(0, 3), span(3, 6), span(6, 10)]);
    }

    #[test]
    fn plan_drops_empty_chunks() {
        let c = plan_chunks(3, 8).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.first().unwrap().start_ms, 0);
        assert_eq!(c.last().unwrap().end_ms, 3);
        assert!(matches!(plan_chunks(0, 2), Err(PipelineError::ZeroDuration)));
        assert!(matches!(plan_chunks(10, 0), Err(PipelineError::ZeroWorkers)));
    }

    #[test]
    fn plan_is_a_partition() {
        for d in [1u64, 7, 999, 60_000, 3_300_001] {
            for n in 1..=17 {
                let c = plan_chunks(d, n).unwrap();
                assert!(c.len() <= n);
                let mut cursor = 0;
                for s in &c {
                    assert_eq!(s.start_ms, cursor);
                    assert!(s.start_ms < s.end_ms);
                    cursor = s.end_ms;
                }
                assert_eq!(cursor, d);
            }
        }
    }

    fn det(t: u64) -> Detection {
        Detection { t_ms: t, bbox: BBox::FULL, payload: Payload::Embedding(vec![t as f32, 1.0]) }
    }

    #[test]
    fn encoder_numbers_from_chunk_base() {
        let e = encode_positions(vec![det(0), det(0), det(5)], 0).unwrap();
        assert_eq!(e.iter().map(|d| d.pos_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        let e = encode_positions(vec![det(7)], 1).unwrap();
        assert_eq!(e[0].pos_index, 1 << 32);

        let mut enc = PositionEncoder::new(3);
        enc.encode(vec![det(1), det(2)]).unwrap();
        let next = enc.encode(vec![det(3)]).unwrap();
        assert_eq!(next[0].pos_index, 3 * POSITION_STRIDE + 2);
    }

    #[test]
    fn encoder_overflow() {
        let mut enc = PositionEncoder::new(0);
        enc.next = POSITION_STRIDE - 1;
        assert!(enc.encode(vec![det(1)]).is_ok());
        assert!(matches!(enc.encode(vec![det(2)]), Err(PipelineError::OffsetOverflow { chunk: 0 })));
    }

    fn frames(times: &[u64], faces_per_frame: usize) -> Vec<Frame> {
        times
            .iter()
            .map(|&t| Frame {
                t_ms: t,
                faces: (0..faces_per_frame)
                    .map(|i| Face { bbox: BBox::FULL, payload: Payload::Embedding(vec![t as f32, i as f32, 1.0]) })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn empty_chunk() {
        let (out, stats) =
            run_worker(0, span(0, 1000), &[], &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::default()).unwrap();
        assert!(out.items.is_empty());
        assert_eq!(stats.embed_calls, 0);
    }

    #[test]
    fn unit_batches_equal_sequential_application() {
        let fr = frames(&[0, 10, 20, 30], 2);
        let (out, stats) =
            run_worker(0, span(0, 100), &fr, &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::new(1, 1)).unwrap();
        assert_eq!(stats.detect_calls, 4);
        assert_eq!(stats.embed_calls, 8);
        let dets = FrameFaceDetector.detect(&fr).unwrap();
        let enc = encode_positions(dets, 0).unwrap();
        let refs: Vec<&Payload> = enc.iter().map(|d| &d.payload).collect();
        let emb = PayloadEmbedder.embed(&refs).unwrap();
        let expected: Vec<EmbeddedFace> = enc
            .into_iter()
            .zip(emb)
            .map(|(d, embedding)| EmbeddedFace { t_ms: d.t_ms, pos_index: d.pos_index, bbox: d.bbox, embedding })
            .collect();
        assert_eq!(out.items, expected);
    }

    #[test]
    fn frames_must_be_in_chunk_and_ordered() {
        let fr = frames(&[0, 100], 1);
        let err = run_worker(0, span(0, 100), &fr, &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::default());
        assert!(matches!(err, Err(PipelineError::FrameOutsideChunk { t_ms: 100, .. })));
        let fr = frames(&[50, 10], 1);
        let err = run_worker(0, span(0, 100), &fr, &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::default());
        assert!(matches!(err, Err(PipelineError::UnorderedFrames { t_ms: 10 })));
    }

    struct DroppingEmbedder;
    impl Embedder for DroppingEmbedder {
        fn embed(&mut self, faces: &[&Payload]) -> Result<Vec<Vec<f32>>, StageError> {
            let mut v = PayloadEmbedder.embed(faces)?;
            v.pop();
            Ok(v)
        }
    }

    struct ReversingEmbedder;
    impl Embedder for ReversingEmbedder {
        fn embed(&mut self, faces: &[&Payload]) -> Result<Vec<Vec<f32>>, StageError> {
            let mut v = PayloadEmbedder.embed(faces)?;
            v.reverse();
            Ok(v)
        }
    }

    struct FailingEmbedder(usize);
    impl Embedder for FailingEmbedder {
        fn embed(&mut self, faces: &[&Payload]) -> Result<Vec<Vec<f32>>, StageError> {
            if self.0 == 0 {
                return Err(StageError("device lost".into()));
            }
            self.0 -= 1;
            PayloadEmbedder.embed(faces)
        }
    }

    struct ShufflingDetector;
    impl Detector for ShufflingDetector {
        fn detect(&mut self, frames: &[Frame]) -> Result<Vec<Detection>, StageError> {
            let mut d = FrameFaceDetector.detect(frames)?;
            d.reverse();
            Ok(d)
        }
    }

    #[test]
    fn stage_violations_are_caught() {
        let fr = frames(&(0..40).map(|i| i * 10).collect::<Vec<_>>(), 1);
        let cfg = BatchConfig::new(8, 16);
        let sp = span(0, 1000);
        let err = run_worker(2, sp, &fr, &mut FrameFaceDetector, &mut DroppingEmbedder, &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::MisalignedStage { chunk: 2, batch: 0, stage: "embed", .. }), "{err}");
        let err = run_worker(0, sp, &fr, &mut FrameFaceDetector, &mut ReversingEmbedder, &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::MisalignedStage { stage: "embed", .. }), "{err}");
        let err = run_worker(0, sp, &fr, &mut ShufflingDetector, &mut PayloadEmbedder, &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::MisalignedStage { stage: "detect", .. }), "{err}");
        let err = run_worker(1, sp, &fr, &mut FrameFaceDetector, &mut FailingEmbedder(1), &cfg).unwrap_err();
        assert!(matches!(err, PipelineError::StageFailure { chunk: 1, batch: 1, stage: "embed", .. }), "{err}");
    }

    #[test]
    fn crops_need_a_real_embedder() {
        let fr = vec![Frame { t_ms: 0, faces: vec![Face { bbox: BBox::FULL, payload: Payload::Crop(vec![1, 2]) }] }];
        let err = run_worker(0, span(0, 10), &fr, &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::default());
        assert!(matches!(err, Err(PipelineError::StageFailure { stage: "embed", .. })));
    }

    #[test]
    fn pending_stays_bounded() {
        let fr = frames(&(0..5_000).collect::<Vec<_>>(), 1);
        for (db, eb) in [(64, 128), (128, 64), (7, 13), (13, 7), (1, 1)] {
            let (out, stats) =
                run_worker(0, span(0, 5_000), &fr, &mut FrameFaceDetector, &mut PayloadEmbedder, &BatchConfig::new(db, eb)).unwrap();
            assert_eq!(out.items.len(), 5_000);
            assert!(stats.peak_pending <= 2 * db.max(eb), "{db}/{eb}: {}", stats.peak_pending);
        }
    }
}

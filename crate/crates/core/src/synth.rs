//! Deterministic ground-truth episodes: identity galleries, scene schedules,
//! and noisy detection streams.
//!
//! All randomness comes from [`rng`], a ChaCha8 stream seeded through
//! `SeedableRng::seed_from_u64`, so fixtures are reproducible across
//! platforms and across implementations that follow the same seeding.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detections::{Face, Frame, Payload};
use crate::model::BBox;

/// Galleries with at least this many dimensions (and at most
/// [`SEPARATION_MAX_IDENTITIES`] rows) get a pairwise-cosine guarantee.
pub const SEPARATION_MIN_DIM: usize = 64;
pub const SEPARATION_MAX_IDENTITIES: usize = 1024;
/// Upper bound on pairwise cosine similarity between gallery rows.
pub const MAX_PAIR_COSINE: f64 = 0.5;
pub const DEFAULT_DIM: usize = 512;

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("dimension {0} is too small, need at least 2")]
    DimTooSmall(usize),
    #[error("gallery must contain at least one identity")]
    EmptyGallery,
    #[error("could not separate gallery row {row} after {MAX_REDRAWS} draws")]
    SeparationFailed { row: usize },
    #[error("invalid schedule parameters: {0}")]
    BadParams(String),
}

/// The generator behind every synthetic fixture.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ground-truth identities with unit-norm reference vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityGallery {
    pub ids: Vec<String>,
    pub vectors: Vec<f32>,
    pub dim: usize,
}

impl IdentityGallery {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

fn identity_label(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(3);
    format!("celeb_{i:0width$}")
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return raw.iter().map(|v| (v / norm) as f32).collect();
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Draws `n_identities` unit vectors. For `dim >= 64` and `n <= 1024` any row
/// whose cosine with an earlier row reaches [`MAX_PAIR_COSINE`] is re-drawn.
pub fn gen_gallery(seed: u64, n_identities: usize, dim: usize) -> Result<IdentityGallery, SynthError> {
    if dim < 2 {
        return Err(SynthError::DimTooSmall(dim));
    }
    if n_identities == 0 {
        return Err(SynthError::EmptyGallery);
    }
    let enforce = dim >= SEPARATION_MIN_DIM && n_identities <= SEPARATION_MAX_IDENTITIES;
    let mut rng = rng(seed);
    let mut vectors: Vec<f32> = Vec::with_capacity(n_identities * dim);
    for row in 0..n_identities {
        let mut draws = 0;
        let v = loop {
            let v = gaussian_unit(&mut rng, dim);
            if !enforce || vectors.chunks_exact(dim).all(|prev| dot(prev, &v) < MAX_PAIR_COSINE) {
                break v;
            }
            draws += 1;
            if draws >= MAX_REDRAWS {
                return Err(SynthError::SeparationFailed { row });
            }
        };
        vectors.extend_from_slice(&v);
    }
    let ids = (0..n_identities).map(|i| identity_label(i, n_identities)).collect();
    Ok(IdentityGallery { ids, vectors, dim })
}

/// A celebrity on screen over `[start_ms, end_ms)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceSpan {
    pub celebrity_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSchedule {
    pub duration_ms: u64,
    pub spans: Vec<PresenceSpan>,
}

/// Splits `[0, duration_ms)` into scenes and casts each one.
///
/// Scene lengths are uniform in `[mean/2, 3·mean/2]`; a scene that would leave
/// less than `mean/2` behind absorbs the remainder. Cast size is
/// `floor(mean_cast + u)` for `u ~ U[0,1)`, clamped to `[1, gallery size]`,
/// and members are drawn without replacement.
pub fn gen_schedule(
    seed: u64,
    gallery: &IdentityGallery,
    duration_ms: u64,
    mean_scene_ms: u64,
    mean_cast_per_scene: f64,
) -> Result<SceneSchedule, SynthError> {
    if gallery.is_empty() {
        return Err(SynthError::EmptyGallery);
    }
    if mean_scene_ms < 1000 || duration_ms < mean_scene_ms {
        return Err(SynthError::BadParams(format!(
            "need duration_ms >= mean_scene_ms >= 1000, got {duration_ms} and {mean_scene_ms}"
        )));
    }
    if !mean_cast_per_scene.is_finite() || mean_cast_per_scene < 0.0 {
        return Err(SynthError::BadParams(format!("mean cast {mean_cast_per_scene}")));
    }
    let mut rng = rng(seed);
    let half = mean_scene_ms / 2;
    let mut spans = Vec::new();
    let mut start = 0u64;
    while start < duration_ms {
        let remaining = duration_ms - start;
        let len = half + rng.random_range(0..=mean_scene_ms);
        let len = if len >= remaining || remaining - len <= half { remaining } else { len };
        let end = start + len;

        let u: f64 = rng.random();
        let cast = ((mean_cast_per_scene + u).floor() as usize).clamp(1, gallery.len());
        let mut members = sample(&mut rng, gallery.len(), cast).into_vec();
        members.sort_unstable();
        for m in members {
            spans.push(PresenceSpan { celebrity_id: gallery.ids[m].clone(), start_ms: start, end_ms: end });
        }
        start = end;
    }
    Ok(SceneSchedule { duration_ms, spans })
}

/// Time of frame `k` on a grid anchored at zero.
#[inline]
pub fn frame_time_ms(k: u64, fps: f64) -> u64 {
    (k as f64 * 1000.0 / fps).round() as u64
}

/// One synthetic face detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub t_ms: u64,
    /// Ground truth; never handed to the pipeline.
    pub true_celebrity_id: String,
    pub embedding: Vec<f32>,
    pub bbox: BBox,
    pub frame: u64,
}

/// Enumerates the frame grid and emits one event per identity present at each
/// frame time. Events come out in non-decreasing `t_ms`, ties in gallery row
/// order. Each embedding is the identity's row plus isotropic gaussian noise
/// with per-component deviation `noise_sigma / sqrt(dim)` (so `noise_sigma` is
/// the expected noise norm), re-normalized to unit length.
pub fn emit_detections(
    schedule: &SceneSchedule,
    gallery: &IdentityGallery,
    fps: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<DetectionEvent>, SynthError> {
    if !fps.is_finite() || fps <= 0.0 {
        return Err(SynthError::BadParams(format!("fps {fps}")));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(SynthError::BadParams(format!("noise_sigma {noise_sigma}")));
    }
    let rows: HashMap<&str, usize> = gallery.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut spans: Vec<(usize, u64, u64)> = Vec::with_capacity(schedule.spans.len());
    for s in &schedule.spans {
        let row = *rows
            .get(s.celebrity_id.as_str())
            .ok_or_else(|| SynthError::BadParams(format!("{} is not in the gallery", s.celebrity_id)))?;
        if s.start_ms < s.end_ms {
            spans.push((row, s.start_ms, s.end_ms));
        }
    }
    spans.sort_by_key(|&(row, start, _)| (start, row));

    let component_sigma = noise_sigma / (gallery.dim as f64).sqrt();
    let mut rng = rng(seed);
    let mut events = Vec::new();
    let mut next = 0usize;
    let mut active: Vec<(usize, u64, u64)> = Vec::new();
    let mut k = 0u64;
    loop {
        let t = frame_time_ms(k, fps);
        if t >= schedule.duration_ms {
            break;
        }
        while next < spans.len() && spans[next].1 <= t {
            active.push(spans[next]);
            next += 1;
        }
        active.retain(|&(_, _, end)| end > t);
        let mut present: Vec<usize> = active.iter().map(|&(row, _, _)| row).collect();
        present.sort_unstable();
        for row in present {
            let base = gallery.row(row);
            let embedding = if noise_sigma == 0.0 {
                base.to_vec()
            } else {
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|&v| v as f64 + component_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = noisy.iter().map(|v| v * v).sum::<f64>().sqrt();
                noisy.iter().map(|v| (v / norm) as f32).collect()
            };
            events.push(DetectionEvent {
                t_ms: t,
                true_celebrity_id: gallery.ids[row].clone(),
                embedding,
                bbox: random_bbox(&mut rng),
                frame: k,
            });
        }
        k += 1;
    }
    Ok(events)
}

fn random_bbox(rng: &mut ChaCha8Rng) -> BBox {
    let width = rng.random_range(0.05f32..0.2);
    let height = rng.random_range(0.05f32..0.2);
    let x = rng.random_range(0.0f32..0.75);
    let y = rng.random_range(0.0f32..0.75);
    BBox::new(x, y, width, height)
}

/// Expected per-identity detection counts: frame-grid points inside each span.
pub fn expected_counts(schedule: &SceneSchedule, fps: f64) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in &schedule.spans {
        let mut n = 0u64;
        // first grid index with time >= start
        let mut k = ((s.start_ms as f64) * fps / 1000.0).floor() as u64;
        while k > 0 && frame_time_ms(k - 1, fps) >= s.start_ms {
            k -= 1;
        }
        loop {
            let t = frame_time_ms(k, fps);
            if t >= s.end_ms || t >= schedule.duration_ms {
                break;
            }
            if t >= s.start_ms {
                n += 1;
            }
            k += 1;
        }
        *counts.entry(s.celebrity_id.clone()).or_insert(0) += n;
    }
    counts
}

/// Groups an event stream into frames carrying raw embeddings.
pub fn to_frames(events: &[DetectionEvent]) -> Vec<Frame> {
    let mut frames: Vec<Frame> = Vec::new();
    for e in events {
        let face = Face { bbox: e.bbox, payload: Payload::Embedding(e.embedding.clone()) };
        match frames.last_mut() {
            Some(f) if f.t_ms == e.t_ms => f.faces.push(face),
            _ => frames.push(Frame { t_ms: e.t_ms, faces: vec![face] }),
        }
    }
    frames
}

/// Everything needed to generate one synthetic episode. Gallery, schedule,
/// and stream draw from `seed`, `seed + 1`, and `seed + 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub seed: u64,
    pub n_identities: usize,
    pub dim: usize,
    pub duration_ms: u64,
    pub mean_scene_ms: u64,
    pub mean_cast_per_scene: f64,
    pub fps: f64,
    pub noise_sigma: f64,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            seed: 42,
            n_identities: 8,
            dim: DEFAULT_DIM,
            duration_ms: 1_800_000,
            mean_scene_ms: 120_000,
            mean_cast_per_scene: 2.5,
            fps: 2.0,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthEpisode {
    pub gallery: IdentityGallery,
    pub schedule: SceneSchedule,
    pub events: Vec<DetectionEvent>,
}

impl SynthEpisode {
    pub fn generate(p: &EpisodeParams) -> Result<Self, SynthError> {
        let gallery = gen_gallery(p.seed, p.n_identities, p.dim)?;
        let schedule = gen_schedule(p.seed.wrapping_add(1), &gallery, p.duration_ms, p.mean_scene_ms, p.mean_cast_per_scene)?;
        let events = emit_detections(&schedule, &gallery, p.fps, p.noise_sigma, p.seed.wrapping_add(2))?;
        Ok(Self { gallery, schedule, events })
    }

    pub fn frames(&self) -> Vec<Frame> {
        to_frames(&self.events)
    }
}

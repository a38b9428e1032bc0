//! Processing a registered episode end to end: read its detection file,
//! run the pipeline against the gallery, and store the timeline.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detections::{read_stream, write_stream, DetsError};
use crate::index::{IndexError, KnownIdentityIndex, Metric};
use crate::pipeline::{process_episode, synthetic_stages, PipelineError, RunConfig, RunReport};
use crate::store::{Store, StoreError};
use crate::synth::SynthEpisode;

/// File name `synth` gives the gallery next to the detection stream.
pub const GALLERY_FILE: &str = "gallery.keix";
pub const DETECTIONS_FILE: &str = "detections.dets";
pub const SCHEDULE_FILE: &str = "schedule.json";

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("unknown episode {0:?}")]
    UnknownEpisode(String),
    #[error("episode {0:?} has no registered detection file")]
    NoDetectionFile(String),
    #[error("detection file {path}: {source}")]
    Detections {
        path: PathBuf,
        #[source]
        source: DetsError,
    },
    #[error("gallery {path}: {source}")]
    Gallery {
        path: PathBuf,
        #[source]
        source: IndexError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum WriteError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Detections(#[from] DetsError),
    #[error(transparent)]
    Gallery(#[from] IndexError),
}

/// Writes the schedule, detection stream, and gallery of a synthetic episode
/// into `dir` and returns the detection file path.
pub fn write_synth(dir: &Path, episode: &SynthEpisode, metric: Metric) -> Result<PathBuf, WriteError> {
    std::fs::create_dir_all(dir)?;
    let mut schedule = serde_json::to_vec_pretty(&episode.schedule).map_err(io::Error::from)?;
    schedule.push(b'\n');
    std::fs::write(dir.join(SCHEDULE_FILE), schedule)?;

    let dets = dir.join(DETECTIONS_FILE);
    let mut out = BufWriter::new(File::create(&dets)?);
    write_stream(&mut out, &episode.frames())?;
    out.flush()?;

    let g = &episode.gallery;
    KnownIdentityIndex::from_flat(&g.ids, g.dim, &g.vectors, metric)?.save(dir.join(GALLERY_FILE))?;
    Ok(dets)
}

/// The gallery that sits next to a detection file.
pub fn sibling_gallery(detections: &Path) -> PathBuf {
    detections.parent().unwrap_or(Path::new(".")).join(GALLERY_FILE)
}

pub fn load_gallery(path: &Path, metric: Option<Metric>) -> Result<KnownIdentityIndex, ProcessError> {
    let wrap = |source| ProcessError::Gallery { path: path.to_path_buf(), source };
    let index = KnownIdentityIndex::load(path).map_err(wrap)?;
    match metric {
        Some(m) if m != index.metric() => index.with_metric(m).map_err(wrap),
        _ => Ok(index),
    }
}

/// Runs the pipeline on an episode's registered detection file and stores
/// the result, which also marks the episode processed.
pub fn process_registered(
    store: &Store,
    episode_id: &str,
    gallery: Option<&Path>,
    metric: Option<Metric>,
    config: &RunConfig,
) -> Result<RunReport, ProcessError> {
    let info = store.episode(episode_id).ok_or_else(|| ProcessError::UnknownEpisode(episode_id.to_string()))?;
    let dets = info.detections.ok_or_else(|| ProcessError::NoDetectionFile(episode_id.to_string()))?;
    let gallery_path = gallery.map_or_else(|| sibling_gallery(&dets), Path::to_path_buf);
    let index = load_gallery(&gallery_path, metric)?;

    let wrap = |source| ProcessError::Detections { path: dets.clone(), source };
    let file = File::open(&dets).map_err(|e| wrap(DetsError::Io(e)))?;
    let frames = read_stream(BufReader::new(file)).map_err(wrap)?;

    let (timeline, report) = process_episode(&info.meta, &frames, &index, synthetic_stages, config)?;
    store.put_timeline(timeline)?;
    Ok(report)
}

//! `screenline`: synthesize, process, query, chart, export, and serve.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use screenline_core::charts::{episode_chart, series_chart, ChartParams};
use screenline_core::pipeline::{BatchConfig, RunConfig};
use screenline_core::store::{QueryFilter, Store, StoreError};
use screenline_core::synth::{EpisodeParams, SynthEpisode};
use screenline_core::workflow::{self, ProcessError};
use screenline_core::{ChartType, CoalesceParams, EpisodeMeta, Metric, Timeline};
use screenline_service::ServiceConfig;

use config::FileConfig;

#[derive(Parser, Debug)]
#[command(name = "screenline", version, about = "Screen-time analytics over detection streams")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "SCREENLINE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Optional key = value file supplying defaults for any flag.
    #[arg(long, global = true, env = "SCREENLINE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic episode and gallery, and register it in the store.
    Synth(SynthArgs),
    /// Run the pipeline on a registered episode and store its timeline.
    Process(ProcessArgs),
    /// Print matching appearance records as JSON Lines.
    Query(QueryArgs),
    /// Print one chart as ChartSpec JSON.
    Chart(ChartArgs),
    /// Write a stored episode as a meta line followed by its records.
    Export(ExportArgs),
    /// Start the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    episode: String,
    #[arg(long, default_value = "synthetic")]
    series: String,
    #[arg(long, default_value_t = 1)]
    season: u32,
    #[arg(long, default_value_t = 1)]
    number: u32,
    /// Output directory; defaults to `<data-dir>/synth/<episode>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    duration_ms: Option<u64>,
    #[arg(long)]
    mean_scene_ms: Option<u64>,
    #[arg(long)]
    cast: Option<f64>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Metric stored in the gallery file.
    #[arg(long)]
    metric: Option<Metric>,
}

#[derive(Args, Debug)]
struct ProcessArgs {
    #[arg(long)]
    episode: String,
    /// Gallery file; defaults to the one next to the detection file.
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    detect_batch: Option<usize>,
    #[arg(long)]
    embed_batch: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    episode: Option<String>,
    #[arg(long)]
    series: Option<String>,
    #[arg(long)]
    season: Option<u32>,
    /// Repeatable, or comma separated.
    #[arg(long, value_delimiter = ',')]
    celebrity: Vec<String>,
    #[arg(long)]
    from_ms: Option<u64>,
    #[arg(long)]
    to_ms: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ChartFlags {
    #[arg(long)]
    bucket_ms: Option<u64>,
    #[arg(long)]
    window_ms: Option<u64>,
    #[arg(long)]
    segment_ms: Option<u64>,
    #[arg(long)]
    gap_ms: Option<u64>,
    #[arg(long)]
    tail_ms: Option<u64>,
    #[arg(long)]
    min_edge_weight: Option<u64>,
}

#[derive(Args, Debug)]
struct ChartArgs {
    chart_type: ChartType,
    #[arg(long, conflicts_with = "series", required_unless_present = "series")]
    episode: Option<String>,
    #[arg(long)]
    series: Option<String>,
    /// Seasons of `--series` to compare; all when omitted.
    #[arg(long, value_delimiter = ',', requires = "series")]
    seasons: Vec<u32>,
    #[command(flatten)]
    params: ChartFlags,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    episode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    addr: Option<SocketAddr>,
    /// Directory of static files served under every unclaimed path.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    max_ingest_bytes: Option<usize>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    gap_ms: Option<u64>,
    #[arg(long)]
    tail_ms: Option<u64>,
    #[command(flatten)]
    run: RunFlags,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Data(anyhow::Error),
    Internal(anyhow::Error),
    /// The reader of stdout went away, as with `| head`.
    Closed,
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn internal(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Internal(e.into())
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => internal(e),
            _ => data(e),
        }
    }
}

impl From<ProcessError> for Failure {
    fn from(e: ProcessError) -> Self {
        match e {
            ProcessError::Store(s) => s.into(),
            _ => data(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

const DEFAULT_DATA_DIR: &str = "screenline-data";
const DEFAULT_ADDR: &str = "127.0.0.1:8080";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    match run(cli) {
        Ok(()) | Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(|e| Failure::Data(e.context(format!("config {}", path.display()))))?,
        None => FileConfig::default(),
    };
    let data_dir = cli.data_dir.or_else(|| file.data_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
    match cli.command {
        Command::Synth(a) => synth(&data_dir, a),
        Command::Process(a) => process(&data_dir, &file, a),
        Command::Query(a) => query(&data_dir, a),
        Command::Chart(a) => chart(&data_dir, &file, a),
        Command::Export(a) => export(&data_dir, &file, a),
        Command::Serve(a) => serve(&data_dir, &file, a),
    }
}

fn run_config(file: &FileConfig, flags: &RunFlags) -> (RunConfig, Option<Metric>) {
    let base = RunConfig::default();
    let batch = BatchConfig::new(
        flags.detect_batch.or(file.detect_batch).unwrap_or(base.batch.detect_batch),
        flags.embed_batch.or(file.embed_batch).unwrap_or(base.batch.embed_batch),
    );
    let run = RunConfig {
        batch,
        n_workers: flags.workers.or(file.workers).unwrap_or(base.n_workers),
        threshold: flags.threshold.or(file.threshold).unwrap_or(base.threshold),
        k: flags.k.or(file.k).unwrap_or(base.k),
    };
    (run, flags.metric.or(file.metric))
}

fn coalesce(file: &FileConfig, gap_ms: Option<u64>, tail_ms: Option<u64>) -> CoalesceParams {
    let base = CoalesceParams::default();
    CoalesceParams {
        gap_ms: gap_ms.or(file.gap_ms).unwrap_or(base.gap_ms),
        tail_ms: tail_ms.or(file.tail_ms).unwrap_or(base.tail_ms),
    }
}

/// Stdout or a file, buffered.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display())).map_err(internal)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn finish(mut out: Box<dyn Write>) -> CmdResult {
    out.flush().map_err(write_err)
}

fn write_err(e: io::Error) -> Failure {
    if e.kind() == io::ErrorKind::BrokenPipe {
        return Failure::Closed;
    }
    internal(anyhow::Error::from(e).context("writing output"))
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    let mut out = output(None)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| write_err(e.into()))?;
    writeln!(out).map_err(write_err)?;
    finish(out)
}

/// Read-only commands refuse to treat a missing directory as an empty store.
fn open_existing(data_dir: &Path) -> Result<Store, Failure> {
    if !data_dir.is_dir() {
        return Err(data(anyhow::anyhow!("no store at {}", data_dir.display())));
    }
    Ok(Store::open_read_only(data_dir)?)
}

fn synth(data_dir: &Path, a: SynthArgs) -> CmdResult {
    let d = EpisodeParams::default();
    let params = EpisodeParams {
        seed: a.seed.unwrap_or(d.seed),
        n_identities: a.identities.unwrap_or(d.n_identities),
        dim: a.dim.unwrap_or(d.dim),
        duration_ms: a.duration_ms.unwrap_or(d.duration_ms),
        mean_scene_ms: a.mean_scene_ms.unwrap_or(d.mean_scene_ms),
        mean_cast_per_scene: a.cast.unwrap_or(d.mean_cast_per_scene),
        fps: a.fps.unwrap_or(d.fps),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
    };
    let meta = EpisodeMeta::new(&a.episode, &a.series, a.season, a.number, params.duration_ms);
    meta.check().map_err(data)?;
    let episode = SynthEpisode::generate(&params).map_err(data)?;

    let dir = a.out.unwrap_or_else(|| data_dir.join("synth").join(&a.episode));
    let dets = workflow::write_synth(&dir, &episode, a.metric.unwrap_or(Metric::Cosine)).map_err(internal)?;
    let dets = std::fs::canonicalize(&dets).map_err(internal)?;

    let store = Store::open(data_dir)?;
    store.register(meta, Some(dets.clone()))?;
    let summary = json!({
        "episode_id": a.episode,
        "identities": episode.gallery.len(),
        "detections": episode.events.len(),
        "detections_file": dets,
        "params": params,
    });
    print_json(&summary)
}

fn process(data_dir: &Path, file: &FileConfig, a: ProcessArgs) -> CmdResult {
    let (run, metric) = run_config(file, &a.run);
    let store = Store::open(data_dir)?;
    let gallery = a.gallery.or_else(|| file.gallery.clone());
    let report = workflow::process_registered(&store, &a.episode, gallery.as_deref(), metric, &run)?;
    print_json(&report)
}

fn query(data_dir: &Path, a: QueryArgs) -> CmdResult {
    let store = open_existing(data_dir)?;
    let filter = QueryFilter {
        episode_id: a.episode,
        series_id: a.series,
        season: a.season,
        celebrities: (!a.celebrity.is_empty()).then(|| a.celebrity.into_iter().collect()),
        from_ms: a.from_ms,
        to_ms: a.to_ms,
    };
    let rows = store.query_appearances(&filter)?;
    let mut out = output(None)?;
    screenline_core::model::write_jsonl(&mut out, &rows).map_err(write_err)?;
    finish(out)
}

fn processed(store: &Store, id: &str) -> Result<Arc<Timeline>, Failure> {
    let info = store.episode(id).ok_or_else(|| data(StoreError::UnknownEpisode(id.to_string())))?;
    if !info.meta.processed {
        return Err(data(anyhow::anyhow!("episode {id:?} is not processed yet")));
    }
    store.timeline(id).ok_or_else(|| internal(anyhow::anyhow!("processed episode {id:?} has no timeline")))
}

fn chart(data_dir: &Path, file: &FileConfig, a: ChartArgs) -> CmdResult {
    let p = &a.params;
    let params = ChartParams {
        bucket_ms: p.bucket_ms.or(file.bucket_ms),
        window_ms: p.window_ms.or(file.window_ms),
        segment_ms: p.segment_ms.or(file.segment_ms),
        gap_ms: p.gap_ms.or(file.gap_ms),
        tail_ms: p.tail_ms.or(file.tail_ms),
        min_edge_weight: p.min_edge_weight.or(file.min_edge_weight),
    };
    let store = open_existing(data_dir)?;
    let spec = match (&a.episode, &a.series) {
        (Some(id), _) => episode_chart(&*processed(&store, id)?, a.chart_type, &params, CoalesceParams::default()).map_err(data)?,
        (None, Some(series)) => {
            let seasons = (!a.seasons.is_empty()).then_some(a.seasons.as_slice());
            let selected: Vec<EpisodeMeta> = store
                .episodes()
                .into_iter()
                .map(|e| e.meta)
                .filter(|m| &m.series_id == series && seasons.is_none_or(|s| s.contains(&m.season)))
                .collect();
            if selected.is_empty() {
                return Err(data(anyhow::anyhow!("no episodes for series {series:?} and seasons {:?}", a.seasons)));
            }
            if let Some(m) = selected.iter().find(|m| !m.processed) {
                return Err(data(anyhow::anyhow!("episode {:?} is not processed yet", m.episode_id)));
            }
            let timelines = store.series_timelines(series, seasons);
            let refs: Vec<&Timeline> = timelines.iter().map(Arc::as_ref).collect();
            series_chart(&refs, a.chart_type, &params, CoalesceParams::default()).map_err(data)?
        }
        (None, None) => unreachable!("clap requires a scope"),
    };
    let mut out = output(a.out.as_deref())?;
    out.write_all(spec.to_json().as_bytes()).map_err(write_err)?;
    finish(out)
}

fn export(data_dir: &Path, file: &FileConfig, a: ExportArgs) -> CmdResult {
    let store = open_existing(data_dir)?;
    let timeline = processed(&store, &a.episode)?;
    let export = timeline.export_meta(&coalesce(file, None, None));
    let mut out = output(a.out.as_deref())?;
    let head = json!({ "meta": timeline.meta(), "export": export });
    writeln!(out, "{head}").map_err(write_err)?;
    timeline.write_jsonl(&mut out).map_err(write_err)?;
    finish(out)
}

fn serve(data_dir: &Path, file: &FileConfig, a: ServeArgs) -> CmdResult {
    let (run, metric) = run_config(file, &a.run);
    let config = ServiceConfig {
        max_ingest_bytes: a.max_ingest_bytes.or(file.max_ingest_bytes).unwrap_or(screenline_service::DEFAULT_MAX_INGEST_BYTES),
        coalesce: coalesce(file, a.gap_ms, a.tail_ms),
        run,
        gallery: a.gallery.or_else(|| file.gallery.clone()),
        metric,
        static_dir: a.static_dir.or_else(|| file.static_dir.clone()),
    };
    let addr = match a.addr.or(file.addr) {
        Some(addr) => addr,
        None => DEFAULT_ADDR.parse().expect("valid default address"),
    };
    let store = Arc::new(Store::open(data_dir)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(internal)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}")).map_err(internal)?;
        let local = listener.local_addr().map_err(internal)?;
        eprintln!("listening on http://{local}");
        tracing::info!(%local, data_dir = %data_dir.display(), "serving");
        screenline_service::serve(listener, screenline_service::router(store, config)).await.map_err(internal)
    })
}

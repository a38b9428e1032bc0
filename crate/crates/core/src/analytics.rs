//! The ten chart families, as pure transforms from timelines to
//! [`ChartSpec`] values.
//!
//! Count charts (`per_minute_bars`, `total_counts`, `trend_lines`,
//! `distribution_pie`, `segment_heatmap`) count every record. Co-appearance
//! charts use presence: an identity seen several times inside one window
//! bucket counts once. Duration charts work on coalesced intervals.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::aggregation::{intervals_by_celebrity, total_duration, CoalesceParams, Timeline};
use crate::model::AppearanceRecord;

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_WINDOW_MS: u64 = 1_000;
pub const DEFAULT_BUCKET_MS: u64 = 60_000;
pub const DEFAULT_SEGMENT_MS: u64 = 300_000;
pub const DEFAULT_MIN_EDGE_WEIGHT: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("timeline has no records")]
    EmptyTimeline,
    #[error("co-appearance matrix is not symmetric with a zero diagonal")]
    AsymmetricInput,
    #[error("timelines span several series: {0:?}")]
    MixedSeries(Vec<String>),
    #[error("no season groups given")]
    NoSeasons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartType {
    PerMinuteBars,
    TotalCounts,
    TotalDurations,
    TrendLines,
    DistributionPie,
    CoappearanceMatrix,
    CoappearanceNetwork,
    StackedArea,
    SeasonalComparison,
    SegmentHeatmap,
}

impl ChartType {
    pub const ALL: [ChartType; 10] = [
        ChartType::PerMinuteBars,
        ChartType::TotalCounts,
        ChartType::TotalDurations,
        ChartType::TrendLines,
        ChartType::DistributionPie,
        ChartType::CoappearanceMatrix,
        ChartType::CoappearanceNetwork,
        ChartType::StackedArea,
        ChartType::SeasonalComparison,
        ChartType::SegmentHeatmap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChartType::PerMinuteBars => "per_minute_bars",
            ChartType::TotalCounts => "total_counts",
            ChartType::TotalDurations => "total_durations",
            ChartType::TrendLines => "trend_lines",
            ChartType::DistributionPie => "distribution_pie",
            ChartType::CoappearanceMatrix => "coappearance_matrix",
            ChartType::CoappearanceNetwork => "coappearance_network",
            ChartType::StackedArea => "stacked_area",
            ChartType::SeasonalComparison => "seasonal_comparison",
            ChartType::SegmentHeatmap => "segment_heatmap",
        }
    }

    /// Which payload field the chart populates.
    pub fn payload(self) -> Payload {
        match self {
            ChartType::CoappearanceMatrix | ChartType::SegmentHeatmap => Payload::Matrix,
            ChartType::CoappearanceNetwork => Payload::Graph,
            _ => Payload::Series,
        }
    }
}

impl std::fmt::Display for ChartType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChartType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChartType::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown chart type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Series,
    Matrix,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Time,
    Category,
    Segment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub label: String,
    pub kind: AxisKind,
}

/// X coordinate: a bucket/segment index or a category label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XValue {
    Index(u64),
    Label(String),
}

/// Serialized as a two-element array `[x, y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(pub XValue, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

impl Series {
    pub fn total(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Renderer-neutral description of one chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub schema: u32,
    pub chart_type: ChartType,
    pub title: String,
    pub x_axis: Axis,
    pub series: Option<Vec<Series>>,
    pub matrix: Option<Matrix>,
    pub graph: Option<Graph>,
    pub meta: BTreeMap<String, Value>,
}

impl ChartSpec {
    fn new(chart_type: ChartType, title: &str, label: &str, kind: AxisKind) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            chart_type,
            title: title.to_string(),
            x_axis: Axis { label: label.to_string(), kind },
            series: None,
            matrix: None,
            graph: None,
            meta: BTreeMap::new(),
        }
    }

    fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    /// Checks the payload matches the chart type and every number is finite
    /// and non-negative.
    pub fn check(&self) -> Result<(), String> {
        let populated = (self.series.is_some(), self.matrix.is_some(), self.graph.is_some());
        let expected = match self.chart_type.payload() {
            Payload::Series => (true, false, false),
            Payload::Matrix => (false, true, false),
            Payload::Graph => (false, false, true),
        };
        if populated != expected {
            return Err(format!("{} populates {populated:?}", self.chart_type));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let mut values: Vec<f64> = Vec::new();
        if let Some(series) = &self.series {
            values.extend(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        }
        if let Some(m) = &self.matrix {
            if m.cells.len() != m.row_labels.len() || m.cells.iter().any(|r| r.len() != m.col_labels.len()) {
                return Err("matrix shape does not match its labels".into());
            }
            values.extend(m.cells.iter().flatten());
        }
        if let Some(g) = &self.graph {
            values.extend(g.nodes.iter().map(|n| n.weight));
            values.extend(g.edges.iter().map(|e| e.weight));
        }
        match values.into_iter().find(|v| !ok(*v)) {
            Some(v) => Err(format!("value {v} is negative or not finite")),
            None => Ok(()),
        }
    }

    /// The JSON body served and printed for this chart.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("chart specs serialize");
        s.push('\n');
        s
    }
}

/// Window, bucket, and segment sizes shared by the chart endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    /// 0 means exact timestamp equality.
    pub coappearance_window_ms: u64,
    pub bucket_ms: u64,
    pub segment_ms: u64,
    pub min_edge_weight: u64,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            coappearance_window_ms: DEFAULT_WINDOW_MS,
            bucket_ms: DEFAULT_BUCKET_MS,
            segment_ms: DEFAULT_SEGMENT_MS,
            min_edge_weight: DEFAULT_MIN_EDGE_WEIGHT,
        }
    }
}

impl WindowParams {
    pub fn check(&self) -> Result<(), AnalyticsError> {
        positive("bucket_ms", self.bucket_ms)?;
        positive("segment_ms", self.segment_ms)?;
        positive("min_edge_weight", self.min_edge_weight)
    }
}

fn positive(name: &str, v: u64) -> Result<(), AnalyticsError> {
    if v == 0 {
        Err(AnalyticsError::BadParams(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a / b + u64::from(a % b != 0)
}

/// Record counts per (celebrity, bucket).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    pub celebrities: Vec<String>,
    pub bucket_ms: u64,
    /// `counts[c][b]` for celebrity `c` and bucket `b`.
    pub counts: Vec<Vec<u64>>,
}

impl CountMatrix {
    pub fn buckets(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn row_totals(&self) -> BTreeMap<String, u64> {
        self.celebrities.iter().cloned().zip(self.counts.iter().map(|r| r.iter().sum())).collect()
    }
}

/// Buckets `[b·bucket_ms, (b+1)·bucket_ms)` covering the episode, including a
/// trailing partial bucket and any record stamped exactly at the end.
pub fn count_matrix(timeline: &Timeline, bucket_ms: u64) -> Result<CountMatrix, AnalyticsError> {
    positive("bucket_ms", bucket_ms)?;
    let celebrities = timeline.celebrities();
    let n_buckets = match timeline.records().last() {
        None => 0,
        Some(last) => ceil_div(timeline.duration_ms(), bucket_ms).max(last.t_ms / bucket_ms + 1) as usize,
    };
    let row: BTreeMap<&str, usize> = celebrities.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut counts = vec![vec![0u64; n_buckets]; celebrities.len()];
    for r in timeline.records() {
        counts[row[r.celebrity_id.as_str()]][(r.t_ms / bucket_ms) as usize] += 1;
    }
    Ok(CountMatrix { celebrities, bucket_ms, counts })
}

fn episode_meta(timeline: &Timeline) -> Value {
    json!(timeline.episode_id())
}

fn count_series(m: &CountMatrix) -> Vec<Series> {
    m.celebrities
        .iter()
        .zip(&m.counts)
        .map(|(c, row)| Series {
            name: c.clone(),
            points: row.iter().enumerate().map(|(b, n)| Point(XValue::Index(b as u64), *n as f64)).collect(),
        })
        .collect()
}

/// Stacked bars of record counts per minute bucket, one series per celebrity.
pub fn per_minute_counts(timeline: &Timeline, bucket_ms: u64) -> Result<(ChartSpec, CountMatrix), AnalyticsError> {
    let m = count_matrix(timeline, bucket_ms)?;
    let mut spec = ChartSpec::new(ChartType::PerMinuteBars, "Appearances per minute", "bucket", AxisKind::Time)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("bucket_ms", json!(bucket_ms))
        .with_meta("buckets", json!(m.buckets()))
        .with_meta("counting", json!("records"));
    spec.series = Some(count_series(&m));
    Ok((spec, m))
}

/// Record count per celebrity, descending; ties by id.
pub fn appearance_counts(timeline: &Timeline) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in timeline.records() {
        *counts.entry(r.celebrity_id.as_str()).or_default() += 1;
    }
    let mut v: Vec<(String, u64)> = counts.into_iter().map(|(c, n)| (c.to_string(), n)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

pub fn total_counts(timeline: &Timeline) -> ChartSpec {
    let counts = appearance_counts(timeline);
    let mut spec = ChartSpec::new(ChartType::TotalCounts, "Total appearances", "celebrity", AxisKind::Category)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("counting", json!("records"));
    spec.series = Some(vec![Series {
        name: "appearances".into(),
        points: counts.into_iter().map(|(c, n)| Point(XValue::Label(c), n as f64)).collect(),
    }]);
    spec
}

/// Total coalesced screen time per celebrity in ms, descending; ties by id.
pub fn total_durations(timeline: &Timeline, params: &CoalesceParams) -> ChartSpec {
    let mut durations: Vec<(String, u64)> = intervals_by_celebrity(timeline, params)
        .into_iter()
        .map(|(c, iv)| (c, total_duration(&iv)))
        .collect();
    durations.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut spec = ChartSpec::new(ChartType::TotalDurations, "Total screen time", "celebrity", AxisKind::Category)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("gap_ms", json!(params.gap_ms))
        .with_meta("tail_ms", json!(params.tail_ms))
        .with_meta("unit", json!("ms"));
    spec.series = Some(vec![Series {
        name: "duration_ms".into(),
        points: durations.into_iter().map(|(c, d)| Point(XValue::Label(c), d as f64)).collect(),
    }]);
    spec
}

/// One zero-filled count line per celebrity across all buckets.
pub fn trend_lines(timeline: &Timeline, bucket_ms: u64) -> Result<ChartSpec, AnalyticsError> {
    let m = count_matrix(timeline, bucket_ms)?;
    let mut spec = ChartSpec::new(ChartType::TrendLines, "Appearance trend", "bucket", AxisKind::Time)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("bucket_ms", json!(bucket_ms))
        .with_meta("buckets", json!(m.buckets()))
        .with_meta("counting", json!("records"));
    spec.series = Some(count_series(&m));
    Ok(spec)
}

/// Share of all records per celebrity, in [`appearance_counts`] order.
pub fn distribution_pie(timeline: &Timeline) -> Result<ChartSpec, AnalyticsError> {
    if timeline.is_empty() {
        return Err(AnalyticsError::EmptyTimeline);
    }
    let counts = appearance_counts(timeline);
    let total = timeline.len() as f64;
    let mut spec = ChartSpec::new(ChartType::DistributionPie, "Appearance distribution", "celebrity", AxisKind::Category)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("total", json!(timeline.len()))
        .with_meta("counting", json!("records"));
    spec.series = Some(vec![Series {
        name: "share".into(),
        points: counts.into_iter().map(|(c, n)| Point(XValue::Label(c), n as f64 / total)).collect(),
    }]);
    Ok(spec)
}

/// Symmetric pair counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoMatrix {
    pub labels: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl CoMatrix {
    pub fn is_symmetric_zero_diagonal(&self) -> bool {
        let n = self.labels.len();
        self.cells.len() == n
            && self.cells.iter().all(|r| r.len() == n)
            && (0..n).all(|i| self.cells[i][i] == 0 && (0..n).all(|j| self.cells[i][j] == self.cells[j][i]))
    }

    /// Non-zero pairs `(a, b, count)` with `a < b`.
    pub fn pairs(&self) -> Vec<(String, String, u64)> {
        let mut out = Vec::new();
        for i in 0..self.labels.len() {
            for j in i + 1..self.labels.len() {
                if self.cells[i][j] > 0 {
                    out.push((self.labels[i].clone(), self.labels[j].clone(), self.cells[i][j]));
                }
            }
        }
        out
    }
}

/// Counts, for each pair of celebrities, the window buckets
/// `⌊t_ms / window_ms⌋` in which both appear. `window_ms = 0` groups by
/// exact timestamp instead.
pub fn co_matrix(timeline: &Timeline, window_ms: u64) -> CoMatrix {
    co_matrix_records(timeline.records(), window_ms)
}

/// [`co_matrix`] over time-sorted records of a single episode.
pub fn co_matrix_records(records: &[AppearanceRecord], window_ms: u64) -> CoMatrix {
    let labels: Vec<String> = records
        .iter()
        .map(|r| r.celebrity_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let n = labels.len();
    let mut cells = vec![vec![0u64; n]; n];

    let bucket_of = |t: u64| t.checked_div(window_ms).unwrap_or(t);
    // records are time-sorted, so each bucket is a contiguous run
    let mut start = 0;
    while start < records.len() {
        let bucket = bucket_of(records[start].t_ms);
        let mut end = start;
        let mut present = BTreeSet::new();
        while end < records.len() && bucket_of(records[end].t_ms) == bucket {
            present.insert(index[records[end].celebrity_id.as_str()]);
            end += 1;
        }
        let present: Vec<usize> = present.into_iter().collect();
        for (k, &i) in present.iter().enumerate() {
            for &j in &present[k + 1..] {
                cells[i][j] += 1;
                cells[j][i] += 1;
            }
        }
        start = end;
    }
    CoMatrix { labels, cells }
}

pub fn coappearance_matrix(timeline: &Timeline, window_ms: u64) -> (ChartSpec, CoMatrix) {
    let m = co_matrix(timeline, window_ms);
    let mut spec = ChartSpec::new(ChartType::CoappearanceMatrix, "Co-appearance matrix", "celebrity", AxisKind::Category)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("window_ms", json!(window_ms))
        .with_meta("counting", json!("window buckets with both present"));
    spec.matrix = Some(Matrix {
        row_labels: m.labels.clone(),
        col_labels: m.labels.clone(),
        cells: m.cells.iter().map(|r| r.iter().map(|v| *v as f64).collect()).collect(),
    });
    (spec, m)
}

/// Nodes weighted by appearance count, edges for pairs whose co-appearance
/// count reaches `min_edge_weight`, sorted by weight descending then ids.
pub fn coappearance_network(
    matrix: &CoMatrix,
    node_weights: &BTreeMap<String, u64>,
    min_edge_weight: u64,
) -> Result<ChartSpec, AnalyticsError> {
    if !matrix.is_symmetric_zero_diagonal() {
        return Err(AnalyticsError::AsymmetricInput);
    }
    positive("min_edge_weight", min_edge_weight)?;
    let nodes = matrix
        .labels
        .iter()
        .map(|c| Node { id: c.clone(), weight: node_weights.get(c).copied().unwrap_or(0) as f64 })
        .collect();
    let mut edges: Vec<(String, String, u64)> =
        matrix.pairs().into_iter().filter(|(_, _, w)| *w >= min_edge_weight).collect();
    edges.sort_by(|x, y| y.2.cmp(&x.2).then_with(|| x.0.cmp(&y.0)).then_with(|| x.1.cmp(&y.1)));
    let mut spec = ChartSpec::new(ChartType::CoappearanceNetwork, "Co-appearance network", "celebrity", AxisKind::Category)
        .with_meta("min_edge_weight", json!(min_edge_weight));
    spec.graph = Some(Graph {
        nodes,
        edges: edges.into_iter().map(|(a, b, w)| Edge { a, b, weight: w as f64 }).collect(),
    });
    Ok(spec)
}

/// Network chart straight from a timeline.
pub fn coappearance_network_for(timeline: &Timeline, window_ms: u64, min_edge_weight: u64) -> Result<ChartSpec, AnalyticsError> {
    let m = co_matrix(timeline, window_ms);
    let weights: BTreeMap<String, u64> = appearance_counts(timeline).into_iter().collect();
    Ok(coappearance_network(&m, &weights, min_edge_weight)?
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("window_ms", json!(window_ms)))
}

/// Fraction of each bucket covered by each celebrity's intervals. Layers
/// are ordered by total duration descending, ties by id.
pub fn stacked_area(timeline: &Timeline, bucket_ms: u64, params: &CoalesceParams) -> Result<ChartSpec, AnalyticsError> {
    positive("bucket_ms", bucket_ms)?;
    let n_buckets = ceil_div(timeline.duration_ms(), bucket_ms);
    let mut layers: Vec<(String, u64, Vec<f64>)> = intervals_by_celebrity(timeline, params)
        .into_iter()
        .map(|(c, iv)| {
            let mut values = vec![0f64; n_buckets as usize];
            for i in &iv {
                let first = i.start_ms / bucket_ms;
                let last = (i.end_ms - 1) / bucket_ms;
                for b in first..=last.min(n_buckets.saturating_sub(1)) {
                    let overlap = i.overlap_ms(b * bucket_ms, (b + 1) * bucket_ms);
                    values[b as usize] += overlap as f64 / bucket_ms as f64;
                }
            }
            (c, total_duration(&iv), values)
        })
        .collect();
    layers.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut spec = ChartSpec::new(ChartType::StackedArea, "Screen time over the episode", "bucket", AxisKind::Time)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("bucket_ms", json!(bucket_ms))
        .with_meta("gap_ms", json!(params.gap_ms))
        .with_meta("tail_ms", json!(params.tail_ms))
        .with_meta("value", json!("fraction of bucket present"));
    spec.series = Some(
        layers
            .into_iter()
            .map(|(c, _, values)| Series {
                name: c,
                points: values.into_iter().enumerate().map(|(b, v)| Point(XValue::Index(b as u64), v)).collect(),
            })
            .collect(),
    );
    Ok(spec)
}

/// Screen time in minutes per celebrity, one series per season.
///
/// Every timeline must belong to the same series. Celebrities missing from a
/// season get 0 there.
pub fn seasonal_comparison(timelines: &[&Timeline], params: &CoalesceParams) -> Result<ChartSpec, AnalyticsError> {
    if timelines.is_empty() {
        return Err(AnalyticsError::NoSeasons);
    }
    let series_ids: BTreeSet<&str> = timelines.iter().map(|t| t.meta().series_id.as_str()).collect();
    if series_ids.len() > 1 {
        return Err(AnalyticsError::MixedSeries(series_ids.into_iter().map(str::to_string).collect()));
    }
    let mut per_season: BTreeMap<u32, BTreeMap<String, u64>> = BTreeMap::new();
    let mut celebrities = BTreeSet::new();
    for t in timelines {
        let season = per_season.entry(t.meta().season).or_default();
        for (c, iv) in intervals_by_celebrity(t, params) {
            *season.entry(c.clone()).or_default() += total_duration(&iv);
            celebrities.insert(c);
        }
    }
    let mut spec = ChartSpec::new(ChartType::SeasonalComparison, "Screen time by season", "celebrity", AxisKind::Category)
        .with_meta("series_id", json!(series_ids.into_iter().next()))
        .with_meta("seasons", json!(per_season.keys().collect::<Vec<_>>()))
        .with_meta("episodes", json!(timelines.len()))
        .with_meta("gap_ms", json!(params.gap_ms))
        .with_meta("tail_ms", json!(params.tail_ms))
        .with_meta("unit", json!("minutes"));
    spec.series = Some(
        per_season
            .into_iter()
            .map(|(season, totals)| Series {
                name: format!("season {season}"),
                points: celebrities
                    .iter()
                    .map(|c| Point(XValue::Label(c.clone()), totals.get(c).copied().unwrap_or(0) as f64 / 60_000.0))
                    .collect(),
            })
            .collect(),
    );
    Ok(spec)
}

fn clock(ms: u64) -> String {
    let s = ms / 1000;
    if s >= 3600 {
        format!("{}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60)
    } else {
        format!("{:02}:{:02}", s / 60, s % 60)
    }
}

/// Record counts per (celebrity, segment) over `⌈duration / segment_ms⌉`
/// segments. A record stamped exactly at the episode end lands in the last
/// segment.
pub fn segment_heatmap(timeline: &Timeline, segment_ms: u64) -> Result<ChartSpec, AnalyticsError> {
    positive("segment_ms", segment_ms)?;
    let n = ceil_div(timeline.duration_ms(), segment_ms).max(1);
    let celebrities = timeline.celebrities();
    let row: BTreeMap<&str, usize> = celebrities.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut cells = vec![vec![0f64; n as usize]; celebrities.len()];
    for r in timeline.records() {
        let seg = (r.t_ms / segment_ms).min(n - 1);
        cells[row[r.celebrity_id.as_str()]][seg as usize] += 1.0;
    }
    let col_labels = (0..n)
        .map(|s| {
            let end = ((s + 1) * segment_ms).min(timeline.duration_ms().max(segment_ms));
            format!("{}-{}", clock(s * segment_ms), clock(end))
        })
        .collect();
    let mut spec = ChartSpec::new(ChartType::SegmentHeatmap, "Appearance intensity by segment", "segment", AxisKind::Segment)
        .with_meta("episode_id", episode_meta(timeline))
        .with_meta("segment_ms", json!(segment_ms))
        .with_meta("segments", json!(n))
        .with_meta("counting", json!("records"));
    spec.matrix = Some(Matrix { row_labels: celebrities, col_labels, cells });
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, EpisodeMeta};

    fn timeline(duration: u64, recs: &[(&str, u64)]) -> Timeline {
        let records = recs
            .iter()
            .enumerate()
            .map(|(i, (c, t))| AppearanceRecord::new("ep", *c, *t, i as u64, BBox::FULL, 1.0))
            .collect();
        Timeline::new(EpisodeMeta::new("ep", "s", 1, 1, duration), records).unwrap()
    }

    fn points(spec: &ChartSpec, series: usize) -> Vec<(XValue, f64)> {
        spec.series.as_ref().unwrap()[series].points.iter().map(|p| (p.0.clone(), p.1)).collect()
    }

    fn label(s: &str) -> XValue {
        XValue::Label(s.into())
    }

    #[test]
    fn per_minute_bucketing() {
        let t = timeline(180_000, &[("A", 61_200), ("A", 62_500), ("B", 10)]);
        let (spec, m) = per_minute_counts(&t, 60_000).unwrap();
        spec.check().unwrap();
        assert_eq!(m.celebrities, vec!["A", "B"]);
        assert_eq!(m.counts[0], vec![0, 2, 0]);
        assert_eq!(m.counts[1], vec![1, 0, 0]);
        assert_eq!(m.row_totals()["A"], 2);
    }

    #[test]
    fn per_minute_trailing_bucket() {
        let t = timeline(150_000, &[("A", 149_999), ("A", 150_000)]);
        let (_, m) = per_minute_counts(&t, 60_000).unwrap();
        assert_eq!(m.counts[0], vec![0, 0, 2]);
        let t = timeline(120_000, &[("A", 120_000)]);
        let (_, m) = per_minute_counts(&t, 60_000).unwrap();
        assert_eq!(m.counts[0], vec![0, 0, 1]);
    }

    #[test]
    fn empty_timeline_charts() {
        let t = timeline(60_000, &[]);
        let (spec, m) = per_minute_counts(&t, 60_000).unwrap();
        assert_eq!(m.buckets(), 0);
        assert_eq!(spec.series.as_ref().unwrap().len(), 0);
        assert_eq!(spec.meta["buckets"], json!(0));
        assert_eq!(distribution_pie(&t), Err(AnalyticsError::EmptyTimeline));
        assert!(total_durations(&t, &CoalesceParams::default()).series.unwrap()[0].points.is_empty());
        assert_eq!(per_minute_counts(&t, 0).unwrap_err(), AnalyticsError::BadParams("bucket_ms must be at least 1".into()));
    }

    #[test]
    fn total_counts_order() {
        let t = timeline(10_000, &[("B", 1), ("A", 2), ("B", 3), ("A", 4), ("A", 5), ("A", 6), ("B", 7), ("A", 8)]);
        assert_eq!(points(&total_counts(&t), 0), vec![(label("A"), 5.0), (label("B"), 3.0)]);
        let t = timeline(10_000, &[("B", 1), ("A", 2), ("B", 3), ("A", 4)]);
        assert_eq!(points(&total_counts(&t), 0), vec![(label("A"), 2.0), (label("B"), 2.0)]);
    }

    #[test]
    fn durations_from_intervals() {
        let t = timeline(60_000, &[("A", 10_000), ("A", 10_500), ("A", 11_000)]);
        let spec = total_durations(&t, &CoalesceParams { gap_ms: 2_000, tail_ms: 500 });
        assert_eq!(points(&spec, 0), vec![(label("A"), 1_500.0)]);
    }

    #[test]
    fn trend_pivot() {
        let t = timeline(180_000, &[("A", 61_000), ("A", 62_000), ("B", 0)]);
        let spec = trend_lines(&t, 60_000).unwrap();
        assert_eq!(
            points(&spec, 0),
            vec![(XValue::Index(0), 0.0), (XValue::Index(1), 2.0), (XValue::Index(2), 0.0)]
        );
        let t = timeline(30_000, &[("A", 1), ("B", 2)]);
        let spec = trend_lines(&t, 60_000).unwrap();
        assert!(spec.series.unwrap().iter().all(|s| s.points.len() == 1));
    }

    #[test]
    fn pie_shares() {
        let t = timeline(10_000, &[("A", 1), ("A", 2), ("A", 3), ("B", 4)]);
        assert_eq!(points(&distribution_pie(&t).unwrap(), 0), vec![(label("A"), 0.75), (label("B"), 0.25)]);
        let t = timeline(10_000, &[("A", 1)]);
        assert_eq!(points(&distribution_pie(&t).unwrap(), 0), vec![(label("A"), 1.0)]);
    }

    #[test]
    fn coappearance_window() {
        let t = timeline(10_000, &[("A", 5_000), ("B", 5_300)]);
        let (spec, m) = coappearance_matrix(&t, 1_000);
        spec.check().unwrap();
        assert_eq!(m.cells, vec![vec![0, 1], vec![1, 0]]);
        // exact-timestamp mode
        assert_eq!(co_matrix(&t, 0).cells, vec![vec![0, 0], vec![0, 0]]);
        let same = timeline(10_000, &[("A", 5_000), ("B", 5_000)]);
        assert_eq!(co_matrix(&same, 0).cells, vec![vec![0, 1], vec![1, 0]]);

        let solo = timeline(10_000, &[("A", 1), ("A", 2)]);
        assert_eq!(co_matrix(&solo, 1_000).cells, vec![vec![0]]);
    }

    #[test]
    fn network_thresholds() {
        let m = CoMatrix { labels: vec!["A".into(), "B".into()], cells: vec![vec![0, 3], vec![3, 0]] };
        let w: BTreeMap<String, u64> = [("A".to_string(), 10), ("B".to_string(), 4)].into();
        let g = coappearance_network(&m, &w, 1).unwrap().graph.unwrap();
        assert_eq!(g.edges, vec![Edge { a: "A".into(), b: "B".into(), weight: 3.0 }]);
        assert_eq!(g.nodes[0], Node { id: "A".into(), weight: 10.0 });
        let g = coappearance_network(&m, &w, 4).unwrap().graph.unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.nodes.len(), 2);

        let bad = CoMatrix { labels: vec!["A".into(), "B".into()], cells: vec![vec![0, 3], vec![2, 0]] };
        assert_eq!(coappearance_network(&bad, &w, 1), Err(AnalyticsError::AsymmetricInput));
        let diag = CoMatrix { labels: vec!["A".into()], cells: vec![vec![1]] };
        assert_eq!(coappearance_network(&diag, &w, 1), Err(AnalyticsError::AsymmetricInput));
    }

    #[test]
    fn network_edge_order() {
        let labels: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let cells = vec![vec![0, 2, 5, 2], vec![2, 0, 0, 5], vec![5, 0, 0, 1], vec![2, 5, 1, 0]];
        let g = coappearance_network(&CoMatrix { labels, cells }, &BTreeMap::new(), 1).unwrap().graph.unwrap();
        let order: Vec<(String, String, f64)> = g.edges.into_iter().map(|e| (e.a, e.b, e.weight)).collect();
        let e = |a: &str, b: &str, w: f64| (a.to_string(), b.to_string(), w);
        assert_eq!(order, vec![e("A", "C", 5.0), e("B", "D", 5.0), e("A", "B", 2.0), e("A", "D", 2.0), e("C", "D", 1.0)]);
    }

    #[test]
    fn stacked_area_overlap() {
        let p = CoalesceParams { gap_ms: 0, tail_ms: 60_000 };
        let t = timeline(300_000, &[("A", 180_000)]);
        let spec = stacked_area(&t, 60_000, &p).unwrap();
        let vals: Vec<f64> = points(&spec, 0).into_iter().map(|p| p.1).collect();
        assert_eq!(vals, vec![0.0, 0.0, 0.0, 1.0, 0.0]);

        let p = CoalesceParams { gap_ms: 0, tail_ms: 30_000 };
        let t = timeline(120_000, &[("A", 0)]);
        let vals: Vec<f64> = points(&stacked_area(&t, 60_000, &p).unwrap(), 0).into_iter().map(|p| p.1).collect();
        assert_eq!(vals, vec![0.5, 0.0]);
    }

    #[test]
    fn stacked_area_layer_order() {
        let p = CoalesceParams { gap_ms: 2_000, tail_ms: 1_000 };
        let t = timeline(60_000, &[("A", 0), ("B", 10_000), ("B", 11_000), ("C", 20_000)]);
        let names: Vec<String> = stacked_area(&t, 60_000, &p).unwrap().series.unwrap().into_iter().map(|s| s.name).collect();
        assert_eq!(names, vec!["B", "A", "C"]);
    }

    fn season_tl(id: &str, series: &str, season: u32, recs: &[(&str, u64)]) -> Timeline {
        let records = recs
            .iter()
            .enumerate()
            .map(|(i, (c, t))| AppearanceRecord::new(id, *c, *t, i as u64, BBox::FULL, 1.0))
            .collect();
        Timeline::new(EpisodeMeta::new(id, series, season, 1, 600_000), records).unwrap()
    }

    #[test]
    fn seasonal_minutes() {
        let p = CoalesceParams { gap_ms: 0, tail_ms: 120_000 };
        let s1 = season_tl("e1", "show", 1, &[("A", 0), ("B", 300_000)]);
        let s2 = season_tl("e2", "show", 2, &[("A", 0)]);
        let spec = seasonal_comparison(&[&s1, &s2], &p).unwrap();
        spec.check().unwrap();
        let series = spec.series.as_ref().unwrap();
        assert_eq!(series[0].name, "season 1");
        assert_eq!(points(&spec, 0), vec![(label("A"), 2.0), (label("B"), 2.0)]);
        assert_eq!(points(&spec, 1), vec![(label("A"), 2.0), (label("B"), 0.0)]);

        let other = season_tl("e3", "other", 1, &[]);
        assert!(matches!(seasonal_comparison(&[&s1, &other], &p), Err(AnalyticsError::MixedSeries(_))));
        assert_eq!(seasonal_comparison(&[], &p), Err(AnalyticsError::NoSeasons));
    }

    #[test]
    fn heatmap_segments() {
        let t = timeline(3_300_000, &[("A", 0), ("A", 3_300_000), ("B", 1_000_000)]);
        let spec = segment_heatmap(&t, 300_000).unwrap();
        spec.check().unwrap();
        let m = spec.matrix.unwrap();
        assert_eq!(m.col_labels.len(), 11);
        assert_eq!(m.col_labels[0], "00:00-05:00");
        assert_eq!(m.col_labels[10], "50:00-55:00");
        assert_eq!(m.cells[0].iter().sum::<f64>(), 2.0);
        assert_eq!(m.cells[0][10], 1.0);
        assert_eq!(m.cells[1][3], 1.0);

        let t = timeline(3_300_001, &[]);
        assert_eq!(segment_heatmap(&t, 300_000).unwrap().matrix.unwrap().col_labels.len(), 12);
    }

    #[test]
    fn chart_type_names_round_trip() {
        for c in ChartType::ALL {
            assert_eq!(c.as_str().parse::<ChartType>().unwrap(), c);
            assert_eq!(serde_json::to_value(c).unwrap(), json!(c.as_str()));
        }
        assert!("pie".parse::<ChartType>().is_err());
    }

    #[test]
    fn check_catches_bad_payloads() {
        let t = timeline(10_000, &[("A", 1)]);
        let mut spec = total_counts(&t);
        spec.matrix = Some(Matrix { row_labels: vec![], col_labels: vec![], cells: vec![] });
        assert!(spec.check().is_err());
        let mut spec = total_counts(&t);
        spec.series.as_mut().unwrap()[0].points[0].1 = f64::NAN;
        assert!(spec.check().is_err());
    }
}

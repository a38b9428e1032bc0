//! Chart requests: parameter overrides resolved against defaults, then
//! dispatched to the matching [`analytics`](crate::analytics) transform.
//!
//! The CLI and the HTTP service both go through [`episode_chart`] and
//! [`series_chart`], which is what keeps their output byte-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{CoalesceParams, Timeline};
use crate::analytics::{self, AnalyticsError, ChartSpec, ChartType, WindowParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("{0} needs series scope")]
    NeedsSeries(ChartType),
    #[error("{0} needs episode scope")]
    NeedsEpisode(ChartType),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Optional overrides, named as in the query string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartParams {
    pub bucket_ms: Option<u64>,
    pub window_ms: Option<u64>,
    pub segment_ms: Option<u64>,
    pub gap_ms: Option<u64>,
    pub tail_ms: Option<u64>,
    pub min_edge_weight: Option<u64>,
}

impl ChartParams {
    pub const KEYS: [&'static str; 6] = ["bucket_ms", "window_ms", "segment_ms", "gap_ms", "tail_ms", "min_edge_weight"];

    /// Parses `key=value` pairs. Unknown keys and non-integer values are
    /// errors; later duplicates win.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, ChartError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut p = Self::default();
        for (k, v) in pairs {
            let parsed = || {
                v.trim().parse::<u64>().map_err(|_| ChartError::BadParams(format!("{k}={v:?} is not a non-negative integer")))
            };
            match k {
                "bucket_ms" => p.bucket_ms = Some(parsed()?),
                "window_ms" => p.window_ms = Some(parsed()?),
                "segment_ms" => p.segment_ms = Some(parsed()?),
                "gap_ms" => p.gap_ms = Some(parsed()?),
                "tail_ms" => p.tail_ms = Some(parsed()?),
                "min_edge_weight" => p.min_edge_weight = Some(parsed()?),
                other => return Err(ChartError::BadParams(format!("unknown parameter {other:?}"))),
            }
        }
        Ok(p)
    }

    /// Query-string form of the set overrides, in [`Self::KEYS`] order.
    pub fn to_query(&self) -> String {
        let values = [self.bucket_ms, self.window_ms, self.segment_ms, self.gap_ms, self.tail_ms, self.min_edge_weight];
        Self::KEYS
            .iter()
            .zip(values)
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
            .collect::<Vec<_>>()
            .join("&")
    }

    pub fn resolve(&self, window: WindowParams, coalesce: CoalesceParams) -> Result<(WindowParams, CoalesceParams), ChartError> {
        let w = WindowParams {
            coappearance_window_ms: self.window_ms.unwrap_or(window.coappearance_window_ms),
            bucket_ms: self.bucket_ms.unwrap_or(window.bucket_ms),
            segment_ms: self.segment_ms.unwrap_or(window.segment_ms),
            min_edge_weight: self.min_edge_weight.unwrap_or(window.min_edge_weight),
        };
        w.check().map_err(|e| ChartError::BadParams(e.to_string()))?;
        let c = CoalesceParams { gap_ms: self.gap_ms.unwrap_or(coalesce.gap_ms), tail_ms: self.tail_ms.unwrap_or(coalesce.tail_ms) };
        Ok((w, c))
    }
}

/// Builds an episode-scoped chart. `coalesce` supplies defaults for the
/// gap and tail when the overrides leave them unset.
pub fn episode_chart(
    timeline: &Timeline,
    chart_type: ChartType,
    params: &ChartParams,
    coalesce: CoalesceParams,
) -> Result<ChartSpec, ChartError> {
    let (w, c) = params.resolve(WindowParams::default(), coalesce)?;
    let spec = match chart_type {
        ChartType::PerMinuteBars => analytics::per_minute_counts(timeline, w.bucket_ms)?.0,
        ChartType::TotalCounts => analytics::total_counts(timeline),
        ChartType::TotalDurations => analytics::total_durations(timeline, &c),
        ChartType::TrendLines => analytics::trend_lines(timeline, w.bucket_ms)?,
        ChartType::DistributionPie => analytics::distribution_pie(timeline)?,
        ChartType::CoappearanceMatrix => analytics::coappearance_matrix(timeline, w.coappearance_window_ms).0,
        ChartType::CoappearanceNetwork => {
            analytics::coappearance_network_for(timeline, w.coappearance_window_ms, w.min_edge_weight)?
        }
        ChartType::StackedArea => analytics::stacked_area(timeline, w.bucket_ms, &c)?,
        ChartType::SegmentHeatmap => analytics::segment_heatmap(timeline, w.segment_ms)?,
        ChartType::SeasonalComparison => return Err(ChartError::NeedsSeries(chart_type)),
    };
    Ok(spec)
}

/// Builds a series-scoped chart; only `seasonal_comparison` qualifies.
pub fn series_chart(
    timelines: &[&Timeline],
    chart_type: ChartType,
    params: &ChartParams,
    coalesce: CoalesceParams,
) -> Result<ChartSpec, ChartError> {
    if chart_type != ChartType::SeasonalComparison {
        return Err(ChartError::NeedsEpisode(chart_type));
    }
    let (_, c) = params.resolve(WindowParams::default(), coalesce)?;
    Ok(analytics::seasonal_comparison(timelines, &c)?)
}

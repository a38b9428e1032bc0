//! # screenline-core
//!
//! Turns per-frame face detections into identity-resolved episode timelines
//! and computes screen-time analytics over them.
//!
//! The flow through the crate mirrors the processing workflow:
//!
//! 1. [`synth`] produces deterministic ground-truth episodes (galleries,
//!    scene schedules, noisy detections) and [`detections`] reads and writes
//!    them in the binary `DETS` stream format.
//! 2. [`pipeline`] splits an episode into time chunks, runs one worker per
//!    chunk through the detect → encode positions → embed stages, and
//!    resolves every embedding against a [`index::KnownIdentityIndex`].
//! 3. [`aggregation`] merges worker outputs into a [`aggregation::Timeline`]
//!    and coalesces point detections into presence intervals.
//! 4. [`store`] persists timelines and answers appearance, co-occurrence and
//!    aggregate queries.
//! 5. [`analytics`] computes the ten chart families as [`analytics::ChartSpec`]
//!    values; [`charts`] dispatches a chart request to the right transform.
//!
//! [`workflow`] ties steps 2 to 4 together for an episode registered in a
//! store.

pub mod aggregation;
pub mod analytics;
pub mod charts;
pub mod detections;
pub mod index;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod workflow;

pub use aggregation::{CoalesceParams, Timeline};
pub use analytics::{ChartSpec, ChartType, WindowParams};
pub use index::{KnownIdentityIndex, Match, Metric};
pub use model::{AppearanceRecord, BBox, EpisodeMeta, Interval};

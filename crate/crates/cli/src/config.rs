//! Optional `key = value` defaults file. Keys are flag names with
//! underscores, e.g. `gap_ms = 1500` or `metric = "l2"`. Flags win.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use screenline_core::Metric;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub detect_batch: Option<usize>,
    pub embed_batch: Option<usize>,
    #[serde(default, deserialize_with = "metric")]
    pub metric: Option<Metric>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub gallery: Option<PathBuf>,
    pub gap_ms: Option<u64>,
    pub tail_ms: Option<u64>,
    pub window_ms: Option<u64>,
    pub segment_ms: Option<u64>,
    pub bucket_ms: Option<u64>,
    pub min_edge_weight: Option<u64>,
    pub addr: Option<SocketAddr>,
    pub static_dir: Option<PathBuf>,
    pub max_ingest_bytes: Option<usize>,
}

fn metric<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Metric>, D::Error> {
    Option::<String>::deserialize(d)?.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).context("reading")?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

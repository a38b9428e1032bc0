#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use screenline_core::{AppearanceRecord, BBox, EpisodeMeta, Timeline};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn meta(id: &str, series: &str, season: u32, number: u32, duration_ms: u64) -> EpisodeMeta {
    EpisodeMeta::new(id, series, season, number, duration_ms)
}

/// `n` records over `[0, duration_ms]` spread across `celebs` identities,
/// with timestamps on a 100 ms grid so windows see real collisions.
pub fn random_timeline(seed: u64, m: EpisodeMeta, n: usize, celebs: usize) -> Timeline {
    let mut r = rng(seed);
    let steps = m.duration_ms / 100;
    let records = (0..n)
        .map(|i| {
            let t = r.random_range(0..=steps) * 100;
            let c = format!("celeb_{:03}", r.random_range(0..celebs));
            let score = r.random_range(0.5f32..=1.0);
            AppearanceRecord::new(m.episode_id.clone(), c, t, i as u64, BBox::new(0.1, 0.1, 0.2, 0.2), score)
        })
        .collect();
    Timeline::new(m, records).unwrap()
}

//! Synthetic trace generation: a planted-genre world where every user
//! requests only items sharing its assigned genre. Useful for sanity runs
//! and for measuring the benefit of semantic features.

use crate::graph::RawRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct PlantedTraceConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub n_events: usize,
    /// Fraction of users held out of the first 60% of the stream, so the
    /// chronological split sees them as new nodes.
    pub late_user_fraction: f64,
    /// Fraction of items carrying a second genre.
    pub second_genre_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedTraceConfig {
    fn default() -> Self {
        PlantedTraceConfig {
            n_users: 200,
            n_items: 50,
            n_genres: 5,
            n_events: 5000,
            late_user_fraction: 0.2,
            second_genre_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Generates the planted trace: item `k` carries genre `k % n_genres`
/// (sometimes plus one more), user `j` is assigned genre `j % n_genres`
/// and requests only items carrying it. Late users first appear after the
/// 60% boundary. One event per second.
pub fn planted_trace(cfg: &PlantedTraceConfig) -> Vec<std::result::Result<RawRecord, String>> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x51b7);
    let genre_name = |g: usize| format!("g{g}");

    let item_genres: Vec<Vec<usize>> = (0..cfg.n_items)
        .map(|k| {
            let mut gs = vec![k % cfg.n_genres];
            if rng.random_bool(cfg.second_genre_fraction) {
                let extra = rng.random_range(0..cfg.n_genres);
                if !gs.contains(&extra) {
                    gs.push(extra);
                }
            }
            gs
        })
        .collect();
    let user_genre: Vec<usize> = (0..cfg.n_users).map(|j| j % cfg.n_genres).collect();
    let items_of_genre: Vec<Vec<usize>> = (0..cfg.n_genres)
        .map(|g| {
            (0..cfg.n_items).filter(|&k| item_genres[k].contains(&g)).collect()
        })
        .collect();

    let n_late = ((cfg.n_users as f64) * cfg.late_user_fraction) as usize;
    let n_early = cfg.n_users - n_late;
    let boundary = (cfg.n_events as f64 * 0.6) as usize;

    let mut records = Vec::with_capacity(cfg.n_events);
    for n in 0..cfg.n_events {
        let user = if n < boundary {
            rng.random_range(0..n_early)
        } else {
            rng.random_range(0..cfg.n_users)
        };
        let pool = &items_of_genre[user_genre[user]];
        let item = pool[rng.random_range(0..pool.len())];
        records.push(Ok(RawRecord {
            timestamp: (n + 1) as f64,
            user: format!("u{user}"),
            item: format!("i{item}"),
            duration: 300.0,
            genres: item_genres[item].iter().map(|&g| genre_name(g)).collect(),
        }));
    }
    records
}

/// Writes records in the trace file format.
pub fn write_trace_file(
    path: &std::path::Path,
    records: &[std::result::Result<RawRecord, String>],
) -> std::io::Result<()> {
    let mut out = String::new();
    for rec in records.iter().flatten() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.timestamp,
            rec.user,
            rec.item,
            rec.duration,
            rec.genres.join("|")
        ));
    }
    std::fs::write(path, out)
}

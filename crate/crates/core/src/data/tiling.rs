use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TILE: usize = 512;
pub const DEFAULT_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One square tile of a source image.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileIndex {
    pub source_id: String,
    /// Top-left corner in source pixels.
    pub row: usize,
    pub col: usize,
    pub tile_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl TileIndex {
    /// File stem for the tile, `<source>_r<row>_c<col>`.
    pub fn stem(&self) -> String {
        format!("{}_r{}_c{}", self.source_id, self.row, self.col)
    }
}

/// Non-overlapping `tile x tile` grid anchored at the origin; the right and
/// bottom remainders are dropped. A tile larger than the image yields no tiles.
pub fn patchify(source_id: &str, height: usize, width: usize, tile: usize) -> Result<Vec<TileIndex>> {
    if tile == 0 {
        return Err(Error::config("tile size must be at least 1"));
    }
    let mut out = Vec::with_capacity((height / tile) * (width / tile));
    for r in 0..height / tile {
        for c in 0..width / tile {
            out.push(TileIndex {
                source_id: source_id.to_string(),
                row: r * tile,
                col: c * tile,
                tile_size: tile,
                split: None,
            });
        }
    }
    Ok(out)
}

/// Tile count for `sources` images of identical size.
pub fn tile_count(sources: usize, height: usize, width: usize, tile: usize) -> Result<usize> {
    if tile == 0 {
        return Err(Error::config("tile size must be at least 1"));
    }
    Ok(sources * (height / tile) * (width / tile))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} is not in (0, 1)")));
    }
    Ok(())
}

/// Seeded shuffle of the (sorted, deduplicated) source ids; the first
/// `round(ratio * n)` go to training.
pub fn split_sources(source_ids: &[String], ratio: f64, seed: u64) -> Result<Vec<(String, Split)>> {
    check_ratio(ratio)?;
    let mut ids: Vec<String> = source_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.is_empty() {
        return Err(Error::config("nothing to split"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, if i < n_train { Split::Train } else { Split::Test }))
        .collect())
}

/// Tags every tile with its source's split.
pub fn split_tiles(tiles: &mut [TileIndex], ratio: f64, seed: u64) -> Result<()> {
    let ids: Vec<String> = tiles.iter().map(|t| t.source_id.clone()).collect();
    let assignment: std::collections::BTreeMap<String, Split> =
        split_sources(&ids, ratio, seed)?.into_iter().collect();
    for t in tiles {
        t.split = Some(assignment[&t.source_id]);
    }
    Ok(())
}

/// Keeps a seeded random subset of `limit` items, in their original order.
pub fn seeded_subset<T: Clone>(items: &[T], limit: usize, seed: u64) -> Vec<T> {
    if limit >= items.len() {
        return items.to_vec();
    }
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), items.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{crop_sample, load_pair, pair_directories, save_sample};
use super::tiling::{patchify, seeded_subset, split_sources, Split, TileIndex};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub source_id: String,
    /// File names relative to the input image and mask directories.
    pub image: String,
    pub mask: String,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

/// Record of one tiling run. Holds no absolute paths, so reruns with the same
/// inputs and seed serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tile_size: usize,
    pub ratio: f64,
    pub seed: u64,
    pub limit: Option<usize>,
    pub sources: Vec<SourceEntry>,
    pub tiles: Vec<TileIndex>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))
    }

    pub fn count(&self, split: Split) -> usize {
        self.tiles.iter().filter(|t| t.split == Some(split)).count()
    }
}

#[derive(Clone, Debug)]
pub struct TileRequest {
    pub tile: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Keep a seeded subset of this many source images.
    pub limit: Option<usize>,
}

/// Outcome of [`tile_directories`]: the manifest and one warning per source
/// too small to yield a tile.
pub struct TileOutcome {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Pairs sources by stem, splits them, cuts every source into tiles and
/// writes them to `out/{train,test}/{images,masks}/` with `out/manifest.json`.
pub fn tile_directories(images: &Path, masks: &Path, out: &Path, req: &TileRequest) -> Result<TileOutcome> {
    let mut pairs = pair_directories(images, masks)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("no images found in {}", images.display())));
    }
    if let Some(k) = req.limit {
        pairs = seeded_subset(&pairs, k, req.seed);
    }
    let ids: Vec<String> = pairs.iter().map(|p| p.stem.clone()).collect();
    let splits: std::collections::BTreeMap<String, Split> =
        split_sources(&ids, req.ratio, req.seed)?.into_iter().collect();

    let mut sources = Vec::new();
    let mut tiles = Vec::new();
    let mut warnings = Vec::new();
    for p in &pairs {
        let pair = load_pair(&p.image, &p.mask)?;
        let (w, h) = pair.image.dimensions();
        let split = splits[&p.stem];
        let mut these = patchify(&p.stem, h as usize, w as usize, req.tile)?;
        if these.is_empty() {
            warnings.push(format!(
                "{}: {w}x{h} is smaller than the {} tile, no tiles",
                p.image.display(),
                req.tile
            ));
        }
        let dir = out.join(split.as_str());
        for t in &mut these {
            t.split = Some(split);
            save_sample(&crop_sample(&pair, t)?, &dir, &t.stem())?;
        }
        tiles.extend(these);
        let name = |path: &Path| path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        sources.push(SourceEntry {
            source_id: p.stem.clone(),
            image: name(&p.image),
            mask: name(&p.mask),
            height: h as usize,
            width: w as usize,
            split,
        });
    }
    let manifest = Manifest {
        tile_size: req.tile,
        ratio: req.ratio,
        seed: req.seed,
        limit: req.limit,
        sources,
        tiles,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), manifest.to_json())?;
    Ok(TileOutcome { manifest, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn sources(dir: &Path, n: usize, size: u32) {
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::create_dir_all(dir.join("masks")).unwrap();
        for i in 0..n {
            RgbImage::from_fn(size, size, |x, y| Rgb([x as u8, y as u8, i as u8]))
                .save(dir.join(format!("images/src{i}.png")))
                .unwrap();
            GrayImage::from_fn(size, size, |x, _| Luma([if x % 3 == 0 { 255 } else { 0 }]))
                .save(dir.join(format!("masks/src{i}.png")))
                .unwrap();
        }
    }

    fn request(tile: usize) -> TileRequest {
        TileRequest {
            tile,
            ratio: 0.8,
            seed: 3,
            limit: None,
        }
    }

    #[test]
    fn tiles_splits_and_reruns_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        sources(dir.path(), 10, 32);
        let run = |name: &str| {
            let out = dir.path().join(name);
            tile_directories(&dir.path().join("images"), &dir.path().join("masks"), &out, &request(16)).unwrap();
            fs::read(out.join("manifest.json")).unwrap()
        };
        let first = run("a");
        assert_eq!(first, run("b"));
        let m = Manifest::from_json(std::str::from_utf8(&first).unwrap()).unwrap();
        assert_eq!(m.tiles.len(), 40);
        assert_eq!(m.count(Split::Train), 32);
        assert_eq!(m.count(Split::Test), 8);
        let train_images = fs::read_dir(dir.path().join("a/train/images")).unwrap().count();
        assert_eq!(train_images, 32);
    }

    #[test]
    fn limit_keeps_a_seeded_subset_of_sources() {
        let dir = tempfile::tempdir().unwrap();
        sources(dir.path(), 6, 16);
        let req = TileRequest {
            limit: Some(3),
            ..request(16)
        };
        let o = tile_directories(&dir.path().join("images"), &dir.path().join("masks"), &dir.path().join("o"), &req)
            .unwrap();
        assert_eq!(o.manifest.sources.len(), 3);
        assert_eq!(o.manifest.tiles.len(), 3);
    }

    #[test]
    fn undersized_sources_warn() {
        let dir = tempfile::tempdir().unwrap();
        sources(dir.path(), 2, 8);
        let o = tile_directories(&dir.path().join("images"), &dir.path().join("masks"), &dir.path().join("o"), &request(16))
            .unwrap();
        assert!(o.manifest.tiles.is_empty());
        assert_eq!(o.warnings.len(), 2);
    }
}

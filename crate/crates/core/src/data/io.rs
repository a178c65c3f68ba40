use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::tiling::TileIndex;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MASK_THRESHOLD: u8 = 128;
const EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// An RGB image in `[0, 1]` and its binary road mask, both at batch size 1.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub image: Tensor,
    pub mask: Tensor,
}

impl SamplePair {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (i, m) = (image.shape(), mask.shape());
        if i.n != 1 || i.c != 3 || m != Shape::new(1, 1, i.h, i.w) {
            return Err(Error::shape(format!("sample image {i} and mask {m} do not pair")));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("mask is not binary".into()));
        }
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image has non-finite values".into()));
        }
        Ok(SamplePair { image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// A decoded source image and its mask collapsed to one channel by taking the
/// per-pixel maximum over channels.
pub struct SourcePair {
    pub image: RgbImage,
    pub mask: GrayImage,
}

pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<SourcePair> {
    let image = image::open(image_path).map_err(|e| data_err(image_path, e))?.to_rgb8();
    let raw = image::open(mask_path).map_err(|e| data_err(mask_path, e))?;
    let mask = if raw.color().channel_count() == 1 {
        raw.to_luma8()
    } else {
        let rgba = raw.to_rgba8();
        GrayImage::from_fn(rgba.width(), rgba.height(), |x, y| {
            let p = rgba.get_pixel(x, y).0;
            Luma([p[0].max(p[1]).max(p[2])])
        })
    };
    if image.dimensions() != mask.dimensions() {
        return Err(Error::Data(format!(
            "image {} is {:?} but mask {} is {:?}",
            image_path.display(),
            image.dimensions(),
            mask_path.display(),
            mask.dimensions()
        )));
    }
    Ok(SourcePair { image, mask })
}

/// An RGB image scaled by 1/255, shape `(1, 3, h, w)`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let image = image::open(path).map_err(|e| data_err(path, e))?.to_rgb8();
    let (w, h) = image.dimensions();
    Ok(Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        f64::from(image.get_pixel(x as u32, y as u32).0[c]) / 255.0
    }))
}

/// Cuts `tile` out of a decoded pair: image scaled by 1/255, mask pixels at
/// or above 128 become 1.
pub fn crop_sample(pair: &SourcePair, tile: &TileIndex) -> Result<SamplePair> {
    let (w, h) = pair.image.dimensions();
    let t = tile.tile_size;
    if tile.row + t > h as usize || tile.col + t > w as usize {
        return Err(Error::Data(format!(
            "tile {} of size {t} lies outside a {w}x{h} source",
            tile.stem()
        )));
    }
    let shape = Shape::new(1, 3, t, t);
    let image = Tensor::from_fn(shape, |_, c, y, x| {
        f64::from(pair.image.get_pixel((tile.col + x) as u32, (tile.row + y) as u32).0[c]) / 255.0
    });
    let mask = Tensor::from_fn(Shape::new(1, 1, t, t), |_, _, y, x| {
        f64::from(pair.mask.get_pixel((tile.col + x) as u32, (tile.row + y) as u32).0[0] >= MASK_THRESHOLD)
    });
    SamplePair::new(image, mask)
}

pub fn load_sample(image_path: &Path, mask_path: &Path, tile: &TileIndex) -> Result<SamplePair> {
    crop_sample(&load_pair(image_path, mask_path)?, tile)
}

/// Loads a whole image/mask pair as one sample.
pub fn load_full(image_path: &Path, mask_path: &Path) -> Result<SamplePair> {
    let pair = load_pair(image_path, mask_path)?;
    let (w, h) = pair.image.dimensions();
    if w != h {
        return Err(Error::Data(format!("{} is not square ({w}x{h})", image_path.display())));
    }
    let tile = TileIndex {
        source_id: String::new(),
        row: 0,
        col: 0,
        tile_size: w as usize,
        split: None,
    };
    crop_sample(&pair, &tile)
}

pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("expected a (1, 3, h, w) image, got {s}")));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| quantize8(image.at(0, c, y as usize, x as usize))))
    }))
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn single_channel(t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(format!("expected a (1, 1, h, w) map, got {s}")));
    }
    Ok(())
}

/// 0/255 mask from probabilities at `threshold`.
pub fn mask_image(prob: &Tensor, threshold: f64) -> Result<GrayImage> {
    single_channel(prob)?;
    let s = prob.shape();
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([if prob.at(0, 0, y as usize, x as usize) >= threshold { 255 } else { 0 }])
    }))
}

/// Probabilities quantized to 16 bits.
pub fn probability_image(prob: &Tensor) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    single_channel(prob)?;
    let s = prob.shape();
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let v = prob.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    }))
}

pub fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| data_err(path, e))
}

/// Writes a sample as `images/<stem>.png` and `masks/<stem>.png` under `dir`.
pub fn save_sample(sample: &SamplePair, dir: &Path, stem: &str) -> Result<()> {
    let (idir, mdir) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&idir)?;
    fs::create_dir_all(&mdir)?;
    save_png(&to_rgb8(&sample.image)?, &idir.join(format!("{stem}.png")))?;
    save_png(&mask_image(&sample.mask, 0.5)?, &mdir.join(format!("{stem}.png")))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| data_err(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                    return Err(Error::Data(format!(
                        "{} and {} share a stem",
                        prev.display(),
                        path.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// An image path and its mask path, matched by file stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedFiles {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Pairs `images_dir` and `masks_dir` entries by stem, sorted by stem. Any
/// unpaired file is reported, one line per file.
pub fn pair_directories(images_dir: &Path, masks_dir: &Path) -> Result<Vec<PairedFiles>> {
    let images = stems(images_dir)?;
    let mut masks = stems(masks_dir)?;
    let mut problems = Vec::new();
    let mut out = Vec::new();
    for (stem, image) in images {
        match masks.remove(&stem) {
            Some(mask) => out.push(PairedFiles { stem, image, mask }),
            None => problems.push(format!("{}: no mask", image.display())),
        }
    }
    problems.extend(masks.values().map(|m| format!("{}: no image", m.display())));
    if !problems.is_empty() {
        return Err(Error::Data(format!("unpaired files:\n{}", problems.join("\n"))));
    }
    Ok(out)
}

/// Loads every pair under `dir/images` and `dir/masks` as whole samples.
pub fn load_directory(dir: &Path) -> Result<Vec<SamplePair>> {
    pair_directories(&dir.join("images"), &dir.join("masks"))?
        .iter()
        .map(|p| load_full(&p.image, &p.mask))
        .collect()
}

/// Stacks samples of one size into an `(n, 3, h, w)` batch and its masks.
pub fn stack(samples: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::config("empty batch"))?;
    let (h, w) = first.size();
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} samples",
                s.size().0,
                s.size().1
            )));
        }
        img.extend_from_slice(s.image.data());
        msk.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((
        Tensor::new(Shape::new(n, 3, h, w), img)?,
        Tensor::new(Shape::new(n, 1, h, w), msk)?,
    ))
}

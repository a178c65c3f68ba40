use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MIN_SYNTH_SIZE: usize = 16;

/// Shape of the generated scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub min_strips: usize,
    pub max_strips: usize,
    pub min_width: f64,
    pub max_width: f64,
    /// Share of strips bent into a quadratic curve.
    pub curved_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_strips: 1,
            max_strips: 4,
            min_width: 2.0,
            max_width: 6.0,
            curved_fraction: 0.5,
        }
    }
}

type Point = (f64, f64);

/// Road strip: a polyline from one image edge to the opposite one.
struct Strip {
    points: Vec<Point>,
    width: f64,
}

fn edge_point(rng: &mut ChaCha8Rng, edge: usize, size: f64) -> Point {
    let t = rng.gen_range(0.0..size);
    match edge {
        0 => (t, 0.0),
        1 => (size, t),
        2 => (t, size),
        _ => (0.0, t),
    }
}

fn random_strip(rng: &mut ChaCha8Rng, size: f64, cfg: &SynthConfig) -> Strip {
    let vertical = rng.gen_bool(0.5);
    let (a, b) = if vertical { (0, 2) } else { (3, 1) };
    let p0 = edge_point(rng, a, size);
    let p2 = edge_point(rng, b, size);
    let width = rng.gen_range(cfg.min_width..=cfg.max_width);
    let curved = rng.gen_bool(cfg.curved_fraction);
    let segments = 64;
    let points = if curved {
        let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
        let (dx, dy) = (p2.0 - p0.0, p2.1 - p0.1);
        let len = (dx * dx + dy * dy).sqrt().max(1e-9);
        let bend = rng.gen_range(-size / 3.0..size / 3.0);
        // a control point inside the image keeps the whole curve inside it
        let p1 = (
            (mid.0 - dy / len * bend).clamp(0.0, size),
            (mid.1 + dx / len * bend).clamp(0.0, size),
        );
        (0..=segments)
            .map(|i| {
                let t = i as f64 / segments as f64;
                let u = 1.0 - t;
                (
                    u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                    u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                )
            })
            .collect()
    } else {
        vec![p0, p2]
    };
    Strip { points, width }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Distance from each pixel centre to the strip's centre line, computed only
/// near the line; other pixels stay at infinity.
fn distance_field(strip: &Strip, size: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; size * size];
    let reach = strip.width / 2.0 + 1.0;
    for seg in strip.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let lo = |u: f64, v: f64| ((u.min(v) - reach).floor().max(0.0)) as usize;
        let hi = |u: f64, v: f64| ((u.max(v) + reach).ceil().max(0.0) as usize).min(size);
        for y in lo(a.1, b.1)..hi(a.1, b.1) {
            for x in lo(a.0, b.0)..hi(a.0, b.0) {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let v = segment_distance(p, a, b);
                let slot = &mut d[y * size + x];
                if v < *slot {
                    *slot = v;
                }
            }
        }
    }
    d
}

/// Smooth value noise in `[0, 1]`: random values on a coarse grid, bilinearly
/// interpolated.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (gy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (gx, tx) = (fx.floor() as usize, fx.fract());
            let v = |i: usize, j: usize| grid[i * g + j];
            let top = v(gy, gx) * (1.0 - tx) + v(gy, gx + 1) * tx;
            let bottom = v(gy + 1, gx) * (1.0 - tx) + v(gy + 1, gx + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// One scene. The stream for sample `index` is independent of how many other
/// samples are drawn.
pub fn synth_sample(size: usize, seed: u64, index: u64, cfg: &SynthConfig) -> Result<SamplePair> {
    Ok(render(size, seed, index, cfg)?.0)
}

/// The scene and the per-pixel strip coverage used to paint it.
fn render(size: usize, seed: u64, index: u64, cfg: &SynthConfig) -> Result<(SamplePair, Vec<f64>)> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::config(format!(
            "synthetic scenes need size >= {MIN_SYNTH_SIZE}, got {size}"
        )));
    }
    if cfg.min_strips == 0 || cfg.min_strips > cfg.max_strips || !(cfg.min_width > 0.0 && cfg.min_width <= cfg.max_width) {
        return Err(Error::config(format!("invalid synthetic scene settings {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let plane = size * size;

    let base = [rng.gen_range(0.2..0.4), rng.gen_range(0.3..0.5), rng.gen_range(0.15..0.3)];
    let coarse = value_noise(&mut rng, size, (size / 8).max(2));
    let fine = value_noise(&mut rng, size, 2);
    let road = rng.gen_range(0.6..0.8);

    let strips: Vec<Strip> = (0..rng.gen_range(cfg.min_strips..=cfg.max_strips))
        .map(|_| random_strip(&mut rng, size as f64, cfg))
        .collect();
    let mut coverage = vec![0.0f64; plane];
    let mut mask = vec![0.0f64; plane];
    for strip in &strips {
        let half = strip.width / 2.0;
        for (i, d) in distance_field(strip, size).into_iter().enumerate() {
            coverage[i] = coverage[i].max((half + 0.5 - d).clamp(0.0, 1.0));
            if d <= half {
                mask[i] = 1.0;
            }
        }
    }

    let mut image = vec![0.0; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let bg = base[c] + 0.2 * (coarse[i] - 0.5) + 0.08 * (fine[i] - 0.5);
            let grain = rng.gen_range(-0.02..0.02);
            let v = bg * (1.0 - coverage[i]) + (road + grain) * coverage[i];
            image[c * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    let pair = SamplePair::new(
        Tensor::new(Shape::new(1, 3, size, size), image)?,
        Tensor::new(Shape::new(1, 1, size, size), mask)?,
    )?;
    Ok((pair, coverage))
}

/// `n` scenes of `size x size` with 1 to 4 strips of width 2 to 6 pixels.
pub fn synth_roads(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    let cfg = SynthConfig::default();
    (0..n as u64).map(|i| synth_sample(size, seed, i, &cfg)).collect()
}

/// Share of mask pixels that are road.
pub fn positive_fraction(sample: &SamplePair) -> f64 {
    let m = sample.mask.data();
    m.iter().sum::<f64>() / m.len() as f64
}

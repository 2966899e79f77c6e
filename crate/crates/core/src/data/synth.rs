//! Synthetic dermoscopy-like samples with exact ground truth.
//!
//! Each lesion is a star-shaped polygon: an ellipse whose radius is
//! modulated by low-frequency cosine noise. The mask is that polygon
//! rasterised at pixel centres; the image is a shaded skin background with
//! a darker textured lesion (anti-aliased by 2x2 supersampling) and optional
//! dark hair strokes that do not appear in the mask.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestRecord, Split};
use super::{pnm, BinaryMask, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const POLYGON_VERTICES: usize = 256;
const MIN_AREA_FRACTION: f64 = 0.05;
const MAX_AREA_FRACTION: f64 = 0.60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub distractor_hair: bool,
    pub boundary_roughness: f64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        SyntheticGenConfig {
            count: 200,
            height: 48,
            width: 64,
            seed: 7,
            distractor_hair: true,
            boundary_roughness: 0.2,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "synthetic frame {}x{} is too small",
                self.height, self.width
            )));
        }
        if !(self.boundary_roughness >= 0.0 && self.boundary_roughness < 0.9) {
            return Err(Error::Config(format!(
                "boundary_roughness {} outside [0, 0.9)",
                self.boundary_roughness
            )));
        }
        Ok(())
    }
}

/// Even-odd point-in-polygon test; `(x, y)` in pixel units.
pub fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterises a closed polygon: pixel `(r, c)` is foreground when its centre
/// `(c + 0.5, r + 0.5)` lies inside. Vertices are `(x, y)` = (column, row).
pub fn rasterize_polygon(height: usize, width: usize, poly: &[(f64, f64)]) -> BinaryMask {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in poly {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    BinaryMask::from_fn(height, width, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        x >= x0 && x <= x1 && y >= y0 && y <= y1 && point_in_polygon(x, y, poly)
    })
}

/// Vertices of an axis-rotated ellipse, `n` points counter-clockwise in
/// parameter order.
pub fn ellipse_polygon(cx: f64, cy: f64, a: f64, b: f64, angle: f64, n: usize) -> Vec<(f64, f64)> {
    let (s, c) = angle.sin_cos();
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            let (px, py) = (a * t.cos(), b * t.sin());
            (cx + c * px - s * py, cy + s * px + c * py)
        })
        .collect()
}

/// Vertices of a star with `spikes` outer points alternating between radii
/// `outer` and `inner`, starting at `angle`.
pub fn star_polygon(cx: f64, cy: f64, outer: f64, inner: f64, spikes: usize, angle: f64) -> Vec<(f64, f64)> {
    (0..2 * spikes)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let t = angle + TAU * i as f64 / (2 * spikes) as f64;
            (cx + r * t.cos(), cy + r * t.sin())
        })
        .collect()
}

struct LesionShape {
    polygon: Vec<(f64, f64)>,
}

fn lesion_shape(cfg: &SyntheticGenConfig, rng: &mut ChaCha8Rng) -> LesionShape {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let rough = cfg.boundary_roughness;
    loop {
        let fraction = rng.random_range(0.10..0.42);
        let ratio = rng.random_range(0.55..1.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let mut a = (fraction * h * w / (std::f64::consts::PI * ratio)).sqrt();
        // cosine modulation: harmonics 2..=5 with amplitudes summing to `rough`
        let mut amps: Vec<f64> = (2..=5).map(|k| rng.random_range(-1.0..1.0) / k as f64).collect();
        let norm: f64 = amps.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
        amps.iter_mut().for_each(|v| *v *= rough / norm);
        let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..TAU)).collect();

        let unit: Vec<(f64, f64)> = (0..POLYGON_VERTICES)
            .map(|i| {
                let t = TAU * i as f64 / POLYGON_VERTICES as f64;
                let m: f64 = 1.0
                    + amps
                        .iter()
                        .zip(&phases)
                        .enumerate()
                        .map(|(k, (amp, ph))| amp * ((k + 2) as f64 * t + ph).cos())
                        .sum::<f64>();
                let (px, py) = (m * t.cos(), m * ratio * t.sin());
                let (s, c) = angle.sin_cos();
                (c * px - s * py, s * px + c * py)
            })
            .collect();
        let (mut ux0, mut ux1, mut uy0, mut uy1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in &unit {
            ux0 = ux0.min(x);
            ux1 = ux1.max(x);
            uy0 = uy0.min(y);
            uy1 = uy1.max(y);
        }
        // shrink until the lesion fits with a two-pixel margin
        let margin = 2.0;
        let max_a = ((w - 2.0 * margin) / (ux1 - ux0)).min((h - 2.0 * margin) / (uy1 - uy0));
        a = a.min(max_a);
        let cx = rng.random_range((margin - ux0 * a)..=(w - margin - ux1 * a).max(margin - ux0 * a));
        let cy = rng.random_range((margin - uy0 * a)..=(h - margin - uy1 * a).max(margin - uy0 * a));
        let polygon: Vec<(f64, f64)> = unit.iter().map(|&(x, y)| (cx + a * x, cy + a * y)).collect();
        let mask = rasterize_polygon(cfg.height, cfg.width, &polygon);
        let frac = mask.count() as f64 / (h * w);
        if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            return LesionShape { polygon };
        }
    }
}

fn hair_strokes(cfg: &SyntheticGenConfig, shape: &LesionShape, rng: &mut ChaCha8Rng) -> Vec<[(f64, f64); 3]> {
    let n: f64 = shape.polygon.len() as f64;
    let (mx, my) = shape
        .polygon
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x / n, sy + y / n));
    let diag = (cfg.height as f64).hypot(cfg.width as f64);
    (0..rng.random_range(1..=4))
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos() * diag * 0.6, theta.sin() * diag * 0.6);
            let ox = mx + rng.random_range(-0.25..0.25) * cfg.width as f64;
            let oy = my + rng.random_range(-0.25..0.25) * cfg.height as f64;
            let bend = rng.random_range(-0.15..0.15) * diag;
            [
                (ox - dx, oy - dy),
                (ox - dy / diag * bend, oy + dx / diag * bend),
                (ox + dx, oy + dy),
            ]
        })
        .collect()
}

fn generate_one(cfg: &SyntheticGenConfig, index: usize) -> Sample {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let shape = lesion_shape(cfg, &mut rng);
    let mask = rasterize_polygon(cfg.height, cfg.width, &shape.polygon);

    let jitter = |rng: &mut ChaCha8Rng, v: f64, d: f64| v + rng.random_range(-d..d);
    let skin = [
        jitter(&mut rng, 0.86, 0.05),
        jitter(&mut rng, 0.64, 0.05),
        jitter(&mut rng, 0.54, 0.05),
    ];
    let lesion = [
        jitter(&mut rng, 0.38, 0.08),
        jitter(&mut rng, 0.23, 0.06),
        jitter(&mut rng, 0.15, 0.05),
    ];
    let shade_dir = rng.random_range(0.0..TAU);
    let tex_freq = rng.random_range(0.3..0.7);
    let tex_phase = rng.random_range(0.0..TAU);
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let hairs = if cfg.distractor_hair {
        hair_strokes(cfg, &shape, &mut rng)
    } else {
        Vec::new()
    };

    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut image = RgbImage::from_fn(cfg.height, cfg.width, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let coverage = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
            .iter()
            .filter(|(ox, oy)| point_in_polygon(c as f64 + ox, r as f64 + oy, &shape.polygon))
            .count() as f64
            / 4.0;
        let shade = 0.06 * ((x / w - 0.5) * shade_dir.cos() + (y / h - 0.5) * shade_dir.sin());
        let texture = 0.06 * ((x * tex_freq + tex_phase).sin() * (y * tex_freq * 1.3).cos());
        std::array::from_fn(|k| {
            let bg = skin[k] + shade;
            let fg = lesion[k] + texture;
            (bg + (fg - bg) * coverage) as f32
        })
    });
    for stroke in &hairs {
        draw_hair(&mut image, stroke);
    }
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let px = image.get(r, c);
            let e = noise.sample(&mut rng) as f32;
            image.set(r, c, px.map(|v| v + e));
        }
    }
    Sample {
        id: format!("synth_{index:04}"),
        image,
        mask,
    }
}

fn draw_hair(image: &mut RgbImage, ctrl: &[(f64, f64); 3]) {
    let color = [0.10f32, 0.07, 0.05];
    let steps = 400;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let u = 1.0 - t;
        let x = u * u * ctrl[0].0 + 2.0 * u * t * ctrl[1].0 + t * t * ctrl[2].0;
        let y = u * u * ctrl[0].1 + 2.0 * u * t * ctrl[1].1 + t * t * ctrl[2].1;
        let (c, r) = (x.floor() as isize, y.floor() as isize);
        if r >= 0 && c >= 0 && (r as usize) < image.height() && (c as usize) < image.width() {
            image.set(r as usize, c as usize, color);
        }
    }
}

pub fn synth_generate(cfg: &SyntheticGenConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| generate_one(cfg, i)).collect())
}

/// Split assignment used for generated datasets: 80% train, 10% val,
/// 10% test, in generation order.
pub fn default_split(index: usize, count: usize) -> Split {
    let train = (count * 8).div_ceil(10);
    let val = (count - train) / 2;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes images (`images/*.ppm`), masks (`masks/*.pgm`) and
/// `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{}.ppm", s.id);
        let mask = format!("masks/{}.pgm", s.id);
        pnm::write_ppm(dir.join(&image), &s.image)?;
        pnm::write_pgm(dir.join(&mask), &s.mask)?;
        records.push(ManifestRecord {
            image,
            mask,
            split: default_split(i, samples.len()),
        });
    }
    let manifest = DatasetManifest::new(dir, records)?;
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

//! Random horizontal flips and rotations applied identically to an image
//! and its mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: bool,
    /// Angles are drawn uniformly from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            rotation_degrees: 40.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip: false,
            rotation_degrees: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDecision {
    pub flip: bool,
    pub angle_degrees: f64,
}

impl AugmentDecision {
    pub const IDENTITY: AugmentDecision = AugmentDecision {
        flip: false,
        angle_degrees: 0.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.hflip && rng.random_bool(0.5);
        let r = cfg.rotation_degrees.abs();
        let angle_degrees = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        AugmentDecision { flip, angle_degrees }
    }
}

pub fn augment(image: &RgbImage, mask: &BinaryMask, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, BinaryMask) {
    apply(image, mask, AugmentDecision::sample(cfg, rng))
}

/// Flip first, then rotate about the frame centre.
pub fn apply(image: &RgbImage, mask: &BinaryMask, d: AugmentDecision) -> (RgbImage, BinaryMask) {
    let (mut img, mut m) = if d.flip {
        (image.flip_horizontal(), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    };
    if d.angle_degrees != 0.0 {
        img = rotate_image(&img, d.angle_degrees);
        m = rotate_mask(&m, d.angle_degrees);
    }
    (img, m)
}

/// Maps an output pixel to its source location under a rotation by
/// `degrees` (counter-clockwise on screen) about the frame centre.
fn inverse_map(h: usize, w: usize, degrees: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    move |r, col| {
        let dx = col as f64 - cx;
        // screen y points down; flip to a y-up frame for the rotation
        let dy = cy - r as f64;
        let sx = c * dx + s * dy;
        let sy = -s * dx + c * dy;
        (cy - sy, cx + sx)
    }
}

/// Bilinear sampling; samples outside the frame read as black.
pub fn rotate_image(image: &RgbImage, degrees: f64) -> RgbImage {
    let (h, w) = image.dims();
    let map = inverse_map(h, w, degrees);
    let fetch = |r: isize, c: isize| -> [f32; 3] {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            [0.0; 3]
        } else {
            image.get(r as usize, c as usize)
        }
    };
    RgbImage::from_fn(h, w, |r, c| {
        let (sr, sc) = map(r, c);
        let (r0, c0) = (sr.floor(), sc.floor());
        let (fr, fc) = ((sr - r0) as f32, (sc - c0) as f32);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let (a, b) = (fetch(r0, c0), fetch(r0, c0 + 1));
        let (d, e) = (fetch(r0 + 1, c0), fetch(r0 + 1, c0 + 1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * fc;
            let bottom = d[k] + (e[k] - d[k]) * fc;
            top + (bottom - top) * fr
        })
    })
}

/// Nearest-neighbour sampling; samples outside the frame are background.
pub fn rotate_mask(mask: &BinaryMask, degrees: f64) -> BinaryMask {
    let (h, w) = mask.dims();
    let map = inverse_map(h, w, degrees);
    BinaryMask::from_fn(h, w, |r, c| {
        let (sr, sc) = map(r, c);
        mask.get_signed(sr.round() as isize, sc.round() as isize)
    })
}

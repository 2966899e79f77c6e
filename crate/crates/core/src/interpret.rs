//! Feature-map projections and mask-difference panels.
//!
//! A maximum intensity projection collapses one captured block output to a
//! single-channel heatmap. Diff panels show, for two masks of the same image,
//! which pixels the second one adds (blue) and removes (red).

use std::path::{Path, PathBuf};

use crate::data::pnm::{encode_ppm_rgb8, to_byte};
use crate::data::{images_to_batch, BinaryMask, RgbImage};
use crate::error::{Error, Result};
use crate::model::{Model, VariantFlags};
use crate::region::compare_masks;
use crate::tensor::{Real, Tensor};
use crate::training::predict_masks;

pub const ADDED_RGB: [u8; 3] = [0, 0, 255];
pub const REMOVED_RGB: [u8; 3] = [255, 0, 0];
pub const BACKGROUND_DIM: f32 = 0.6;
pub const SEPARATOR_PX: usize = 2;

/// Single-channel heatmap with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MipImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub label: String,
    /// Set when every projected value was equal; `values` are then all zero.
    pub constant: bool,
}

impl MipImage {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }
}

/// Per-pixel channel maximum of a `[C, H, W]` (or `[1, C, H, W]`) map,
/// min-max normalised.
pub fn mip<T: Real>(feature_map: &Tensor<T>, label: impl Into<String>) -> Result<MipImage> {
    let (c, h, w) = match feature_map.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        other => {
            return Err(Error::invalid_shape(
                "mip",
                format!("expected [C, H, W] or [1, C, H, W], got {other:?}"),
            ))
        }
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid_shape("mip", "feature map has an empty dimension"));
    }
    let data = feature_map.data();
    let plane = h * w;
    let mut values: Vec<f64> = data[..plane].iter().map(|v| v.as_f64()).collect();
    for ch in 1..c {
        for (m, v) in values.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
            *m = m.max(v.as_f64());
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = hi - lo <= 0.0 || !(hi - lo).is_finite();
    if constant {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    Ok(MipImage {
        height: h,
        width: w,
        values,
        label: label.into(),
        constant,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffPanel {
    pub added: BinaryMask,
    pub removed: BinaryMask,
    pub base_label: String,
    pub refined_label: String,
}

impl DiffPanel {
    /// `(base \ removed) | added`.
    pub fn apply(&self, base: &BinaryMask) -> Result<BinaryMask> {
        if base.dims() != self.added.dims() {
            return Err(Error::shape(
                "diff_apply",
                &[base.height(), base.width()],
                &[self.added.height(), self.added.width()],
            ));
        }
        let data = base
            .data()
            .iter()
            .zip(self.added.data().iter().zip(self.removed.data()))
            .map(|(&b, (&a, &r))| (b && !r) || a)
            .collect();
        BinaryMask::new(base.height(), base.width(), data)
    }
}

pub fn mask_diff(
    base: &BinaryMask,
    refined: &BinaryMask,
    base_label: impl Into<String>,
    refined_label: impl Into<String>,
) -> Result<DiffPanel> {
    if base.dims() != refined.dims() {
        return Err(Error::shape(
            "mask_diff",
            &[base.height(), base.width()],
            &[refined.height(), refined.width()],
        ));
    }
    let (h, w) = base.dims();
    let pick = |f: fn(bool, bool) -> bool| {
        let data = base.data().iter().zip(refined.data()).map(|(&b, &r)| f(b, r)).collect();
        BinaryMask::new(h, w, data)
    };
    Ok(DiffPanel {
        added: pick(|b, r| r && !b)?,
        removed: pick(|b, r| b && !r)?,
        base_label: base_label.into(),
        refined_label: refined_label.into(),
    })
}

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Raster {
            height,
            width,
            rgb: rgb.repeat(height * width),
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = 3 * (r * self.width + c);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = 3 * (r * self.width + c);
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn count(&self, rgb: [u8; 3]) -> usize {
        self.rgb.chunks_exact(3).filter(|p| *p == rgb).count()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        encode_ppm_rgb8(self.height, self.width, &self.rgb)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Overlay of a diff on its image: added pixels blue, removed pixels red,
/// everything else the image at 60% brightness. Dimmed pixels never
/// exceed 153 per channel, so they cannot be mistaken for the legend colours.
pub fn render_panel(image: &RgbImage, diff: &DiffPanel) -> Result<Raster> {
    if image.dims() != diff.added.dims() {
        return Err(Error::shape(
            "render_panel",
            &[image.height(), image.width()],
            &[diff.added.height(), diff.added.width()],
        ));
    }
    let (h, w) = image.dims();
    let mut out = Raster::filled(h, w, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let px = if diff.added.get(r, c) {
                ADDED_RGB
            } else if diff.removed.get(r, c) {
                REMOVED_RGB
            } else {
                image.get(r, c).map(|v| to_byte(v * BACKGROUND_DIM))
            };
            out.set(r, c, px);
        }
    }
    Ok(out)
}

/// Output size of a two-row grid of `depth` tiles of `h x w`.
pub fn mip_grid_dims(depth: usize, h: usize, w: usize) -> (usize, usize) {
    (2 * h + SEPARATOR_PX, depth * w + SEPARATOR_PX * depth.saturating_sub(1))
}

/// Two rows of tiles (encoder blocks on top, decoder blocks below) separated
/// by white 2-pixel bands. Tiles are scaled to the first tile's size by
/// nearest-neighbour sampling and drawn in grey levels.
pub fn render_mip_grid(mips: &[MipImage]) -> Result<Raster> {
    if mips.is_empty() || !mips.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "MIP grid needs an even, non-zero number of tiles, got {}",
            mips.len()
        )));
    }
    let depth = mips.len() / 2;
    let (th, tw) = (mips[0].height, mips[0].width);
    let (gh, gw) = mip_grid_dims(depth, th, tw);
    let mut out = Raster::filled(gh, gw, [255, 255, 255]);
    for (i, m) in mips.iter().enumerate() {
        let (row, col) = (i / depth, i % depth);
        let (r0, c0) = (row * (th + SEPARATOR_PX), col * (tw + SEPARATOR_PX));
        for r in 0..th {
            for c in 0..tw {
                let v = m.get(r * m.height / th, c * m.width / tw);
                let g = to_byte(v as f32);
                out.set(r0 + r, c0 + c, [g, g, g]);
            }
        }
    }
    Ok(out)
}

/// `"Convolutional block 2"` becomes `"Convolutional_block_2"`.
pub fn file_label(label: &str) -> String {
    label.replace(' ', "_")
}

pub fn mip_file_name(image_id: &str, block_label: &str) -> String {
    format!("{image_id}_{}.ppm", file_label(block_label))
}

pub fn diff_file_name(image_id: &str, from: &str, to: &str) -> String {
    format!("{image_id}_diff_{from}_{to}.ppm")
}

/// MIPs of every captured block output of `model` on one image, encoder
/// blocks first.
pub fn block_mips<T: Real>(model: &Model<T>, image: &RgbImage) -> Result<Vec<MipImage>> {
    let batch = images_to_batch::<T>(&[image])?;
    let captures = model
        .predict(&batch, true)?
        .captures
        .ok_or_else(|| Error::InvalidArgument("model returned no captures".into()))?;
    captures.blocks.iter().map(|(label, t)| mip(t, label.clone())).collect()
}

/// Writes one PPM per block MIP plus the combined grid; returns the paths.
pub fn write_block_mips<T: Real>(
    model: &Model<T>,
    image: &RgbImage,
    image_id: &str,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mips = block_mips(model, image)?;
    let mut written = Vec::with_capacity(mips.len() + 1);
    for m in &mips {
        let raster = render_mip_grid_tile(m);
        let path = dir.join(mip_file_name(image_id, &m.label));
        raster.write(&path)?;
        written.push(path);
    }
    let grid = dir.join(format!("{image_id}_mip_grid.ppm"));
    render_mip_grid(&mips)?.write(&grid)?;
    written.push(grid);
    Ok(written)
}

fn render_mip_grid_tile(m: &MipImage) -> Raster {
    let mut out = Raster::filled(m.height, m.width, [0, 0, 0]);
    for r in 0..m.height {
        for c in 0..m.width {
            let g = to_byte(m.get(r, c) as f32);
            out.set(r, c, [g, g, g]);
        }
    }
    out
}

/// Masks of successive variants on one image, the step diffs between
/// neighbours, and each mask's IoU against ground truth when given.
#[derive(Clone, Debug, PartialEq)]
pub struct Progression {
    pub labels: Vec<String>,
    pub masks: Vec<BinaryMask>,
    pub panels: Vec<DiffPanel>,
    pub ious: Vec<Option<f64>>,
}

/// Runs each variant in ladder order. `models[i]` must carry `VariantFlags::ALL[i]`;
/// a `None` entry is reported as a missing checkpoint.
pub fn variant_progression<T: Real>(
    models: &[Option<&Model<T>>],
    image: &RgbImage,
    truth: Option<&BinaryMask>,
) -> Result<Progression> {
    if models.len() != VariantFlags::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "progression needs {} variants, got {}",
            VariantFlags::ALL.len(),
            models.len()
        )));
    }
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut ious = Vec::new();
    for (slot, flags) in models.iter().zip(VariantFlags::ALL) {
        let model = slot.ok_or_else(|| Error::MissingVariant(flags.label().to_string()))?;
        if model.flags != flags {
            return Err(Error::InvalidArgument(format!(
                "slot {} holds a {} model",
                flags.label(),
                model.flags.label()
            )));
        }
        let mask = predict_masks(model, &[image])?.remove(0);
        ious.push(match truth {
            Some(t) => Some(compare_masks(t, &mask)?.iou),
            None => None,
        });
        labels.push(flags.label().to_string());
        masks.push(mask);
    }
    let panels = (1..masks.len())
        .map(|i| mask_diff(&masks[i - 1], &masks[i], labels[i - 1].clone(), labels[i].clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Progression {
        labels,
        masks,
        panels,
        ious,
    })
}

/// Writes the three step panels of a progression; returns the paths.
pub fn write_progression(
    progression: &Progression,
    image: &RgbImage,
    image_id: &str,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    progression
        .panels
        .iter()
        .map(|p| {
            let path = dir.join(diff_file_name(image_id, &p.base_label, &p.refined_label));
            render_panel(image, p)?.write(&path)?;
            Ok(path)
        })
        .collect()
}

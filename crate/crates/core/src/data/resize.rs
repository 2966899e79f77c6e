//! Resampling with the half-pixel-centre convention: output pixel `i` maps
//! to source coordinate `(i + 0.5) * in / out - 0.5`.

use super::{BinaryMask, RgbImage};

fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64)
}

fn taps(i: usize, input: usize, output: usize) -> (usize, usize, f32) {
    let s = source_coord(i, input, output);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(input - 1);
    (lo, hi, (s - lo as f64) as f32)
}

pub fn resize_bilinear(image: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    assert!(out_h > 0 && out_w > 0, "resize target must be positive");
    let (h, w) = image.dims();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    RgbImage::from_fn(out_h, out_w, |y, x| {
        let (y0, y1, fy) = taps(y, h, out_h);
        let (x0, x1, fx) = cols[x];
        let (a, b) = (image.get(y0, x0), image.get(y0, x1));
        let (c, d) = (image.get(y1, x0), image.get(y1, x1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            top + (bottom - top) * fy
        })
    })
}

pub fn resize_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    assert!(out_h > 0 && out_w > 0, "resize target must be positive");
    let (h, w) = mask.dims();
    let pick = |i: usize, input: usize, output: usize| {
        (((i as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    BinaryMask::from_fn(out_h, out_w, |y, x| mask.get(pick(y, h, out_h), pick(x, w, out_w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = RgbImage::from_fn(3, 4, |r, c| [r as f32 / 3.0, c as f32 / 4.0, 0.5]);
        assert_eq!(resize_bilinear(&img, 3, 4), img);
    }

    #[test]
    fn two_by_two_checker_averages_to_half() {
        let img = RgbImage::from_fn(2, 2, |r, c| {
            let v = if r == c { 0.0 } else { 1.0 };
            [v, v, v]
        });
        let out = resize_bilinear(&img, 1, 1);
        assert_eq!(out.get(0, 0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn constant_stays_constant() {
        let img = RgbImage::filled(5, 7, [0.2, 0.4, 0.6]);
        let out = resize_bilinear(&img, 11, 3);
        for r in 0..11 {
            for c in 0..3 {
                let px = out.get(r, c);
                assert!((px[0] - 0.2).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mask_resize_preserves_binarity_and_downsizes() {
        let m = BinaryMask::from_fn(500, 768, |r, c| (r as f64 - 250.0).hypot(c as f64 - 384.0) < 150.0);
        let small = resize_nearest(&m, 192, 256);
        assert_eq!(small.dims(), (192, 256));
        let frac_big = m.count() as f64 / (500.0 * 768.0);
        let frac_small = small.count() as f64 / (192.0 * 256.0);
        assert!((frac_big - frac_small).abs() < 0.01);
    }
}

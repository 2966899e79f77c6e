use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

/// Added to `|h|` before taking the logarithm so that zero moments stay finite.
pub const LOG_FLOOR: f64 = 1e-30;

/// Seven Hu invariants, raw and after the sign-preserving log transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuDescriptor {
    pub phi: [f64; 7],
    pub raw_phi: [f64; 7],
}

/// `-sign(h) * log10(|h| + 1e-30)`.
pub fn log_transform(h: f64) -> f64 {
    let l = (h.abs() + LOG_FLOOR).log10();
    if h < 0.0 {
        l
    } else {
        -l
    }
}

/// Raw and central moments up to third order, with `x = col`, `y = row`.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m00: f64,
    pub centroid: [f64; 2],
    /// `mu[p][q]` for `p + q <= 3`.
    pub mu: [[f64; 4]; 4],
}

impl Moments {
    pub fn of_mask(mask: &BinaryMask) -> Result<Self> {
        let (h, w) = mask.dims();
        let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if mask.get(r, c) {
                    m00 += 1.0;
                    m10 += c as f64;
                    m01 += r as f64;
                }
            }
        }
        if m00 == 0.0 {
            return Err(Error::NoForeground);
        }
        let (xb, yb) = (m10 / m00, m01 / m00);
        let mut mu = [[0.0; 4]; 4];
        for r in 0..h {
            for c in 0..w {
                if !mask.get(r, c) {
                    continue;
                }
                let (dx, dy) = (c as f64 - xb, r as f64 - yb);
                let xp = [1.0, dx, dx * dx, dx * dx * dx];
                let yp = [1.0, dy, dy * dy, dy * dy * dy];
                for p in 0..4 {
                    for q in 0..4 - p {
                        mu[p][q] += xp[p] * yp[q];
                    }
                }
            }
        }
        Ok(Moments {
            m00,
            centroid: [xb, yb],
            mu,
        })
    }

    /// `mu_pq / mu_00^((p + q + 2) / 2)`.
    pub fn eta(&self, p: usize, q: usize) -> f64 {
        self.mu[p][q] / self.m00.powf((p + q + 2) as f64 / 2.0)
    }
}

pub fn hu_from_moments(m: &Moments) -> [f64; 7] {
    let e = |p, q| m.eta(p, q);
    let (n20, n02, n11) = (e(2, 0), e(0, 2), e(1, 1));
    let (n30, n03, n21, n12) = (e(3, 0), e(0, 3), e(2, 1), e(1, 2));
    let s1 = n30 + n12;
    let s2 = n21 + n03;
    let d1 = n30 - 3.0 * n12;
    let d2 = 3.0 * n21 - n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        d1 * d1 + d2 * d2,
        s1 * s1 + s2 * s2,
        d1 * s1 * (s1 * s1 - 3.0 * s2 * s2) + d2 * s2 * (3.0 * s1 * s1 - s2 * s2),
        (n20 - n02) * (s1 * s1 - s2 * s2) + 4.0 * n11 * s1 * s2,
        d2 * s1 * (s1 * s1 - 3.0 * s2 * s2) - d1 * s2 * (3.0 * s1 * s1 - s2 * s2),
    ]
}

pub fn hu_moments(mask: &BinaryMask) -> Result<HuDescriptor> {
    let raw_phi = hu_from_moments(&Moments::of_mask(mask)?);
    Ok(HuDescriptor {
        phi: raw_phi.map(log_transform),
        raw_phi,
    })
}

/// Euclidean distance between log-transformed Hu vectors.
pub fn hu_distance(a: &HuDescriptor, b: &HuDescriptor) -> f64 {
    a.phi.iter().zip(&b.phi).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ContourChain;
use crate::error::{Error, Result};

/// Per-harmonic `(A, B, C, D)` rows of an elliptic Fourier expansion:
/// `x(t) = x0 + sum A cos(nt) + B sin(nt)`, `y(t) = y0 + sum C cos(nt) + D sin(nt)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfdDescriptor {
    pub coefficients: Vec<[f64; 4]>,
    pub normalized: bool,
    /// DC terms `(x0, y0)`; the contour centroid along its arc length.
    pub locus: [f64; 2],
}

impl EfdDescriptor {
    pub fn harmonics(&self) -> usize {
        self.coefficients.len()
    }

    /// Row-major `(N * 4)` vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.coefficients.iter().flatten().copied().collect()
    }

    /// `A^2 + B^2 + C^2 + D^2` per harmonic.
    pub fn energies(&self) -> Vec<f64> {
        self.coefficients.iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }
}

/// Closed polyline segments with nonzero length: `(start, delta, length)`.
fn segments(points: &[[f64; 2]]) -> Vec<([f64; 2], [f64; 2], f64)> {
    let n = points.len();
    (0..n)
        .filter_map(|i| {
            let (p, q) = (points[i], points[(i + 1) % n]);
            let d = [q[0] - p[0], q[1] - p[1]];
            let len = d[0].hypot(d[1]);
            (len > 0.0).then_some((p, d, len))
        })
        .collect()
}

/// Elliptic Fourier coefficients of a closed polygon given as `(x, y)` points.
pub fn efd_from_points(points: &[[f64; 2]], harmonics: usize) -> Result<EfdDescriptor> {
    if harmonics == 0 {
        return Err(Error::InvalidArgument("harmonics must be at least 1".into()));
    }
    let segs = segments(points);
    if points.len() < 4 || segs.len() < 3 {
        return Err(Error::DegenerateContour(format!("{} points is too few for a closed contour", points.len())));
    }
    let perimeter: f64 = segs.iter().map(|s| s.2).sum();
    let mut t = Vec::with_capacity(segs.len() + 1);
    t.push(0.0);
    for s in &segs {
        t.push(t.last().unwrap() + s.2);
    }
    let phase: Vec<f64> = t.iter().map(|v| 2.0 * PI * v / perimeter).collect();

    let mut coefficients = Vec::with_capacity(harmonics);
    for n in 1..=harmonics {
        let nf = n as f64;
        let scale = perimeter / (2.0 * nf * nf * PI * PI);
        let mut row = [0.0; 4];
        let (mut c_prev, mut s_prev) = ((nf * phase[0]).cos(), (nf * phase[0]).sin());
        for (k, (_, d, len)) in segs.iter().enumerate() {
            let (s_next, c_next) = (nf * phase[k + 1]).sin_cos();
            let (dc, ds) = (c_next - c_prev, s_next - s_prev);
            let (ux, uy) = (d[0] / len, d[1] / len);
            row[0] += ux * dc;
            row[1] += ux * ds;
            row[2] += uy * dc;
            row[3] += uy * ds;
            c_prev = c_next;
            s_prev = s_next;
        }
        coefficients.push(row.map(|v| v * scale));
    }

    // arc-length mean of the polygon
    let mut locus = [0.0; 2];
    for (p, d, len) in &segs {
        locus[0] += len * (p[0] + d[0] / 2.0);
        locus[1] += len * (p[1] + d[1] / 2.0);
    }
    Ok(EfdDescriptor {
        coefficients,
        normalized: false,
        locus: locus.map(|v| v / perimeter),
    })
}

/// Descriptor of a traced boundary with `x = col`, `y = row`.
pub fn efd_compute(chain: &ContourChain, harmonics: usize) -> Result<EfdDescriptor> {
    if chain.len() < 4 {
        return Err(Error::DegenerateContour(format!("chain of length {} (need at least 4)", chain.len())));
    }
    efd_from_points(&chain.xy(), harmonics)
}

/// Removes starting-point phase, orientation and size: rotates the
/// parameter by the first harmonic's phase, the plane by its major-axis
/// angle, and divides by its semi-major axis length.
pub fn efd_normalize(desc: &EfdDescriptor) -> Result<EfdDescriptor> {
    let [a1, b1, c1, d1] = desc.coefficients[0];
    if desc.energies()[0] <= f64::EPSILON * f64::EPSILON {
        return Err(Error::DegenerateContour("first harmonic is zero".into()));
    }
    let theta = 0.5 * (2.0 * (a1 * b1 + c1 * d1)).atan2(a1 * a1 - b1 * b1 + c1 * c1 - d1 * d1);
    let mut rows: Vec<[f64; 4]> = desc
        .coefficients
        .iter()
        .enumerate()
        .map(|(i, &[a, b, c, d])| {
            let (s, co) = ((i + 1) as f64 * theta).sin_cos();
            [a * co + b * s, -a * s + b * co, c * co + d * s, -c * s + d * co]
        })
        .collect();
    let psi = rows[0][2].atan2(rows[0][0]);
    let (s, co) = psi.sin_cos();
    for r in rows.iter_mut() {
        let [a, b, c, d] = *r;
        *r = [co * a + s * c, co * b + s * d, -s * a + co * c, -s * b + co * d];
    }
    let size = rows[0][0].abs();
    for r in rows.iter_mut() {
        *r = r.map(|v| v / size);
    }
    // exact zeros for the terms the construction annihilates
    rows[0][1] = 0.0;
    rows[0][2] = 0.0;
    rows[0][0] = 1.0;
    Ok(EfdDescriptor {
        coefficients: rows,
        normalized: true,
        locus: desc.locus,
    })
}

/// Evaluates the expansion with the first `n_use` harmonics at `num_points`
/// parameters uniformly spaced over `[0, 2*pi)`.
pub fn efd_reconstruct(desc: &EfdDescriptor, n_use: usize, num_points: usize) -> Result<Vec<[f64; 2]>> {
    if n_use > desc.harmonics() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_use} harmonics from a descriptor with {}",
            desc.harmonics()
        )));
    }
    Ok((0..num_points)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / num_points as f64;
            let mut p = desc.locus;
            for (i, [a, b, c, d]) in desc.coefficients[..n_use].iter().enumerate() {
                let (s, co) = ((i + 1) as f64 * t).sin_cos();
                p[0] += a * co + b * s;
                p[1] += c * co + d * s;
            }
            p
        })
        .collect())
}

/// Root-mean-square distance, over the normalised arc-length parameter,
/// between the polygon and its truncated expansion, for every truncation
/// `1..=N`. Computed from the polygon's exact second moment minus the
/// retained harmonic energy, so the sequence never increases.
pub fn efd_truncation_errors(points: &[[f64; 2]], desc: &EfdDescriptor) -> Result<Vec<f64>> {
    if desc.normalized {
        return Err(Error::InvalidArgument("truncation error needs the raw descriptor".into()));
    }
    let segs = segments(points);
    let perimeter: f64 = segs.iter().map(|s| s.2).sum();
    if perimeter == 0.0 {
        return Err(Error::DegenerateContour("zero perimeter".into()));
    }
    let m = desc.locus;
    let mut second = 0.0;
    for (p, d, len) in &segs {
        let q = [p[0] - m[0], p[1] - m[1]];
        let dot = q[0] * d[0] + q[1] * d[1];
        second += len * (q[0] * q[0] + q[1] * q[1] + dot + (d[0] * d[0] + d[1] * d[1]) / 3.0);
    }
    second /= perimeter;
    let mut kept = 0.0;
    Ok(desc
        .energies()
        .iter()
        .map(|e| {
            kept += 0.5 * e;
            (second - kept).max(0.0).sqrt()
        })
        .collect())
}

/// Mean over `samples` of the distance from each sample to the nearest point
/// of the closed polyline through `polygon`.
pub fn mean_distance_to_polyline(samples: &[[f64; 2]], polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    let dist = |p: [f64; 2]| {
        (0..n)
            .map(|i| {
                let (a, b) = (polygon[i], polygon[(i + 1) % n]);
                let d = [b[0] - a[0], b[1] - a[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let u = if len2 == 0.0 {
                    0.0
                } else {
                    (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
                };
                (p[0] - a[0] - u * d[0]).hypot(p[1] - a[1] - u * d[1])
            })
            .fold(f64::INFINITY, f64::min)
    };
    samples.iter().map(|&p| dist(p)).sum::<f64>() / samples.len() as f64
}

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

/// Row/column offsets of the eight Moore neighbours in clockwise screen
/// order, starting at west.
const RING: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

/// Closed 8-connected boundary, `(row, col)` pixel coordinates, clockwise on
/// screen. The last point connects back to the first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContourChain {
    pub points: Vec<(usize, usize)>,
    /// Set when the traced component is a single pixel.
    pub degenerate: bool,
}

impl ContourChain {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Freeman codes for every step including the closing one.
    /// 0 = east, 2 = north (row - 1), counting counter-clockwise.
    pub fn chain_codes(&self) -> Vec<u8> {
        if self.points.len() < 2 {
            return Vec::new();
        }
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (r0, c0) = self.points[i];
                let (r1, c1) = self.points[(i + 1) % n];
                freeman(r1 as isize - r0 as isize, c1 as isize - c0 as isize)
            })
            .collect()
    }

    /// Points as `(x, y) = (col, row)` reals.
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|&(r, c)| [c as f64, r as f64]).collect()
    }

    /// Shoelace sum over `(col, row)`; positive for clockwise-on-screen chains.
    pub fn signed_area(&self) -> f64 {
        let p = self.xy();
        let n = p.len();
        (0..n)
            .map(|i| {
                let (a, b) = (p[i], p[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            / 2.0
    }
}

fn freeman(dr: isize, dc: isize) -> u8 {
    match (dr, dc) {
        (0, 1) => 0,
        (-1, 1) => 1,
        (-1, 0) => 2,
        (-1, -1) => 3,
        (0, -1) => 4,
        (1, -1) => 5,
        (1, 0) => 6,
        (1, 1) => 7,
        _ => unreachable!("chain points are 8-neighbours"),
    }
}

/// Labels 8-connected foreground components and returns the largest one
/// (ties go to the component found first in raster order).
pub fn largest_component(mask: &BinaryMask) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    let mut label = vec![0u32; h * w];
    let mut best: Option<(usize, u32)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for (dr, dc) in RING {
                let (nr, nc) = (r + dr, c + dc);
                if mask.get_signed(nr, nc) {
                    let j = nr as usize * w + nc as usize;
                    if label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, next));
        }
    }
    let (_, keep) = best.ok_or(Error::NoForeground)?;
    BinaryMask::new(h, w, label.iter().map(|&l| l == keep).collect())
}

/// Moore-neighbour tracing of the largest component's outer boundary.
///
/// Starts at the topmost-then-leftmost pixel with the backtrack cell to its
/// west and stops when the first move (start to second pixel) is about to
/// repeat, which is Jacob's criterion expressed on directed steps.
pub fn trace_boundary(mask: &BinaryMask) -> Result<ContourChain> {
    let comp = largest_component(mask)?;
    let w = comp.width();
    let first = comp.data().iter().position(|&v| v).ok_or(Error::NoForeground)?;
    let start = ((first / w) as isize, (first % w) as isize);

    // returns (next pixel, ring index of the new backtrack relative to it)
    let step = |p: (isize, isize), back: (isize, isize)| -> Option<((isize, isize), (isize, isize))> {
        let k0 = RING.iter().position(|&d| (p.0 + d.0, p.1 + d.1) == back).expect("backtrack is a neighbour");
        let mut prev = back;
        for i in 1..=8 {
            let d = RING[(k0 + i) % 8];
            let q = (p.0 + d.0, p.1 + d.1);
            if comp.get_signed(q.0, q.1) {
                return Some((q, prev));
            }
            prev = q;
        }
        None
    };

    let Some((second, mut back)) = step(start, (start.0, start.1 - 1)) else {
        return Ok(ContourChain {
            points: vec![(start.0 as usize, start.1 as usize)],
            degenerate: true,
        });
    };
    let mut points = vec![start];
    let mut cur = second;
    let limit = 4 * comp.count() + 8;
    loop {
        let (next, nb) = step(cur, back).expect("a non-isolated pixel has a neighbour");
        if cur == start && next == second {
            break;
        }
        points.push(cur);
        cur = next;
        back = nb;
        if points.len() > limit {
            return Err(Error::DegenerateContour("boundary trace did not close".into()));
        }
    }
    Ok(ContourChain {
        points: points.into_iter().map(|(r, c)| (r as usize, c as usize)).collect(),
        degenerate: false,
    })
}

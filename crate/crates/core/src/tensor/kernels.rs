//! Raw slice kernels behind the tape operations.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image (`C x H x W`) into a `(C*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto an image.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let in_len = g.c * g.h * g.w;
    for n in 0..g.n {
        let img = &input[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        let colref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        T::gemm(g.o, rows, plane, weight, false, colref, false, dst, false);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

/// Gradients of a convolution; each output slot is only filled when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let in_len = g.c * g.h * g.w;
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcol = vec![T::zero(); rows * plane];

    if let Some(gb) = grad_bias {
        for n in 0..g.n {
            let go = &grad_out[n * g.o * plane..(n + 1) * g.o * plane];
            for (o, chunk) in go.chunks(plane).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }

    let mut grad_weight = grad_weight;
    let mut grad_input = grad_input;
    for n in 0..g.n {
        let go = &grad_out[n * g.o * plane..(n + 1) * g.o * plane];
        if let Some(gw) = grad_weight.as_deref_mut() {
            let img = &input[n * in_len..(n + 1) * in_len];
            let colref: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            // dW (o x rows) += dY (o x plane) * col^T (plane x rows)
            T::gemm(g.o, plane, rows, go, false, colref, true, gw, true);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcol (rows x plane) = W^T (rows x o) * dY (o x plane)
            T::gemm(rows, g.o, plane, weight, true, go, false, &mut dcol, false);
            let dst = &mut gi[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                dst.iter_mut().zip(&dcol).for_each(|(d, s)| *d += *s);
            } else {
                col2im(g, &dcol, dst);
            }
        }
    }
}

/// 2x2/stride-2 max pooling over `planes` planes of `h x w`.
/// Ties resolve to the smallest row-major position.
pub(crate) fn max_pool_2x2<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_pos = (2 * oy) * w + 2 * ox;
                let mut best = src[best_pos];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let pos = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[pos] > best {
                        best = src[pos];
                        best_pos = pos;
                    }
                }
                out.push(best);
                idx.push(best_pos);
            }
        }
    }
    (out, idx)
}

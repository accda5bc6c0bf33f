//! im2col based 2-D convolution kernels (zero padding, square kernels).

use crate::scalar::{gemm, MatRef, Real};

/// Geometry of one convolution over a single `(channels, height, width)` plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output spatial size, `None` when the kernel does not fit.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        let h = self.height + 2 * self.padding;
        let w = self.width + 2 * self.padding;
        if self.stride == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold `input` (`channels x height x width`) into a `(c*k*k) x (oh*ow)` matrix.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry, cols: &mut Vec<T>) {
    let (oh, ow) = g.output_size().expect("kernel larger than padded input");
    let k = g.kernel;
    let plane = oh * ow;
    cols.clear();
    cols.resize(g.col_rows() * plane, T::zero());
    for c in 0..g.channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back, accumulating into `out` (`channels x height x width`).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = g.output_size().expect("kernel larger than padded input");
    let k = g.kernel;
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let dst = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub geom: ConvGeometry,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Forward convolution. `weight` is `(out_c, in_c, k, k)`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, s: &ConvShapes) -> Vec<T> {
    let g = &s.geom;
    let in_len = g.channels * g.height * g.width;
    let plane = s.out_h * s.out_w;
    let mut out = vec![T::zero(); s.batch * s.out_channels * plane];
    let mut cols = Vec::new();
    let wm = MatRef::new(w, s.out_channels, g.col_rows());
    for n in 0..s.batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        let dst = &mut out[n * s.out_channels * plane..(n + 1) * s.out_channels * plane];
        gemm(wm, MatRef::new(&cols, g.col_rows(), plane), dst, false);
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    s: &ConvShapes,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let g = &s.geom;
    let in_len = g.channels * g.height * g.width;
    let plane = s.out_h * s.out_w;
    let rows = g.col_rows();
    let mut dw = vec![T::zero(); s.out_channels * rows];
    let mut db = vec![T::zero(); s.out_channels];
    let mut dx = need_dx.then(|| vec![T::zero(); s.batch * in_len]);
    let mut cols = Vec::new();
    let mut dcols = vec![T::zero(); rows * plane];
    let wm = MatRef::new(w, s.out_channels, rows);
    for n in 0..s.batch {
        let dy = &dout[n * s.out_channels * plane..(n + 1) * s.out_channels * plane];
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        gemm(
            MatRef::new(dy, s.out_channels, plane),
            MatRef::new(&cols, rows, plane).t(),
            &mut dw,
            true,
        );
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wm.t(), MatRef::new(dy, s.out_channels, plane), &mut dcols, false);
            col2im(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution. `weight` is `(in_c, out_c, k, k)`; `s.geom` describes
/// the *output* plane stack (the adjoint convolution's input).
pub(crate) fn conv_transpose_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    s: &ConvShapes,
    in_channels: usize,
) -> Vec<T> {
    let g = &s.geom;
    let in_plane = s.out_h * s.out_w;
    let out_len = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); s.batch * out_len];
    let mut cols = vec![T::zero(); rows * in_plane];
    let wm = MatRef::new(w, in_channels, rows);
    for n in 0..s.batch {
        let xin = &x[n * in_channels * in_plane..(n + 1) * in_channels * in_plane];
        gemm(wm.t(), MatRef::new(xin, in_channels, in_plane), &mut cols, false);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        col2im(&cols, g, dst);
        if let Some(b) = bias {
            let hw = g.height * g.width;
            for (o, &bv) in b.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    s: &ConvShapes,
    in_channels: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let g = &s.geom;
    let in_plane = s.out_h * s.out_w;
    let out_len = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut dw = vec![T::zero(); in_channels * rows];
    let mut db = vec![T::zero(); g.channels];
    let mut dx = need_dx.then(|| vec![T::zero(); s.batch * in_channels * in_plane]);
    let mut dcols = Vec::new();
    let wm = MatRef::new(w, in_channels, rows);
    let hw = g.height * g.width;
    for n in 0..s.batch {
        let dy = &dout[n * out_len..(n + 1) * out_len];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(dy, g, &mut dcols);
        let xin = &x[n * in_channels * in_plane..(n + 1) * in_channels * in_plane];
        gemm(
            MatRef::new(xin, in_channels, in_plane),
            MatRef::new(&dcols, rows, in_plane).t(),
            &mut dw,
            true,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                wm,
                MatRef::new(&dcols, rows, in_plane),
                &mut dx[n * in_channels * in_plane..(n + 1) * in_channels * in_plane],
                false,
            );
        }
    }
    (dx, dw, db)
}

//! Raw numeric kernels behind the tape operations.
//!
//! Convolution is cross-correlation (the kernel is not flipped) with zero
//! padding. Every routine walks its data in a fixed order, so results are
//! bit-reproducible.

use crate::tensor::{gemm, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one `[C,H,W]` image into a `[C*kh*kw, Ho*Wo]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Fold a column matrix back, adding into a `[C,H,W]` gradient buffer.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[N,F,Ho,Wo] = conv(x[N,C,H,W], k[F,C,kh,kw]) + bias`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    filters: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kdim, p) = (g.col_rows(), g.col_cols());
    let in_size = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * filters * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    let kmat = Mat::new(kernel, filters, kdim);
    for n in 0..batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let dst = &mut out[n * filters * p..(n + 1) * filters * p];
        if g.is_pointwise() {
            gemm(kmat, Mat::new(xn, kdim, p), dst, false);
        } else {
            im2col(xn, g, &mut cols);
            gemm(kmat, Mat::new(&cols, kdim, p), dst, false);
        }
        if let Some(b) = bias {
            for (f, plane) in dst.chunks_mut(p).enumerate() {
                for v in plane {
                    *v += b[f];
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    kernel: &[T],
    filters: usize,
    dout: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let (kdim, p) = (g.col_rows(), g.col_cols());
    let in_size = g.channels * g.height * g.width;
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut db = want_bias.then(|| vec![T::zero(); filters]);
    let mut cols = vec![T::zero(); kdim * p];
    let kmat = Mat::new(kernel, filters, kdim);
    for n in 0..batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let dn = &dout[n * filters * p..(n + 1) * filters * p];
        let dmat = Mat::new(dn, filters, p);
        if let Some(dk) = dk.as_mut() {
            if g.is_pointwise() {
                gemm(dmat, Mat::new(xn, kdim, p).t(), dk, true);
            } else {
                im2col(xn, g, &mut cols);
                gemm(dmat, Mat::new(&cols, kdim, p).t(), dk, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if g.is_pointwise() {
                gemm(kmat.t(), dmat, dxn, true);
            } else {
                gemm(kmat.t(), dmat, &mut cols, false);
                col2im_add(&cols, g, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (f, plane) in dn.chunks(p).enumerate() {
                db[f] += plane.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

pub fn avg_pool_out(size: usize, window: usize, stride: usize) -> usize {
    (size - window) / stride + 1
}

/// Average pooling over `planes` independent `[H,W]` planes, no padding.
pub fn avg_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Vec<T> {
    let (ho, wo) = (avg_pool_out(h, window, stride), avg_pool_out(w, window, stride));
    let scale = T::one() / T::from_f64((window * window) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..window {
                    let row = &src[(oy * stride + dy) * w + ox * stride..];
                    for v in &row[..window] {
                        acc += *v;
                    }
                }
                dst[oy * wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Vec<T> {
    let (ho, wo) = (avg_pool_out(h, window, stride), avg_pool_out(w, window, stride));
    let scale = T::one() / T::from_f64((window * window) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dout[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * scale;
                for dy in 0..window {
                    let row = &mut dst[(oy * stride + dy) * w + ox * stride..];
                    for v in &mut row[..window] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

//! Convolution kernels on raw NCHW buffers.
//!
//! Everything is expressed through `im2col`/`col2im` plus one GEMM. The
//! transposed convolution forward pass *is* [`conv2d_input_adjoint`], so the
//! two agree bit for bit.

use super::element::{gemm, MatRef};
use super::Element;
use crate::error::{Error, Result};

/// Stride and zero padding shared by both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }
}

/// Dimensions of a plain (non-transposed) cross-correlation.
///
/// For a transposed convolution the roles flip: its input is the `c_out`
/// side, its output the `c_in` side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

/// `floor((size + 2p - k) / s) + 1`.
pub fn conv_output_size(size: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    if kernel == 0 || geom.stride == 0 || size + 2 * geom.padding < kernel {
        return None;
    }
    Some((size + 2 * geom.padding - kernel) / geom.stride + 1)
}

/// `(size - 1) * s - 2p + k`.
pub fn conv_transpose_output_size(size: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    if kernel == 0 || geom.stride == 0 || size == 0 {
        return None;
    }
    ((size - 1) * geom.stride + kernel).checked_sub(2 * geom.padding)
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| {
        Error::InvalidArgument(format!("{op} expects a rank-4 tensor, got shape {shape:?}"))
    })
}

impl ConvDims {
    pub fn conv2d(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [n, c_in, h, wd] = rank4("conv2d input", x)?;
        let [c_out, wc_in, kh, kw] = rank4("conv2d weight", w)?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels)",
                left: x.to_vec(),
                right: w.to_vec(),
            });
        }
        let bad = || {
            Error::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw}, stride {}, padding {} invalid for input {x:?}",
                geom.stride, geom.padding
            ))
        };
        let oh = conv_output_size(h, kh, geom).ok_or_else(bad)?;
        let ow = conv_output_size(wd, kw, geom).ok_or_else(bad)?;
        Ok(ConvDims {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride: geom.stride,
            pad: geom.padding,
        })
    }

    /// Dimensions of the cross-correlation whose input adjoint is the
    /// transposed convolution of `x` (`[N, C_in, H, W]`) with `w`
    /// (`[C_in, C_out, k, k]`).
    pub fn conv_transpose2d(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [n, c_in, h, wd] = rank4("conv_transpose2d input", x)?;
        let [wc_in, c_out, kh, kw] = rank4("conv_transpose2d weight", w)?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d (input channels)",
                left: x.to_vec(),
                right: w.to_vec(),
            });
        }
        let bad = || {
            Error::InvalidArgument(format!(
                "conv_transpose2d: kernel {kh}x{kw}, stride {}, padding {} invalid for input {x:?}",
                geom.stride, geom.padding
            ))
        };
        let out_h = conv_transpose_output_size(h, kh, geom).ok_or_else(bad)?;
        let out_w = conv_transpose_output_size(wd, kw, geom).ok_or_else(bad)?;
        if out_h == 0 || out_w == 0 {
            return Err(bad());
        }
        let dims = ConvDims {
            n,
            c_in: c_out,
            h: out_h,
            w: out_w,
            c_out: c_in,
            kh,
            kw,
            oh: h,
            ow: wd,
            stride: geom.stride,
            pad: geom.padding,
        };
        debug_assert_eq!(conv_output_size(out_h, kh, geom), Some(h));
        Ok(dims)
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Output positions `o` in `0..out` with `0 <= o*s + tap - pad < size`.
    fn valid_range(out: usize, size: usize, tap: usize, s: usize, pad: usize) -> (usize, usize) {
        // smallest o with o*s + tap >= pad
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(s) };
        // largest o with o*s + tap - pad <= size - 1, exclusive bound returned
        let hi = if size + pad < tap + 1 {
            0
        } else {
            ((size + pad - tap - 1) / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

/// `[N, C, H, W]` -> `[C*kh*kw, N*oh*ow]`.
pub(crate) fn im2col<T: Element>(x: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.p();
    let ohw = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.k() * p];
    for c in 0..d.c_in {
        for ki in 0..d.kh {
            let (oy_lo, oy_hi) = ConvDims::valid_range(d.oh, d.h, ki, d.stride, d.pad);
            for kj in 0..d.kw {
                let (ox_lo, ox_hi) = ConvDims::valid_range(d.ow, d.w, kj, d.stride, d.pad);
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                for n in 0..d.n {
                    let plane = (n * d.c_in + c) * d.h * d.w;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ki - d.pad;
                        let src = plane + iy * d.w;
                        let dst = row + n * ohw + oy * d.ow;
                        for ox in ox_lo..ox_hi {
                            cols[dst + ox] = x[src + ox * d.stride + kj - d.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add `[C*kh*kw, N*oh*ow]` back to `[N, C, H, W]`.
pub(crate) fn col2im<T: Element>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let p = d.p();
    let ohw = d.oh * d.ow;
    let mut x = vec![T::zero(); d.n * d.c_in * d.h * d.w];
    for c in 0..d.c_in {
        for ki in 0..d.kh {
            let (oy_lo, oy_hi) = ConvDims::valid_range(d.oh, d.h, ki, d.stride, d.pad);
            for kj in 0..d.kw {
                let (ox_lo, ox_hi) = ConvDims::valid_range(d.ow, d.w, kj, d.stride, d.pad);
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                for n in 0..d.n {
                    let plane = (n * d.c_in + c) * d.h * d.w;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * d.stride + ki - d.pad;
                        let dst = plane + iy * d.w;
                        let src = row + n * ohw + oy * d.ow;
                        for ox in ox_lo..ox_hi {
                            let v = cols[src + ox];
                            let xi = dst + ox * d.stride + kj - d.pad;
                            x[xi] = x[xi] + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, S]` -> `[C, N*S]`.
pub(crate) fn to_channel_major<T: Element>(a: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = (i * c + ch) * s;
            let dst = ch * n * s + i * s;
            out[dst..dst + s].copy_from_slice(&a[src..src + s]);
        }
    }
    out
}

/// `[C, N*S]` -> `[N, C, S]`.
pub(crate) fn from_channel_major<T: Element>(a: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..n {
        for ch in 0..c {
            let dst = (i * c + ch) * s;
            let src = ch * n * s + i * s;
            out[dst..dst + s].copy_from_slice(&a[src..src + s]);
        }
    }
    out
}

fn add_channel_bias<T: Element>(y: &mut [T], bias: &[T], n: usize, c: usize, s: usize) {
    for i in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (i * c + ch) * s;
            y[base..base + s].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

/// Cross-correlation `y = w * x + b`, `x: [N,C_in,H,W]`, `w: [C_out,C_in,kh,kw]`.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let cols = im2col(x, d);
    let (k, p) = (d.k(), d.p());
    let mut y_cm = vec![T::zero(); d.c_out * p];
    gemm(MatRef::rows(w, d.c_out, k), MatRef::rows(&cols, k, p), T::zero(), &mut y_cm);
    let mut y = from_channel_major(&y_cm, d.n, d.c_out, d.oh * d.ow);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, d.n, d.c_out, d.oh * d.ow);
    }
    y
}

/// Gradient of a cross-correlation with respect to its input, given the
/// output adjoint `dy: [N,C_out,oh,ow]`. Also the transposed convolution.
pub(crate) fn conv2d_input_adjoint<T: Element>(dy: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let dy_cm = to_channel_major(dy, d.n, d.c_out, d.oh * d.ow);
    let mut dcols = vec![T::zero(); k * p];
    gemm(
        MatRef::rows(w, d.c_out, k).t(),
        MatRef::rows(&dy_cm, d.c_out, p),
        T::zero(),
        &mut dcols,
    );
    col2im(&dcols, d)
}

/// Gradient with respect to the weight, flattened `[C_out, C_in*kh*kw]`.
pub(crate) fn conv2d_weight_adjoint<T: Element>(x: &[T], dy: &[T], d: &ConvDims) -> Vec<T> {
    let (k, p) = (d.k(), d.p());
    let cols = im2col(x, d);
    let dy_cm = to_channel_major(dy, d.n, d.c_out, d.oh * d.ow);
    let mut dw = vec![T::zero(); d.c_out * k];
    gemm(
        MatRef::rows(&dy_cm, d.c_out, p),
        MatRef::rows(&cols, k, p).t(),
        T::zero(),
        &mut dw,
    );
    dw
}

/// Per-channel sum of `dy: [N, C, S]`.
pub(crate) fn channel_sum<T: Element>(dy: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (i * c + ch) * s;
            for &v in &dy[base..base + s] {
                *acc = *acc + v;
            }
        }
    }
    db
}

/// Transposed convolution `x: [N,C_in,H,W]`, `w: [C_in,C_out,kh,kw]`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let mut y = conv2d_input_adjoint(x, w, d);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, d.n, d.c_in, d.h * d.w);
    }
    y
}

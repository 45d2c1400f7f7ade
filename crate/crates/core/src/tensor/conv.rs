//! Column-buffer kernels for standard and modulated deformable convolution.
//!
//! Column layout for one sample: row `(c * kh + ky) * kw + kx`, column
//! `oy * wo + ox`. The GEMM against the `[out_c, in_c * kh * kw]` weight
//! matrix happens in the tape.

use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding that preserves spatial size for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        spec: ConvSpec,
    ) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(op, format!("input must be 4-d, got {input:?}"))),
        };
        let (out_c, wc, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape(op, format!("weight must be 4-d, got {weight:?}"))),
        };
        if wc != c {
            return Err(Error::shape(
                op,
                format!("input channels {c} do not match weight in_channels {wc}"),
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::shape(op, "stride and dilation must be >= 1"));
        }
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return Err(Error::shape(
                op,
                format!("kernel span {span_h}x{span_w} exceeds padded input {h}x{w}"),
            ));
        }
        let ho = (h + 2 * spec.padding - span_h) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - span_w) / spec.stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            out_c,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.taps()
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_hw(&self) -> usize {
        self.h * self.w
    }

    /// Unpadded input coordinate sampled by tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn tap_origin(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> (isize, isize) {
        let s = self.spec;
        (
            (oy * s.stride + ky * s.dilation) as isize - s.padding as isize,
            (ox * s.stride + kx * s.dilation) as isize - s.padding as isize,
        )
    }
}

pub(crate) fn im2col<T: Float>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.c {
        let plane = &input[c * g.in_hw()..(c + 1) * g.in_hw()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let (iy, ix) = g.tap_origin(ky, kx, oy, ox);
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add column gradients back to the input gradient.
pub(crate) fn col2im<T: Float>(g: &ConvGeom, dcols: &[T], dinput: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.c {
        let plane = &mut dinput[c * g.in_hw()..(c + 1) * g.in_hw()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let (iy, ix) = g.tap_origin(ky, kx, oy, ox);
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample of a `h x w` plane at continuous `(y, x)` (pixel-index
/// coordinates). Corners outside the plane read as zero and locations at
/// least one pixel outside sample zero, so integer locations reproduce
/// zero-padded convolution exactly.
pub fn bilinear_sample<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    bilinear_with_grad(plane, h, w, y, x).0
}

#[derive(Clone, Copy)]
struct Corners<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

#[inline]
fn corners<T: Float>(h: usize, w: usize, y: T, x: T) -> Option<Corners<T>> {
    let neg_one = -T::one();
    if !(y > neg_one && x > neg_one && y < T::of(h as f64) && x < T::of(w as f64)) {
        return None;
    }
    let yf = y.floor();
    let xf = x.floor();
    Some(Corners {
        y0: yf.to_isize().unwrap_or(0),
        x0: xf.to_isize().unwrap_or(0),
        ly: y - yf,
        lx: x - xf,
    })
}

#[inline]
fn read<T: Float>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Returns `(value, d value / dy, d value / dx)`.
#[inline]
fn bilinear_with_grad<T: Float>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let Some(k) = corners(h, w, y, x) else {
        return (T::zero(), T::zero(), T::zero());
    };
    let v00 = read(plane, h, w, k.y0, k.x0);
    let v01 = read(plane, h, w, k.y0, k.x0 + 1);
    let v10 = read(plane, h, w, k.y0 + 1, k.x0);
    let v11 = read(plane, h, w, k.y0 + 1, k.x0 + 1);
    let hy = T::one() - k.ly;
    let hx = T::one() - k.lx;
    let val = hy * hx * v00 + hy * k.lx * v01 + k.ly * hx * v10 + k.ly * k.lx * v11;
    let dy = hx * (v10 - v00) + k.lx * (v11 - v01);
    let dx = hy * (v01 - v00) + k.ly * (v11 - v10);
    (val, dy, dx)
}

#[inline]
fn bilinear_scatter<T: Float>(plane: &mut [T], h: usize, w: usize, y: T, x: T, g: T) {
    let Some(k) = corners(h, w, y, x) else {
        return;
    };
    let hy = T::one() - k.ly;
    let hx = T::one() - k.lx;
    let mut add = |yy: isize, xx: isize, wgt: T| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize] += g * wgt;
        }
    };
    add(k.y0, k.x0, hy * hx);
    add(k.y0, k.x0 + 1, hy * k.lx);
    add(k.y0 + 1, k.x0, k.ly * hx);
    add(k.y0 + 1, k.x0 + 1, k.ly * k.lx);
}

/// Sampling location of tap `k` at output position `p` for one sample.
/// Offset channels are interleaved `(dy, dx)` per tap.
#[inline]
fn deform_location<T: Float>(
    g: &ConvGeom,
    offsets: &[T],
    tap: usize,
    oy: usize,
    ox: usize,
) -> (T, T) {
    let hw = g.out_hw();
    let p = oy * g.wo + ox;
    let (iy, ix) = g.tap_origin(tap / g.kw, tap % g.kw, oy, ox);
    let dy = offsets[2 * tap * hw + p];
    let dx = offsets[(2 * tap + 1) * hw + p];
    (T::of(iy as f64) + dy, T::of(ix as f64) + dx)
}

pub(crate) fn deform_im2col<T: Float>(
    g: &ConvGeom,
    input: &[T],
    offsets: &[T],
    mask: &[T],
    cols: &mut [T],
) {
    let hw = g.out_hw();
    let taps = g.taps();
    for tap in 0..taps {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let p = oy * g.wo + ox;
                let (y, x) = deform_location(g, offsets, tap, oy, ox);
                let m = mask[tap * hw + p];
                for c in 0..g.c {
                    let plane = &input[c * g.in_hw()..(c + 1) * g.in_hw()];
                    cols[(c * taps + tap) * hw + p] = m * bilinear_sample(plane, g.h, g.w, y, x);
                }
            }
        }
    }
}

/// Backward of [`deform_im2col`]: accumulates into input, offset and mask
/// gradients of one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_col2im<T: Float>(
    g: &ConvGeom,
    input: &[T],
    offsets: &[T],
    mask: &[T],
    dcols: &[T],
    dinput: Option<&mut [T]>,
    doffsets: Option<&mut [T]>,
    dmask: Option<&mut [T]>,
) {
    let hw = g.out_hw();
    let taps = g.taps();
    let mut dinput = dinput;
    let mut doffsets = doffsets;
    let mut dmask = dmask;
    for tap in 0..taps {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let p = oy * g.wo + ox;
                let (y, x) = deform_location(g, offsets, tap, oy, ox);
                let m = mask[tap * hw + p];
                let mut gm = T::zero();
                let mut gy = T::zero();
                let mut gx = T::zero();
                for c in 0..g.c {
                    let gc = dcols[(c * taps + tap) * hw + p];
                    if gc == T::zero() {
                        continue;
                    }
                    let plane = &input[c * g.in_hw()..(c + 1) * g.in_hw()];
                    let (v, vy, vx) = bilinear_with_grad(plane, g.h, g.w, y, x);
                    gm += gc * v;
                    gy += gc * m * vy;
                    gx += gc * m * vx;
                    if let Some(di) = dinput.as_deref_mut() {
                        let dplane = &mut di[c * g.in_hw()..(c + 1) * g.in_hw()];
                        bilinear_scatter(dplane, g.h, g.w, y, x, gc * m);
                    }
                }
                if let Some(dm) = dmask.as_deref_mut() {
                    dm[tap * hw + p] += gm;
                }
                if let Some(doff) = doffsets.as_deref_mut() {
                    doff[2 * tap * hw + p] += gy;
                    doff[(2 * tap + 1) * hw + p] += gx;
                }
            }
        }
    }
}

//! Direct (loop-based) 2-D convolution kernels.
//!
//! Layouts are `x[B, C_in, H, W]`, `w[C_out, C_in/groups, kH, kW]`,
//! `y[B, C_out, H_out, W_out]`. Cross-correlation, no kernel flip.
//! The input-gradient kernel doubles as the transposed convolution.

use serde::{Deserialize, Serialize};

use super::{shape_err, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    /// Implicit zero padding on each side, `[pad_h, pad_w]`.
    pub padding: [usize; 2],
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: [1, 1],
            dilation: [1, 1],
            padding: [0, 0],
            groups: 1,
        }
    }
}

impl ConvGeom {
    /// Output extent along one spatial axis of a forward convolution.
    pub fn out_extent(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation[axis] * (kernel - 1) + 1;
        let padded = input + 2 * self.padding[axis];
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride[axis] + 1)
    }

    /// Output extent of the transposed convolution along one axis.
    pub fn transpose_extent(
        &self,
        axis: usize,
        input: usize,
        kernel: usize,
        output_padding: usize,
    ) -> Option<usize> {
        let full = (input - 1) * self.stride[axis] + self.dilation[axis] * (kernel - 1) + 1
            + output_padding;
        full.checked_sub(2 * self.padding[axis]).filter(|&e| e > 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    /// Validate a forward convolution from input shape `x` and weight shape `w`.
    pub fn forward(x: &[usize], w: &[usize], g: &ConvGeom, op: &'static str) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err(op, format!("expected 4-D input and weight, got {x:?} and {w:?}")));
        }
        let (batch, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
        check_groups(c_in, c_out, cin_g, g.groups, op)?;
        let ho = g.out_extent(0, h, kh);
        let wo = g.out_extent(1, wd, kw);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self {
                batch,
                c_in,
                h,
                w: wd,
                c_out,
                kh,
                kw,
                ho,
                wo,
            }),
            _ => Err(shape_err(op, format!("kernel {kh}x{kw} does not fit input {h}x{wd}"))),
        }
    }

    pub fn x_len(&self) -> usize {
        self.batch * self.c_in * self.h * self.w
    }

    pub fn y_len(&self) -> usize {
        self.batch * self.c_out * self.ho * self.wo
    }
}

fn check_groups(c_in: usize, c_out: usize, cin_g: usize, groups: usize, op: &'static str) -> Result<()> {
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(shape_err(
            op,
            format!("channels in={c_in} out={c_out} not divisible by groups={groups}"),
        ));
    }
    if c_in / groups != cin_g {
        return Err(shape_err(
            op,
            format!("weight expects {cin_g} input channels per group, input gives {}", c_in / groups),
        ));
    }
    Ok(())
}

/// Valid output positions `o` along one axis for tap offset `tap`
/// (`i = o*stride + tap - pad` must land in `0..len`).
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + tap >= pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // largest o with o*stride + tap - pad < in_len
    let limit = in_len + pad;
    let hi = if limit <= tap { 0 } else { (limit - tap - 1) / stride + 1 };
    (lo.min(out_len), hi.min(out_len))
}

pub(crate) fn forward<T: Real>(x: &[T], w: &[T], y: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let [sh, sw] = g.stride;
    let [dh, dw] = g.dilation;
    let [ph, pw] = g.padding;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let yo = (b * d.c_out + oc) * d.ho * d.wo;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xo = (b * d.c_in + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_range(d.ho, d.h, sh, ky * dh, ph);
                    for kx in 0..d.kw {
                        let wv = w[((oc * cin_g + icl) * d.kh + ky) * d.kw + kx];
                        let (ox0, ox1) = valid_range(d.wo, d.w, sw, kx * dw, pw);
                        for oy in oy0..oy1 {
                            let iy = oy * sh + ky * dh - ph;
                            let xrow = xo + iy * d.w;
                            let yrow = yo + oy * d.wo;
                            for ox in ox0..ox1 {
                                let ix = ox * sw + kx * dw - pw;
                                y[yrow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `gx += Aᵀ gy` where `A` is the forward convolution with `w`.
pub(crate) fn backward_input<T: Real>(gy: &[T], w: &[T], gx: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let [sh, sw] = g.stride;
    let [dh, dw] = g.dilation;
    let [ph, pw] = g.padding;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let yo = (b * d.c_out + oc) * d.ho * d.wo;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xo = (b * d.c_in + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_range(d.ho, d.h, sh, ky * dh, ph);
                    for kx in 0..d.kw {
                        let wv = w[((oc * cin_g + icl) * d.kh + ky) * d.kw + kx];
                        let (ox0, ox1) = valid_range(d.wo, d.w, sw, kx * dw, pw);
                        for oy in oy0..oy1 {
                            let iy = oy * sh + ky * dh - ph;
                            let xrow = xo + iy * d.w;
                            let yrow = yo + oy * d.wo;
                            for ox in ox0..ox1 {
                                let ix = ox * sw + kx * dw - pw;
                                gx[xrow + ix] += wv * gy[yrow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the weight gradient of the forward convolution.
pub(crate) fn backward_weight<T: Real>(x: &[T], gy: &[T], gw: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let [sh, sw] = g.stride;
    let [dh, dw] = g.dilation;
    let [ph, pw] = g.padding;
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let yo = (b * d.c_out + oc) * d.ho * d.wo;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xo = (b * d.c_in + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_range(d.ho, d.h, sh, ky * dh, ph);
                    for kx in 0..d.kw {
                        let (ox0, ox1) = valid_range(d.wo, d.w, sw, kx * dw, pw);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * sh + ky * dh - ph;
                            let xrow = xo + iy * d.w;
                            let yrow = yo + oy * d.wo;
                            for ox in ox0..ox1 {
                                let ix = ox * sw + kx * dw - pw;
                                acc += gy[yrow + ox] * x[xrow + ix];
                            }
                        }
                        gw[((oc * cin_g + icl) * d.kh + ky) * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Mirror index for reflection padding. Handles pads wider than the
/// extent by reflecting repeatedly.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

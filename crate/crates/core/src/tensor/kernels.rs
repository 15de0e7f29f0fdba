//! Untaped forward and backward kernels. All spatial tensors are `[C, H, W]`
//! row-major; convolution is cross-correlation (no kernel flip).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

/// Output length along one spatial axis, or `None` when the dilated kernel
/// does not fit into the padded input.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    (stride > 0 && padded >= span).then(|| (padded - span) / stride + 1)
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    spec: Conv2dSpec,
) -> Result<ConvDims> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d stride and dilation must be positive, got stride={} dilation={}",
            spec.stride, spec.dilation
        )));
    }
    let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernel) else {
        return Err(Error::shape("conv2d", input, kernel));
    };
    if kc != c_in {
        return Err(Error::shape("conv2d", input, kernel));
    }
    if bias != [c_out] {
        return Err(Error::shape("conv2d bias", kernel, bias));
    }
    let ho = conv_output_len(h, kh, spec.stride, spec.padding, spec.dilation);
    let wo = conv_output_len(w, kw, spec.stride, spec.padding, spec.dilation);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(
            "conv2d (kernel exceeds padded input)",
            input,
            kernel,
        ));
    };
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Range of output columns `ox` for which `ox*stride + offset` lands inside `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let hi = if offset >= len as isize {
        0
    } else {
        (((len as isize - 1 - offset) / s) + 1).min(out_len as isize)
    };
    let lo = lo as usize;
    let hi = hi.max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    bias: &[S],
    d: &ConvDims,
    spec: Conv2dSpec,
) -> Vec<S> {
    let plane = d.ho * d.wo;
    let mut out = vec![S::zero(); d.c_out * plane];
    for co in 0..d.c_out {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(bias[co]);
        for ci in 0..d.c_in {
            let in_c = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ki in 0..d.kh {
                let row_off = (ki * spec.dilation) as isize - spec.padding as isize;
                let (oy_lo, oy_hi) = valid_range(row_off, spec.stride, d.h, d.ho);
                for kj in 0..d.kw {
                    let wgt = kernel[((co * d.c_in + ci) * d.kh + ki) * d.kw + kj];
                    let col_off = (kj * spec.dilation) as isize - spec.padding as isize;
                    let (ox_lo, ox_hi) = valid_range(col_off, spec.stride, d.w, d.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * spec.stride) as isize + row_off;
                        let in_row = &in_c[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let out_row = &mut out_c[oy * d.wo..(oy + 1) * d.wo];
                        if spec.stride == 1 {
                            let ix0 = (ox_lo as isize + col_off) as usize;
                            let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (o, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wgt * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * spec.stride) as isize + col_off;
                                out_row[ox] += wgt * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients. Any of the outputs may be
/// skipped by passing `None`.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    grad_out: &[S],
    d: &ConvDims,
    spec: Conv2dSpec,
    mut grad_input: Option<&mut [S]>,
    mut grad_kernel: Option<&mut [S]>,
    grad_bias: Option<&mut [S]>,
) {
    let plane = d.ho * d.wo;
    if let Some(gb) = grad_bias {
        for co in 0..d.c_out {
            gb[co] += grad_out[co * plane..(co + 1) * plane]
                .iter()
                .copied()
                .sum::<S>();
        }
    }
    if grad_input.is_none() && grad_kernel.is_none() {
        return;
    }
    for co in 0..d.c_out {
        let g_c = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let in_base = ci * d.h * d.w;
            for ki in 0..d.kh {
                let row_off = (ki * spec.dilation) as isize - spec.padding as isize;
                let (oy_lo, oy_hi) = valid_range(row_off, spec.stride, d.h, d.ho);
                for kj in 0..d.kw {
                    let widx = ((co * d.c_in + ci) * d.kh + ki) * d.kw + kj;
                    let wgt = kernel[widx];
                    let col_off = (kj * spec.dilation) as isize - spec.padding as isize;
                    let (ox_lo, ox_hi) = valid_range(col_off, spec.stride, d.w, d.wo);
                    let mut gw = S::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * spec.stride) as isize + row_off) as usize;
                        let g_row = &g_c[oy * d.wo..(oy + 1) * d.wo];
                        let row_base = in_base + iy * d.w;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * spec.stride) as isize + col_off) as usize;
                            let g = g_row[ox];
                            gw += g * input[row_base + ix];
                            if let Some(gi) = grad_input.as_deref_mut() {
                                gi[row_base + ix] += wgt * g;
                            }
                        }
                    }
                    if let Some(gk) = grad_kernel.as_deref_mut() {
                        gk[widx] += gw;
                    }
                }
            }
        }
    }
}

/// Max pooling without padding. Returns the pooled values and, per output
/// element, the flat input index of the first maximal element (row-major).
pub(crate) fn maxpool2d_forward<S: Scalar>(
    input: &[S],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Result<(Vec<S>, Vec<usize>, usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d window and stride must be positive, got window={window} stride={stride}"
        )));
    }
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d window {window} larger than input {h}x{w}"
        )));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((out, argmax, ho, wo))
}

/// Source flat indices for a nearest-neighbour resize of `[C, H, W]` to `[C, H2, W2]`.
pub(crate) fn nearest_indices(
    (c, h, w): (usize, usize, usize),
    (h2, w2): (usize, usize),
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        for y in 0..h2 {
            let sy = y * h / h2;
            for x in 0..w2 {
                let sx = x * w / w2;
                idx.push((ch * h + sy) * w + sx);
            }
        }
    }
    idx
}

/// Per-location dot products and feature norms for `[D, H, W]` features against `[D]`.
pub(crate) fn dot_and_norms<S: Scalar>(
    features: &[S],
    proto: &[S],
    plane: usize,
) -> (Vec<S>, Vec<S>) {
    let mut dot = vec![S::zero(); plane];
    let mut sq = vec![S::zero(); plane];
    for (d, &p) in proto.iter().enumerate() {
        let f = &features[d * plane..(d + 1) * plane];
        for i in 0..plane {
            dot[i] += f[i] * p;
            sq[i] += f[i] * f[i];
        }
    }
    (dot, sq.into_iter().map(|s| s.sqrt()).collect())
}

pub(crate) fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Softmax along `axis`, max-subtracted for stability.
pub(crate) fn softmax_forward<S: Scalar>(input: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::zero(); input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut max = input[at(0)];
            for k in 1..len {
                max = max.max(input[at(k)]);
            }
            let mut total = S::zero();
            for k in 0..len {
                let e = (input[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

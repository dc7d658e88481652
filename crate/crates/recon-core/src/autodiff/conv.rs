//! Convolution kernels (cross-correlation, zero "same" padding).
//!
//! All loops are arranged so each output cell is produced by exactly one
//! task with a fixed reduction order; results are bit-identical whatever
//! the rayon thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Output extent for stride-`s` "same" convolution.
#[inline]
pub fn conv_out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

#[inline]
fn axis_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    // Valid output indices o where 0 <= o * stride + offset < in_len.
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_excl = if in_len as isize > offset {
        (((in_len as isize - 1 - offset) as usize) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// 3D convolution forward. `x` is `[Ci][X][Y][Z]`, `w` is `[Co][Ci][k][k][k]`,
/// output `[Co][OX][OY][OZ]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    ci_n: usize,
    co_n: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    let [xd, yd, zd] = dims;
    let (ox, oy, oz) = (
        conv_out_len(xd, stride),
        conv_out_len(yd, stride),
        conv_out_len(zd, stride),
    );
    let in_spatial = xd * yd * zd;
    let out_spatial = ox * oy * oz;
    let pad = (k - 1) / 2;
    let k3 = k * k * k;
    debug_assert_eq!(out.len(), co_n * out_spatial);
    out.par_chunks_mut(out_spatial).enumerate().for_each(|(co, plane)| {
        plane.fill(b.map_or(T::zero(), |b| b[co]));
        for ci in 0..ci_n {
            let xp = &x[ci * in_spatial..(ci + 1) * in_spatial];
            let wbase = (co * ci_n + ci) * k3;
            for dx in 0..k {
                let off_x = dx as isize - pad as isize;
                let (x_lo, x_hi) = axis_range(ox, xd, stride, off_x);
                for dy in 0..k {
                    let off_y = dy as isize - pad as isize;
                    let (y_lo, y_hi) = axis_range(oy, yd, stride, off_y);
                    for dz in 0..k {
                        let off_z = dz as isize - pad as isize;
                        let (z_lo, z_hi) = axis_range(oz, zd, stride, off_z);
                        let wv = w[wbase + (dx * k + dy) * k + dz];
                        for xo in x_lo..x_hi {
                            let xi = (xo * stride) as isize + off_x;
                            for yo in y_lo..y_hi {
                                let yi = (yo * stride) as isize + off_y;
                                let in_row = (xi as usize * yd + yi as usize) * zd;
                                let out_row = (xo * oy + yo) * oz;
                                for zo in z_lo..z_hi {
                                    let zi = ((zo * stride) as isize + off_z) as usize;
                                    plane[out_row + zo] += wv * xp[in_row + zi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of 3D convolution: input gradient (scatter of the upstream
/// gradient through the kernel), weight gradient, and bias gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    ci_n: usize,
    co_n: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    dx_out: &mut [T],
    dw_out: &mut [T],
    db_out: Option<&mut [T]>,
) {
    let [xd, yd, zd] = dims;
    let (ox, oy, oz) = (
        conv_out_len(xd, stride),
        conv_out_len(yd, stride),
        conv_out_len(zd, stride),
    );
    let in_spatial = xd * yd * zd;
    let out_spatial = ox * oy * oz;
    let pad = (k - 1) / 2;
    let k3 = k * k * k;

    // d/dx: each input channel plane is written by exactly one task.
    dx_out.par_chunks_mut(in_spatial).enumerate().for_each(|(ci, dxp)| {
        for co in 0..co_n {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            let wbase = (co * ci_n + ci) * k3;
            for dx in 0..k {
                let off_x = dx as isize - pad as isize;
                let (x_lo, x_hi) = axis_range(ox, xd, stride, off_x);
                for dy in 0..k {
                    let off_y = dy as isize - pad as isize;
                    let (y_lo, y_hi) = axis_range(oy, yd, stride, off_y);
                    for dz in 0..k {
                        let off_z = dz as isize - pad as isize;
                        let (z_lo, z_hi) = axis_range(oz, zd, stride, off_z);
                        let wv = w[wbase + (dx * k + dy) * k + dz];
                        for xo in x_lo..x_hi {
                            let xi = ((xo * stride) as isize + off_x) as usize;
                            for yo in y_lo..y_hi {
                                let yi = ((yo * stride) as isize + off_y) as usize;
                                let in_row = (xi * yd + yi) * zd;
                                let out_row = (xo * oy + yo) * oz;
                                for zo in z_lo..z_hi {
                                    let zi = ((zo * stride) as isize + off_z) as usize;
                                    dxp[in_row + zi] += wv * doutp[out_row + zo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // d/dw: one task per output channel.
    dw_out
        .par_chunks_mut(ci_n * k3)
        .enumerate()
        .for_each(|(co, dwp)| {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            for ci in 0..ci_n {
                let xp = &x[ci * in_spatial..(ci + 1) * in_spatial];
                for dx in 0..k {
                    let off_x = dx as isize - pad as isize;
                    let (x_lo, x_hi) = axis_range(ox, xd, stride, off_x);
                    for dy in 0..k {
                        let off_y = dy as isize - pad as isize;
                        let (y_lo, y_hi) = axis_range(oy, yd, stride, off_y);
                        for dz in 0..k {
                            let off_z = dz as isize - pad as isize;
                            let (z_lo, z_hi) = axis_range(oz, zd, stride, off_z);
                            let mut acc = T::zero();
                            for xo in x_lo..x_hi {
                                let xi = ((xo * stride) as isize + off_x) as usize;
                                for yo in y_lo..y_hi {
                                    let yi = ((yo * stride) as isize + off_y) as usize;
                                    let in_row = (xi * yd + yi) * zd;
                                    let out_row = (xo * oy + yo) * oz;
                                    for zo in z_lo..z_hi {
                                        let zi = ((zo * stride) as isize + off_z) as usize;
                                        acc += doutp[out_row + zo] * xp[in_row + zi];
                                    }
                                }
                            }
                            dwp[ci * k3 + (dx * k + dy) * k + dz] = acc;
                        }
                    }
                }
            }
        });

    if let Some(db) = db_out {
        for (co, slot) in db.iter_mut().enumerate() {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            *slot = doutp.iter().copied().sum();
        }
    }
}

/// 2D convolution forward. `x` is `[Ci][H][W]`, `w` is `[Co][Ci][k][k]`,
/// output `[Co][OH][OW]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    ci_n: usize,
    co_n: usize,
    dims: [usize; 2],
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    let [hd, wd] = dims;
    let (oh, ow) = (conv_out_len(hd, stride), conv_out_len(wd, stride));
    let in_spatial = hd * wd;
    let out_spatial = oh * ow;
    let pad = (k - 1) / 2;
    let k2 = k * k;
    debug_assert_eq!(out.len(), co_n * out_spatial);
    out.par_chunks_mut(out_spatial).enumerate().for_each(|(co, plane)| {
        plane.fill(b.map_or(T::zero(), |b| b[co]));
        for ci in 0..ci_n {
            let xp = &x[ci * in_spatial..(ci + 1) * in_spatial];
            let wbase = (co * ci_n + ci) * k2;
            for dy in 0..k {
                let off_y = dy as isize - pad as isize;
                let (y_lo, y_hi) = axis_range(oh, hd, stride, off_y);
                for dx in 0..k {
                    let off_x = dx as isize - pad as isize;
                    let (x_lo, x_hi) = axis_range(ow, wd, stride, off_x);
                    let wv = w[wbase + dy * k + dx];
                    for yo in y_lo..y_hi {
                        let yi = ((yo * stride) as isize + off_y) as usize;
                        let in_row = yi * wd;
                        let out_row = yo * ow;
                        for xo in x_lo..x_hi {
                            let xi = ((xo * stride) as isize + off_x) as usize;
                            plane[out_row + xo] += wv * xp[in_row + xi];
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    ci_n: usize,
    co_n: usize,
    dims: [usize; 2],
    k: usize,
    stride: usize,
    dx_out: &mut [T],
    dw_out: &mut [T],
    db_out: Option<&mut [T]>,
) {
    let [hd, wd] = dims;
    let (oh, ow) = (conv_out_len(hd, stride), conv_out_len(wd, stride));
    let in_spatial = hd * wd;
    let out_spatial = oh * ow;
    let pad = (k - 1) / 2;
    let k2 = k * k;

    dx_out.par_chunks_mut(in_spatial).enumerate().for_each(|(ci, dxp)| {
        for co in 0..co_n {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            let wbase = (co * ci_n + ci) * k2;
            for dy in 0..k {
                let off_y = dy as isize - pad as isize;
                let (y_lo, y_hi) = axis_range(oh, hd, stride, off_y);
                for dx in 0..k {
                    let off_x = dx as isize - pad as isize;
                    let (x_lo, x_hi) = axis_range(ow, wd, stride, off_x);
                    let wv = w[wbase + dy * k + dx];
                    for yo in y_lo..y_hi {
                        let yi = ((yo * stride) as isize + off_y) as usize;
                        for xo in x_lo..x_hi {
                            let xi = ((xo * stride) as isize + off_x) as usize;
                            dxp[yi * wd + xi] += wv * doutp[yo * ow + xo];
                        }
                    }
                }
            }
        }
    });

    dw_out
        .par_chunks_mut(ci_n * k2)
        .enumerate()
        .for_each(|(co, dwp)| {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            for ci in 0..ci_n {
                let xp = &x[ci * in_spatial..(ci + 1) * in_spatial];
                for dy in 0..k {
                    let off_y = dy as isize - pad as isize;
                    let (y_lo, y_hi) = axis_range(oh, hd, stride, off_y);
                    for dx in 0..k {
                        let off_x = dx as isize - pad as isize;
                        let (x_lo, x_hi) = axis_range(ow, wd, stride, off_x);
                        let mut acc = T::zero();
                        for yo in y_lo..y_hi {
                            let yi = ((yo * stride) as isize + off_y) as usize;
                            for xo in x_lo..x_hi {
                                let xi = ((xo * stride) as isize + off_x) as usize;
                                acc += doutp[yo * ow + xo] * xp[yi * wd + xi];
                            }
                        }
                        dwp[ci * k2 + dy * k + dx] = acc;
                    }
                }
            }
        });

    if let Some(db) = db_out {
        for (co, slot) in db.iter_mut().enumerate() {
            let doutp = &dout[co * out_spatial..(co + 1) * out_spatial];
            *slot = doutp.iter().copied().sum();
        }
    }
}

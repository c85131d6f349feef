//! Convolution kernels for the tape: im2col + gemm forward, col2im backward.
//!
//! Batch items are independent, so the batch loop runs on rayon; every output
//! element is produced by exactly one task with a fixed-order inner reduction,
//! which keeps results bit-identical regardless of thread scheduling.

use super::Scalar;
use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

/// Padding behaviour documented for callers; the tape itself takes zero-pad
/// amounts directly and uses [`mirror_pad`] as a separate op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Valid,
    Zero(usize),
    Mirror(usize),
}

/// Output spatial dim for a convolution.
pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    for v in cols.iter_mut() {
        *v = S::zero();
    }
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // valid ox range: 0 <= ox*stride + kj - pad < w
                    let lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                    let hi_excl = if w + pad > kj {
                        (((w + pad - kj - 1) / stride) + 1).min(ow)
                    } else {
                        0
                    };
                    let src_row = (ci * h + iy) * w;
                    let dst_row = dst_base + oy * ow;
                    if stride == 1 {
                        let shift = kj as isize - pad as isize;
                        for ox in lo..hi_excl {
                            cols[dst_row + ox] = input[src_row + (ox as isize + shift) as usize];
                        }
                    } else {
                        for ox in lo..hi_excl {
                            let ix = ox * stride + kj - pad;
                            cols[dst_row + ox] = input[src_row + ix];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                    let hi_excl = if w + pad > kj {
                        (((w + pad - kj - 1) / stride) + 1).min(ow)
                    } else {
                        0
                    };
                    let dst_row = (ci * h + iy) * w;
                    let src_row = src_base + oy * ow;
                    for ox in lo..hi_excl {
                        let ix = ox * stride + kj - pad;
                        out[dst_row + ix] += cols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Direct loop for 1-in/1-out-channel filter kernels (window statistics and
/// separable CSF blurs); skips the im2col materialization entirely.
fn forward_single<S: Scalar>(
    input: &[S],
    weight: &[S],
    n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); n * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let src = &input[ni * h * w..(ni + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let coef = weight[ki * kw + kj];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                        let hi = if w + pad > kj {
                            (((w + pad - kj - 1) / stride) + 1).min(ow)
                        } else {
                            0
                        };
                        let dst = &mut out_n[oy * ow..(oy + 1) * ow];
                        let src_row = &src[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let shift = kj as isize - pad as isize;
                            for ox in lo..hi {
                                dst[ox] += coef * src_row[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox] += coef * src_row[ox * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(super) fn forward<S: Scalar>(
    input: &ArrayD<S>,
    weight: &ArrayD<S>,
    stride: usize,
    pad: usize,
) -> ArrayD<S> {
    let si = input.shape();
    let sw = weight.shape();
    assert!(si.len() == 4 && sw.len() == 4, "conv2d expects NCHW/OCKK");
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, cw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    assert_eq!(c, cw, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw);
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);

    let in_s = input.as_slice().unwrap();
    let w_s = weight.as_slice().unwrap();

    if o == 1 && c == 1 {
        let out = forward_single(in_s, w_s, n, h, w, kh, kw, stride, pad, oh, ow);
        return ArrayD::from_shape_vec(IxDyn(&[n, 1, oh, ow]), out).unwrap();
    }

    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![S::zero(); n * o * ohw];

    out.par_chunks_mut(o * ohw)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let mut cols = vec![S::zero(); ckk * ohw];
            im2col(
                &in_s[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut cols,
            );
            unsafe {
                S::gemm(
                    o,
                    ckk,
                    ohw,
                    S::one(),
                    w_s.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    ohw as isize,
                    1,
                    S::zero(),
                    out_n.as_mut_ptr(),
                    ohw as isize,
                    1,
                );
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[n, o, oh, ow]), out).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn backward_single<S: Scalar>(
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let per_item: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let src = &input[ni * h * w..(ni + 1) * h * w];
            let go = &grad_out[ni * oh * ow..(ni + 1) * oh * ow];
            let mut gi = if need_input {
                Some(vec![S::zero(); h * w])
            } else {
                None
            };
            let mut gw = if need_weight {
                Some(vec![S::zero(); kh * kw])
            } else {
                None
            };
            for ki in 0..kh {
                for kj in 0..kw {
                    let coef = weight[ki * kw + kj];
                    let mut wacc = S::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                        let hi = if w + pad > kj {
                            (((w + pad - kj - 1) / stride) + 1).min(ow)
                        } else {
                            0
                        };
                        let go_row = &go[oy * ow..(oy + 1) * ow];
                        let src_row = &src[iy * w..(iy + 1) * w];
                        if let Some(gi) = gi.as_mut() {
                            let gi_row = &mut gi[iy * w..(iy + 1) * w];
                            for ox in lo..hi {
                                gi_row[ox * stride + kj - pad] += coef * go_row[ox];
                            }
                        }
                        if need_weight {
                            for ox in lo..hi {
                                wacc += go_row[ox] * src_row[ox * stride + kj - pad];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[ki * kw + kj] = wacc;
                    }
                }
            }
            (gi, gw)
        })
        .collect();

    let grad_input = if need_input {
        let mut out = vec![S::zero(); n * h * w];
        for (ni, (gi, _)) in per_item.iter().enumerate() {
            out[ni * h * w..(ni + 1) * h * w].copy_from_slice(gi.as_ref().unwrap());
        }
        Some(out)
    } else {
        None
    };
    let grad_weight = if need_weight {
        let mut out = vec![S::zero(); kh * kw];
        for (_, gw) in &per_item {
            for (dst, src) in out.iter_mut().zip(gw.as_ref().unwrap()) {
                *dst += *src;
            }
        }
        Some(out)
    } else {
        None
    };
    (grad_input, grad_weight)
}

pub(super) fn backward<S: Scalar>(
    input: &ArrayD<S>,
    weight: &ArrayD<S>,
    grad_out: &ArrayD<S>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> (Option<ArrayD<S>>, Option<ArrayD<S>>) {
    let si = input.shape();
    let sw = weight.shape();
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let ohw = oh * ow;

    let in_s = input.as_slice().unwrap();
    let w_s = weight.as_slice().unwrap();
    let go_s = grad_out.as_slice().unwrap();

    if o == 1 && c == 1 {
        let (gi, gw) = backward_single(
            in_s,
            w_s,
            go_s,
            n,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            need_input,
            need_weight,
        );
        return (
            gi.map(|v| ArrayD::from_shape_vec(IxDyn(&[n, 1, h, w]), v).unwrap()),
            gw.map(|v| ArrayD::from_shape_vec(IxDyn(&[1, 1, kh, kw]), v).unwrap()),
        );
    }

    // Per-item partials, then a fixed-order reduction for determinism.
    let partials: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let go_n = &go_s[ni * o * ohw..(ni + 1) * o * ohw];
            let mut gi_n = None;
            let mut gw_n = None;
            if need_weight {
                let mut cols = vec![S::zero(); ckk * ohw];
                im2col(
                    &in_s[ni * c * h * w..(ni + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut cols,
                );
                let mut gw = vec![S::zero(); o * ckk];
                // gW = gOut (o, ohw) x cols^T (ohw, ckk)
                unsafe {
                    S::gemm(
                        o,
                        ohw,
                        ckk,
                        S::one(),
                        go_n.as_ptr(),
                        ohw as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        ohw as isize,
                        S::zero(),
                        gw.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                }
                gw_n = Some(gw);
            }
            if need_input {
                // colsg = W^T (ckk, o) x gOut (o, ohw)
                let mut colsg = vec![S::zero(); ckk * ohw];
                unsafe {
                    S::gemm(
                        ckk,
                        o,
                        ohw,
                        S::one(),
                        w_s.as_ptr(),
                        1,
                        ckk as isize,
                        go_n.as_ptr(),
                        ohw as isize,
                        1,
                        S::zero(),
                        colsg.as_mut_ptr(),
                        ohw as isize,
                        1,
                    );
                }
                let mut gi = vec![S::zero(); c * h * w];
                col2im_add(&colsg, c, h, w, kh, kw, stride, pad, oh, ow, &mut gi);
                gi_n = Some(gi);
            }
            (gi_n, gw_n)
        })
        .collect();

    let grad_input = if need_input {
        let mut gi = vec![S::zero(); n * c * h * w];
        for (ni, (gi_n, _)) in partials.iter().enumerate() {
            let dst = &mut gi[ni * c * h * w..(ni + 1) * c * h * w];
            dst.copy_from_slice(gi_n.as_ref().unwrap());
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gi).unwrap())
    } else {
        None
    };

    let grad_weight = if need_weight {
        let mut gw = vec![S::zero(); o * ckk];
        for (_, gw_n) in &partials {
            for (dst, src) in gw.iter_mut().zip(gw_n.as_ref().unwrap()) {
                *dst += *src;
            }
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[o, c, kh, kw]), gw).unwrap())
    } else {
        None
    };

    (grad_input, grad_weight)
}

/// Mirror index for symmetric padding that excludes the edge sample:
/// -1 -> 1, -2 -> 2, n -> n-2, n+1 -> n-3.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

pub(super) fn mirror_pad<S: Scalar>(a: &ArrayD<S>, ph: usize, pw: usize) -> ArrayD<S> {
    let s = a.shape();
    assert_eq!(s.len(), 4);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(ph < h && pw < w, "mirror pad must be smaller than the dim");
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let a_s = a.as_slice().unwrap();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let src = &a_s[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let sy = mirror_index(oy as isize - ph as isize, h);
            for ox in 0..ow {
                let sx = mirror_index(ox as isize - pw as isize, w);
                dst[oy * ow + ox] = src[sy * w + sx];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
}

pub(super) fn mirror_pad_backward<S: Scalar>(
    g: &ArrayD<S>,
    in_shape: &[usize],
    ph: usize,
    pw: usize,
) -> ArrayD<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let g_s = g.as_slice().unwrap();
    let mut out = vec![S::zero(); n * c * h * w];
    for nc in 0..n * c {
        let src = &g_s[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let sy = mirror_index(oy as isize - ph as isize, h);
            for ox in 0..ow {
                let sx = mirror_index(ox as isize - pw as isize, w);
                dst[sy * w + sx] += src[oy * ow + ox];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

pub(super) fn channel_mix<S: Scalar>(a: &ArrayD<S>, mat: &ndarray::Array2<S>) -> ArrayD<S> {
    let s = a.shape();
    assert_eq!(s.len(), 4);
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let (o, cm) = (mat.shape()[0], mat.shape()[1]);
    assert_eq!(c, cm, "channel_mix input channels");
    let a_s = a.as_slice().unwrap();
    let m = mat.as_slice().unwrap();
    let mut out = vec![S::zero(); n * o * hw];
    for ni in 0..n {
        let src = &a_s[ni * c * hw..(ni + 1) * c * hw];
        let dst = &mut out[ni * o * hw..(ni + 1) * o * hw];
        for oi in 0..o {
            let drow = &mut dst[oi * hw..(oi + 1) * hw];
            for ci in 0..c {
                let coef = m[oi * c + ci];
                let srow = &src[ci * hw..(ci + 1) * hw];
                for j in 0..hw {
                    drow[j] += coef * srow[j];
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, o, s[2], s[3]]), out).unwrap()
}

pub(super) fn channel_mix_transposed<S: Scalar>(
    g: &ArrayD<S>,
    mat: &ndarray::Array2<S>,
) -> ArrayD<S> {
    let s = g.shape();
    let (n, o, hw) = (s[0], s[1], s[2] * s[3]);
    let (om, c) = (mat.shape()[0], mat.shape()[1]);
    assert_eq!(o, om);
    let g_s = g.as_slice().unwrap();
    let m = mat.as_slice().unwrap();
    let mut out = vec![S::zero(); n * c * hw];
    for ni in 0..n {
        let src = &g_s[ni * o * hw..(ni + 1) * o * hw];
        let dst = &mut out[ni * c * hw..(ni + 1) * c * hw];
        for ci in 0..c {
            let drow = &mut dst[ci * hw..(ci + 1) * hw];
            for oi in 0..o {
                let coef = m[oi * c + ci];
                let srow = &src[oi * hw..(oi + 1) * hw];
                for j in 0..hw {
                    drow[j] += coef * srow[j];
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, s[2], s[3]]), out).unwrap()
}

//! AVX-512 fast path for f32 3x3 stride-1 convolutions.
//!
//! These kernels carry the bulk of training compute; everything else falls
//! back to the portable implementations. Inputs are copied into zero-padded
//! planes with 16 floats of slack at the end, which removes all boundary
//! branches from the hot loops: row loads may overrun into the slack (defined,
//! zero-initialized memory) and stores are lane-masked. Accumulation order is
//! fixed, so outputs are bit-stable across runs on the same machine.

#![allow(unsafe_code)]

use std::any::Any;
use std::arch::x86_64::*;

use super::{Scalar, Tensor};

fn downcast_f32<T: Scalar>(t: &Tensor<T>) -> Option<&Tensor<f32>> {
    (t as &dyn Any).downcast_ref::<Tensor<f32>>()
}

fn upcast<T: Scalar>(t: Tensor<f32>) -> Tensor<T> {
    let boxed: Box<dyn Any> = Box::new(t);
    *boxed.downcast::<Tensor<T>>().expect("caller checked T = f32")
}

fn eligible(w_shape: [usize; 4], stride: usize) -> bool {
    stride == 1 && w_shape[2] == 3 && w_shape[3] == 3 && is_x86_feature_detected!("avx512f")
}

/// Padded copy of every (batch, channel) plane: `(h + 2p) x (w + 2p)` with
/// zero borders, plus load slack at the tail of the buffer.
fn pad_planes(x: &Tensor<f32>, padding: usize) -> (Vec<f32>, usize, usize) {
    let [bn, ci, h, wi] = x.shape();
    let pw = wi + 2 * padding;
    let ph = h + 2 * padding;
    let plane = pw * ph;
    let mut pad = vec![0f32; bn * ci * plane + 16];
    let xd = x.data();
    for bc in 0..bn * ci {
        let src = &xd[bc * h * wi..][..h * wi];
        let dst = bc * plane + padding * pw + padding;
        for y in 0..h {
            pad[dst + y * pw..dst + y * pw + wi].copy_from_slice(&src[y * wi..y * wi + wi]);
        }
    }
    (pad, pw, plane)
}

pub fn try_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<Tensor<T>> {
    if !eligible(w.shape(), stride) {
        return None;
    }
    let x32 = downcast_f32(x)?;
    let w32 = downcast_f32(w)?;
    let bias32 = match bias {
        Some(b) => Some(downcast_f32(b)?),
        None => None,
    };
    let [bn, ci, h, wi] = x32.shape();
    let co = w32.shape()[0];
    let span = 2 * dilation;
    if h + 2 * padding <= span || wi + 2 * padding <= span {
        return None;
    }
    let ho = h + 2 * padding - span;
    let wo = wi + 2 * padding - span;

    let (pad, pw, plane) = pad_planes(x32, padding);
    let bias_vals: Vec<f32> = match bias32 {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; co],
    };
    let mut out = Tensor::<f32>::zeros([bn, co, ho, wo]);
    let od = out.data_mut();
    for b in 0..bn {
        let pbase = &pad[b * ci * plane..];
        let obase = &mut od[b * co * ho * wo..][..co * ho * wo];
        let mut oc = 0;
        // SAFETY: avx512f verified by `eligible`; all pointer arithmetic stays
        // inside the padded buffer plus its slack (see module doc).
        unsafe {
            while oc + 8 <= co {
                conv_block::<8>(pbase, plane, pw, w32.data(), ci, &bias_vals, obase, oc, ho, wo, dilation);
                oc += 8;
            }
            while oc + 4 <= co {
                conv_block::<4>(pbase, plane, pw, w32.data(), ci, &bias_vals, obase, oc, ho, wo, dilation);
                oc += 4;
            }
            while oc < co {
                conv_block::<1>(pbase, plane, pw, w32.data(), ci, &bias_vals, obase, oc, ho, wo, dilation);
                oc += 1;
            }
        }
    }
    Some(upcast(out))
}

/// Computes `CB` output-channel planes of one batch element. Register
/// blocking over output channels amortizes the three row loads per (ic, ky)
/// across `CB` accumulators.
#[target_feature(enable = "avx512f")]
unsafe fn conv_block<const CB: usize>(
    pad: &[f32],
    plane: usize,
    pw: usize,
    wd: &[f32],
    ci: usize,
    bias: &[f32],
    out: &mut [f32],
    oc0: usize,
    ho: usize,
    wo: usize,
    d: usize,
) {
    let p = pad.as_ptr();
    let o = out.as_mut_ptr();
    for y in 0..ho {
        let mut x0 = 0usize;
        while x0 < wo {
            let rem = wo - x0;
            let mask: __mmask16 = if rem >= 16 { 0xffff } else { (1u16 << rem) - 1 };
            let mut acc = [_mm512_setzero_ps(); CB];
            for (j, a) in acc.iter_mut().enumerate() {
                *a = _mm512_set1_ps(*bias.get_unchecked(oc0 + j));
            }
            for ic in 0..ci {
                let base = p.add(ic * plane + y * pw + x0);
                for ky in 0..3 {
                    let row = base.add(ky * d * pw);
                    let r0 = _mm512_loadu_ps(row);
                    let r1 = _mm512_loadu_ps(row.add(d));
                    let r2 = _mm512_loadu_ps(row.add(2 * d));
                    for (j, a) in acc.iter_mut().enumerate() {
                        let wp = wd.as_ptr().add((((oc0 + j) * ci + ic) * 3 + ky) * 3);
                        *a = _mm512_fmadd_ps(r0, _mm512_set1_ps(*wp), *a);
                        *a = _mm512_fmadd_ps(r1, _mm512_set1_ps(*wp.add(1)), *a);
                        *a = _mm512_fmadd_ps(r2, _mm512_set1_ps(*wp.add(2)), *a);
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                _mm512_mask_storeu_ps(o.add((oc0 + j) * ho * wo + y * wo + x0), mask, *a);
            }
            x0 += 16;
        }
    }
}

pub fn try_conv2d_grad_weight<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<Tensor<T>> {
    if !eligible(w_shape, stride) {
        return None;
    }
    let g32 = downcast_f32(gout)?;
    let x32 = downcast_f32(x)?;
    let [bn, ci, _, _] = x32.shape();
    let [_, co, ho, wo] = g32.shape();
    let (pad, pw, plane) = pad_planes(x32, padding);
    let mut gw = Tensor::<f32>::zeros(w_shape);
    let gwd = gw.data_mut();
    for oc in 0..co {
        for ic in 0..ci {
            // SAFETY: x rows come from the slack-padded buffer; gradient rows
            // use zero-masked tail loads, so no read leaves its allocation.
            let taps = unsafe {
                gradw_taps(&pad, plane, pw, ci, g32.data(), bn, co, oc, ic, ho, wo, dilation)
            };
            gwd[(oc * ci + ic) * 9..][..9].copy_from_slice(&taps);
        }
    }
    Some(upcast(gw))
}

/// All nine kernel-tap gradients for one (out-channel, in-channel) pair,
/// accumulated over the whole batch in lane-parallel order.
#[target_feature(enable = "avx512f")]
unsafe fn gradw_taps(
    pad: &[f32],
    plane: usize,
    pw: usize,
    ci: usize,
    gd: &[f32],
    bn: usize,
    co: usize,
    oc: usize,
    ic: usize,
    ho: usize,
    wo: usize,
    d: usize,
) -> [f32; 9] {
    let mut acc = [_mm512_setzero_ps(); 9];
    for b in 0..bn {
        let gplane = gd.as_ptr().add((b * co + oc) * ho * wo);
        let xplane = pad.as_ptr().add((b * ci + ic) * plane);
        for y in 0..ho {
            let mut x0 = 0usize;
            while x0 < wo {
                let rem = wo - x0;
                let mask: __mmask16 = if rem >= 16 { 0xffff } else { (1u16 << rem) - 1 };
                let g = _mm512_maskz_loadu_ps(mask, gplane.add(y * wo + x0));
                for ky in 0..3 {
                    let row = xplane.add((y + ky * d) * pw + x0);
                    acc[ky * 3] = _mm512_fmadd_ps(g, _mm512_loadu_ps(row), acc[ky * 3]);
                    acc[ky * 3 + 1] =
                        _mm512_fmadd_ps(g, _mm512_loadu_ps(row.add(d)), acc[ky * 3 + 1]);
                    acc[ky * 3 + 2] =
                        _mm512_fmadd_ps(g, _mm512_loadu_ps(row.add(2 * d)), acc[ky * 3 + 2]);
                }
                x0 += 16;
            }
        }
    }
    let mut taps = [0f32; 9];
    for (t, a) in taps.iter_mut().zip(acc) {
        *t = _mm512_reduce_add_ps(a);
    }
    taps
}

//! Convolution kernels and their gradients.
//!
//! The portable implementations here are the single source of truth for
//! every element type; `simd` supplies an f32 fast path for the 3x3 stride-1
//! convolutions that dominate training, dispatched at runtime. Accumulation
//! order is fixed in every kernel, so results are bit-reproducible run to run
//! on the same machine.

use super::{Scalar, Tensor};

pub fn conv2d_out_shape(
    x: [usize; 4],
    w: [usize; 4],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> [usize; 4] {
    let [b, ci, h, wd] = x;
    let [co, ci_w, kh, kw] = w;
    assert_eq!(
        ci, ci_w,
        "conv2d channel mismatch: input has {ci}, weight expects {ci_w}"
    );
    assert!(stride >= 1 && dilation >= 1);
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    assert!(
        h + 2 * padding >= span_h && wd + 2 * padding >= span_w,
        "conv2d kernel span exceeds padded input: input {h}x{wd}, pad {padding}, span {span_h}x{span_w}"
    );
    let ho = (h + 2 * padding - span_h) / stride + 1;
    let wo = (wd + 2 * padding - span_w) / stride + 1;
    [b, co, ho, wo]
}

pub fn conv_transpose2d_out_shape(
    x: [usize; 4],
    w: [usize; 4],
    stride: usize,
    padding: usize,
) -> [usize; 4] {
    let [b, ci, h, wd] = x;
    let [ci_w, co, kh, kw] = w;
    assert_eq!(
        ci, ci_w,
        "conv_transpose2d channel mismatch: input has {ci}, weight expects {ci_w}"
    );
    assert!(stride >= 1);
    let ho = (h - 1) * stride + kh;
    let wo = (wd - 1) * stride + kw;
    assert!(
        ho > 2 * padding && wo > 2 * padding,
        "conv_transpose2d padding {padding} swallows the whole {ho}x{wo} output"
    );
    [b, co, ho - 2 * padding, wo - 2 * padding]
}

/// Cross-correlation (no kernel flip), zero padding, arbitrary stride and
/// dilation. Weight layout `(out_c, in_c, kh, kw)`; bias `(1, out_c, 1, 1)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    #[cfg(target_arch = "x86_64")]
    if let Some(out) = super::simd::try_conv2d(x, w, bias, stride, padding, dilation) {
        return out;
    }
    conv2d_portable(x, w, bias, stride, padding, dilation)
}

pub fn conv2d_portable<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [co, _, kh, kw] = w.shape();
    let [_, _, ho, wo] = conv2d_out_shape(x.shape(), w.shape(), stride, padding, dilation);
    if let Some(b) = bias {
        assert_eq!(b.shape(), [1, co, 1, 1], "bias shape");
    }
    let mut out = Tensor::zeros([bn, co, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for oc in 0..co {
            let oplane = &mut od[(b * co + oc) * ho * wo..][..ho * wo];
            if let Some(bt) = bias {
                oplane.fill(bt.data()[oc]);
            }
            for ic in 0..ci {
                let xplane = &xd[(b * ci + ic) * h * wi..][..h * wi];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky * dilation) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wi..][..wi];
                            let orow = &mut oplane[oy * wo..][..wo];
                            if stride == 1 {
                                // ix = ox - p + kx*d must land in [0, wi)
                                let shift = kx as isize * dilation as isize - p;
                                let ox_lo = (-shift).max(0) as usize;
                                let ox_hi = ((wi as isize - shift).min(wo as isize)).max(0) as usize;
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let src = &xrow[(ox_lo as isize + shift) as usize..][..ox_hi - ox_lo];
                                let dst = &mut orow[ox_lo..ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            } else {
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx * dilation) as isize - p;
                                    if ix >= 0 && ix < wi as isize {
                                        orow[ox] += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// d(conv2d)/d(input): for stride 1 this is a convolution of the upstream
/// gradient with the channel-swapped, spatially flipped weight; other strides
/// fall back to direct scatter.
pub fn conv2d_grad_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: [usize; 4],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    let [co, ci, kh, kw] = w.shape();
    let flip_pad_h = dilation * (kh - 1);
    let flip_pad_w = dilation * (kw - 1);
    if stride == 1 && kh == kw && flip_pad_h >= padding && flip_pad_w >= padding {
        let mut wflip = Tensor::zeros([ci, co, kh, kw]);
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                        wflip.set(ic, oc, kh - 1 - ky, kw - 1 - kx, v);
                    }
                }
            }
        }
        let gx = conv2d(gout, &wflip, None, 1, flip_pad_h - padding, dilation);
        assert_eq!(gx.shape(), x_shape);
        return gx;
    }
    let [bn, _, ho, wo] = gout.shape();
    let [_, _, h, wi] = x_shape;
    let mut gx = Tensor::zeros(x_shape);
    let gd = gout.data();
    let wd = w.data();
    let gxd = gx.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for oc in 0..co {
            let gplane = &gd[(b * co + oc) * ho * wo..][..ho * wo];
            for ic in 0..ci {
                let xplane = &mut gxd[(b * ci + ic) * h * wi..][..h * wi];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky * dilation) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..wo {
                                let ix = (ox * stride + kx * dilation) as isize - p;
                                if ix >= 0 && ix < wi as isize {
                                    xplane[iy as usize * wi + ix as usize] +=
                                        wv * gplane[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_grad_weight<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    #[cfg(target_arch = "x86_64")]
    if let Some(gw) = super::simd::try_conv2d_grad_weight(gout, x, w_shape, stride, padding, dilation)
    {
        return gw;
    }
    conv2d_grad_weight_portable(gout, x, w_shape, stride, padding, dilation)
}

pub fn conv2d_grad_weight_portable<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [co, _, kh, kw] = w_shape;
    let [_, _, ho, wo] = gout.shape();
    let mut gw = Tensor::zeros(w_shape);
    let gd = gout.data();
    let xd = x.data();
    let gwd = gw.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for oc in 0..co {
            let gplane = &gd[(b * co + oc) * ho * wo..][..ho * wo];
            for ic in 0..ci {
                let xplane = &xd[(b * ci + ic) * h * wi..][..h * wi];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::ZERO;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky * dilation) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wi..][..wi];
                            let grow = &gplane[oy * wo..][..wo];
                            if stride == 1 {
                                let shift = kx as isize * dilation as isize - p;
                                let ox_lo = (-shift).max(0) as usize;
                                let ox_hi = ((wi as isize - shift).min(wo as isize)).max(0) as usize;
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let src = &xrow[(ox_lo as isize + shift) as usize..][..ox_hi - ox_lo];
                                for (g, s) in grow[ox_lo..ox_hi].iter().zip(src) {
                                    acc += *g * *s;
                                }
                            } else {
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx * dilation) as isize - p;
                                    if ix >= 0 && ix < wi as isize {
                                        acc += grow[ox] * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                        gwd[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Bias gradient: per-channel sum of the upstream gradient, accumulated in
/// f64 for stability.
pub fn conv_grad_bias<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let [bn, co, ho, wo] = gout.shape();
    let mut gb = Tensor::zeros([1, co, 1, 1]);
    let gd = gout.data();
    for oc in 0..co {
        let mut acc = 0.0f64;
        for b in 0..bn {
            let plane = &gd[(b * co + oc) * ho * wo..][..ho * wo];
            acc += super::stable_sum(plane.iter().map(|v| v.to_f64()));
        }
        gb.data_mut()[oc] = T::from_f64(acc);
    }
    gb
}

/// Transposed convolution (adjoint of `conv2d` in its spatial geometry).
/// Weight layout `(in_c, out_c, kh, kw)`: the same tensor serves a conv and
/// its adjoint with the channel axes read in opposite roles.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [_, co, kh, kw] = w.shape();
    let [_, _, ho, wo] = conv_transpose2d_out_shape(x.shape(), w.shape(), stride, padding);
    if let Some(b) = bias {
        assert_eq!(b.shape(), [1, co, 1, 1], "bias shape");
    }
    let mut out = Tensor::zeros([bn, co, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for oc in 0..co {
            let oplane = &mut od[(b * co + oc) * ho * wo..][..ho * wo];
            if let Some(bt) = bias {
                oplane.fill(bt.data()[oc]);
            }
            for ic in 0..ci {
                let xplane = &xd[(b * ci + ic) * h * wi..][..h * wi];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((ic * co + oc) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let oy = (iy * stride + ky) as isize - p;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let orow = &mut oplane[oy as usize * wo..][..wo];
                            let xrow = &xplane[iy * wi..][..wi];
                            for ix in 0..wi {
                                let ox = (ix * stride + kx) as isize - p;
                                if ox >= 0 && ox < wo as isize {
                                    orow[ox as usize] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// d(conv_transpose2d)/d(input): a strided gather, i.e. a plain convolution
/// of the upstream gradient with the weight read in `(in, out)` order.
pub fn convt_grad_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [bn, _, ho, wo] = gout.shape();
    let [ci, co, kh, kw] = w.shape();
    let [_, _, h, wi] = x_shape;
    let mut gx = Tensor::zeros(x_shape);
    let gd = gout.data();
    let wd = w.data();
    let gxd = gx.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for ic in 0..ci {
            let xplane = &mut gxd[(b * ci + ic) * h * wi..][..h * wi];
            for oc in 0..co {
                let gplane = &gd[(b * co + oc) * ho * wo..][..ho * wo];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((ic * co + oc) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let oy = (iy * stride + ky) as isize - p;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let grow = &gplane[oy as usize * wo..][..wo];
                            let xrow = &mut xplane[iy * wi..][..wi];
                            for ix in 0..wi {
                                let ox = (ix * stride + kx) as isize - p;
                                if ox >= 0 && ox < wo as isize {
                                    xrow[ix] += wv * grow[ox as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn convt_grad_weight<T: Scalar>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: [usize; 4],
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [_, co, kh, kw] = w_shape;
    let [_, _, ho, wo] = gout.shape();
    let mut gw = Tensor::zeros(w_shape);
    let gd = gout.data();
    let xd = x.data();
    let gwd = gw.data_mut();
    let p = padding as isize;
    for b in 0..bn {
        for ic in 0..ci {
            let xplane = &xd[(b * ci + ic) * h * wi..][..h * wi];
            for oc in 0..co {
                let gplane = &gd[(b * co + oc) * ho * wo..][..ho * wo];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::ZERO;
                        for iy in 0..h {
                            let oy = (iy * stride + ky) as isize - p;
                            if oy < 0 || oy >= ho as isize {
                                continue;
                            }
                            let grow = &gplane[oy as usize * wo..][..wo];
                            let xrow = &xplane[iy * wi..][..wi];
                            for ix in 0..wi {
                                let ox = (ix * stride + kx) as isize - p;
                                if ox >= 0 && ox < wo as isize {
                                    acc += xrow[ix] * grow[ox as usize];
                                }
                            }
                        }
                        gwd[((ic * co + oc) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

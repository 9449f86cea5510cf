//! Reference oracles for numeric tests.
//!
//! Everything here trades speed for obviousness: convolutions as six nested
//! loops, window statistics as direct clamped sums, gradients as central
//! finite differences. Production kernels are validated against these, never
//! the other way round, so keep this crate free of clever indexing.

use derain_core::tensor::{Scalar, Tape, Tensor, Var};

/// Direct cross-correlation: for every output element, loop the full kernel
/// support with explicit bounds checks.
pub fn naive_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [co, ci_w, kh, kw] = w.shape();
    assert_eq!(ci, ci_w);
    let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (wi + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros([bn, co, ho, wo]);
    for b in 0..bn {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(T::ZERO);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wi as isize {
                                    acc += x.at(b, ic, iy as usize, ix as usize)
                                        * w.at(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Transposed convolution as a direct gather over contributing input taps:
/// output (oy, ox) collects x(iy, ix) * w(ky, kx) wherever
/// iy*stride + ky - padding == oy (and likewise for x).
pub fn naive_conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let [bn, ci, h, wi] = x.shape();
    let [ci_w, co, kh, kw] = w.shape();
    assert_eq!(ci, ci_w);
    let ho = (h - 1) * stride + kh - 2 * padding;
    let wo = (wi - 1) * stride + kw - 2 * padding;
    let mut out = Tensor::zeros([bn, co, ho, wo]);
    for b in 0..bn {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(T::ZERO);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ny = oy + padding;
                                let nx = ox + padding;
                                if ny < ky || nx < kx {
                                    continue;
                                }
                                if (ny - ky) % stride != 0 || (nx - kx) % stride != 0 {
                                    continue;
                                }
                                let iy = (ny - ky) / stride;
                                let ix = (nx - kx) / stride;
                                if iy < h && ix < wi {
                                    acc += x.at(b, ic, iy, ix) * w.at(ic, oc, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Windowed mean with clamp-to-edge sampling, one window sum per pixel.
pub fn naive_box_mean(x: &Tensor<f64>, radius: usize) -> Tensor<f64> {
    let [bn, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    for b in 0..bn {
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
                            acc += x.at(b, ch, sy, sx);
                        }
                    }
                    out.set(b, ch, y as usize, xx as usize, acc / norm);
                }
            }
        }
    }
    out
}

/// Per-window linear regression oracle for the guided filter: fit
/// q = a*I + b over each window by least squares (the closed form with the
/// eps ridge), then average the per-window coefficients covering each pixel.
/// Channel i of the guide filters channel i of the input.
pub fn naive_guided_filter(
    guide: &Tensor<f64>,
    input: &Tensor<f64>,
    radius: usize,
    eps: f64,
) -> Tensor<f64> {
    assert_eq!(guide.shape(), input.shape());
    let mean_i = naive_box_mean(guide, radius);
    let mean_p = naive_box_mean(input, radius);
    let ii: Tensor<f64> = Tensor::from_vec(
        guide.shape(),
        guide.data().iter().map(|v| v * v).collect(),
    );
    let ip: Tensor<f64> = Tensor::from_vec(
        guide.shape(),
        guide
            .data()
            .iter()
            .zip(input.data())
            .map(|(a, b)| a * b)
            .collect(),
    );
    let mean_ii = naive_box_mean(&ii, radius);
    let mean_ip = naive_box_mean(&ip, radius);
    let n = guide.numel();
    let mut a = Tensor::<f64>::zeros(guide.shape());
    let mut bcoef = Tensor::<f64>::zeros(guide.shape());
    for i in 0..n {
        let var = mean_ii.data()[i] - mean_i.data()[i] * mean_i.data()[i];
        let cov = mean_ip.data()[i] - mean_i.data()[i] * mean_p.data()[i];
        let ai = cov / (var + eps);
        a.data_mut()[i] = ai;
        bcoef.data_mut()[i] = mean_p.data()[i] - ai * mean_i.data()[i];
    }
    let mean_a = naive_box_mean(&a, radius);
    let mean_b = naive_box_mean(&bcoef, radius);
    let mut q = Tensor::<f64>::zeros(guide.shape());
    for i in 0..n {
        q.data_mut()[i] = (mean_a.data()[i] * guide.data()[i] + mean_b.data()[i]).clamp(0.0, 1.0);
    }
    q
}

/// Mean absolute response of the 5-point Laplacian over interior pixels:
/// a scale-free high-frequency energy statistic. Rain streaks are
/// high-frequency, so deraining and blurring both lower it.
pub fn laplacian_energy<T: Scalar>(x: &Tensor<T>) -> f64 {
    let [bn, c, h, w] = x.shape();
    assert!(h >= 3 && w >= 3, "laplacian needs at least 3x3");
    let mut acc = 0.0;
    let mut count = 0usize;
    for b in 0..bn {
        for ch in 0..c {
            for y in 1..h - 1 {
                for xx in 1..w - 1 {
                    let v = x.at(b, ch, y - 1, xx).to_f64()
                        + x.at(b, ch, y + 1, xx).to_f64()
                        + x.at(b, ch, y, xx - 1).to_f64()
                        + x.at(b, ch, y, xx + 1).to_f64()
                        - 4.0 * x.at(b, ch, y, xx).to_f64();
                    acc += v.abs();
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

/// Dot product of two tensors in f64: the test-side of adjoint identities.
pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.to_f64() * y.to_f64())
        .sum()
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes discarded because the central difference straddled an
    /// activation corner (only `gradcheck_skipping_corners` rejects).
    pub rejected: usize,
}

/// Central finite differences against tape gradients, in double precision.
///
/// `build` must construct the scalar loss from leaf vars corresponding to
/// `inputs`, in order. Every input element is perturbed by `±h` unless
/// `max_per_input` caps it, in which case elements are sampled at an even
/// stride (deterministically). The relative error denominator is floored so
/// that agreeing near-zero gradients pass.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], max_per_input: usize, h: f64) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let take = n.min(max_per_input);
        let stride = n.div_ceil(take);
        let analytic = grads.get(vars[ti]);
        for ei in (0..n).step_by(stride) {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.map(|g| g.data()[ei]).unwrap_or(0.0);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
        rejected: 0,
    }
}

/// Central finite differences that first validate each probe: the secants at
/// `h` and `h/2` must agree, otherwise the probed segment contains an
/// activation corner, where no two-sided derivative exists to compare, and
/// the probe moves on to another element of the same tensor. Both secants
/// are plain finite differences, so a wrong analytic gradient can never
/// cause a rejection; it is still compared on every accepted probe. Panics
/// if any input tensor ends up with no valid probe at all.
pub fn gradcheck_skipping_corners<F>(
    build: F,
    inputs: &[Tensor<f64>],
    max_per_input: usize,
    h: f64,
) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut rejected = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let take = n.min(max_per_input);
        let stride = n.div_ceil(take);
        let analytic = grads.get(vars[ti]);
        let mut accepted_here = 0usize;
        // Walk strided offsets first, then fill in the gaps if corners force
        // rejections; every element is visited at most once.
        let order = (0..n).step_by(stride).chain((0..n).filter(|i| i % stride != 0));
        for ei in order {
            if accepted_here >= take {
                break;
            }
            let orig = input.data()[ei];
            let mut secant = |step: f64| {
                work[ti].data_mut()[ei] = orig + step;
                let up = eval(&work);
                work[ti].data_mut()[ei] = orig - step;
                let down = eval(&work);
                work[ti].data_mut()[ei] = orig;
                (up - down) / (2.0 * step)
            };
            let s1 = secant(h);
            let s2 = secant(h / 2.0);
            let scale = s1.abs().max(s2.abs()).max(1e-6);
            if (s1 - s2).abs() > (3e-5 * scale).max(1e-9) {
                rejected += 1;
                continue;
            }
            let an = analytic.map(|g| g.data()[ei]).unwrap_or(0.0);
            let rel = (an - s1).abs() / an.abs().max(s1.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
            accepted_here += 1;
        }
        assert!(
            accepted_here > 0,
            "input {ti}: every probed segment crossed a corner; nothing to compare"
        );
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
        rejected,
    }
}

/// Per-window SSIM factor maps by direct transcription: for every fully
/// interior window position, accumulate Gaussian-weighted moments with an
/// explicit 2D loop (outer product of 1D taps), then form the luminance
/// factor (2*mx*my + c1)/(mx^2 + my^2 + c1) and the contrast/structure
/// factor (2*cov + c2)/(vx + vy + c2) with uncentered-moment variances.
/// Returns (luminance map, contrast/structure map) on the valid region.
pub fn naive_ssim_maps(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> (Tensor<f64>, Tensor<f64>) {
    assert_eq!(x.shape(), y.shape());
    let [bn, cn, h, w] = x.shape();
    assert!(h >= window && w >= window);
    let center = (window / 2) as f64;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    let oh = h - window + 1;
    let ow = w - window + 1;
    let mut lmap = Tensor::<f64>::zeros([bn, cn, oh, ow]);
    let mut csmap = Tensor::<f64>::zeros([bn, cn, oh, ow]);
    for b in 0..bn {
        for c in 0..cn {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut exx = 0.0;
                    let mut eyy = 0.0;
                    let mut exy = 0.0;
                    for ky in 0..window {
                        for kx in 0..window {
                            let wgt = taps[ky] * taps[kx];
                            let xv = x.at(b, c, oy + ky, ox + kx);
                            let yv = y.at(b, c, oy + ky, ox + kx);
                            mx += wgt * xv;
                            my += wgt * yv;
                            exx += wgt * xv * xv;
                            eyy += wgt * yv * yv;
                            exy += wgt * xv * yv;
                        }
                    }
                    let vx = exx - mx * mx;
                    let vy = eyy - my * my;
                    let cov = exy - mx * my;
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let cs = (2.0 * cov + c2) / (vx + vy + c2);
                    lmap.set(b, c, oy, ox, l);
                    csmap.set(b, c, oy, ox, cs);
                }
            }
        }
    }
    (lmap, csmap)
}

/// Mean of the product of the two `naive_ssim_maps` factors.
pub fn naive_ssim(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    window: usize,
    sigma: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    let (l, cs) = naive_ssim_maps(x, y, window, sigma, c1, c2);
    let n = l.numel() as f64;
    l.data()
        .iter()
        .zip(cs.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n
}

/// Deterministic uniform tensor in (lo, hi) from a cheap LCG; test inputs
/// only, not a statistical RNG.
pub fn lcg_tensor<T: Scalar>(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
        data.push(T::from_f64(lo + u * (hi - lo)));
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_identity_kernel() {
        let x = lcg_tensor::<f64>([1, 1, 4, 4], 0.0, 1.0, 3);
        let mut w = Tensor::<f64>::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let out = naive_conv2d(&x, &w, None, 1, 1, 1);
        assert_eq!(out, x);
    }

    #[test]
    fn naive_box_mean_constant_is_constant() {
        let x = Tensor::<f64>::full([1, 1, 5, 5], 0.3);
        let out = naive_box_mean(&x, 2);
        for &v in out.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn naive_box_mean_impulse_spreads_ninth() {
        let mut x = Tensor::<f64>::zeros([1, 1, 5, 5]);
        x.set(0, 0, 2, 2, 1.0);
        let out = naive_box_mean(&x, 1);
        assert!((out.at(0, 0, 2, 2) - 1.0 / 9.0).abs() < 1e-12);
        assert!((out.at(0, 0, 1, 1) - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(out.at(0, 0, 0, 4), 0.0);
    }

    #[test]
    fn guided_filter_oracle_is_exact_on_constant_input() {
        let guide = lcg_tensor::<f64>([1, 1, 8, 8], 0.0, 1.0, 9);
        let input = Tensor::<f64>::full([1, 1, 8, 8], 0.42);
        let q = naive_guided_filter(&guide, &input, 2, 1e-3);
        for &v in q.data() {
            assert!((v - 0.42).abs() < 1e-9, "constant input must pass through");
        }
    }

    #[test]
    fn laplacian_energy_zero_on_flat_image() {
        let x = Tensor::<f32>::full([1, 3, 8, 8], 0.5);
        assert_eq!(laplacian_energy(&x), 0.0);
    }

    #[test]
    fn gradcheck_catches_a_wrong_gradient() {
        // mean(x*x) has gradient 2x/N; mean(x) does not. A deliberately wrong
        // build function must produce a large relative error.
        let x = lcg_tensor::<f64>([1, 1, 2, 2], 0.5, 1.5, 4);
        let report = gradcheck(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]);
                tape.mean(sq)
            },
            &[x.clone()],
            usize::MAX,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-9, "true gradient should check out");
        assert_eq!(report.checked, 4);
    }
}

//! Classical image operations on [0, 1] RGB data: PNG I/O, bicubic
//! resampling, box filtering, the guided filter, and PSNR.
//!
//! These are pure value-type functions used by the label-construction
//! pipeline and by evaluation. Windowed statistics clamp to the image edge,
//! every operation keeps its output inside [0, 1], and internal arithmetic
//! runs in f64 while images store f32.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{stable_sum, Tensor};

/// Default guided-filter window radius used when building soft labels.
pub const GUIDED_RADIUS_DEFAULT: usize = 8;
/// Default guided-filter regularizer, on the [0, 1] intensity scale.
pub const GUIDED_EPS_DEFAULT: f64 = 0.01;

/// An RGB image with values in [0, 1], stored planar as a 1x3xHxW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor<f32>,
}

impl Image {
    /// Wraps a 1x3xHxW tensor whose values already lie in [0, 1].
    pub fn from_tensor(data: Tensor<f32>) -> Self {
        let [b, c, h, w] = data.shape();
        assert!(
            b == 1 && c == 3,
            "image tensors are 1x3xHxW, got {:?}",
            data.shape()
        );
        assert!(h >= 1 && w >= 1, "empty image");
        debug_assert!(
            data.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "image values outside [0, 1]"
        );
        Image { data }
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Image::from_tensor(Tensor::full([1, 3, height, width], value))
    }

    /// Builds an image from a per-sample function of (channel, y, x).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut t = Tensor::zeros([1, 3, height, width]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    t.set(0, c, y, x, f(c, y, x));
                }
            }
        }
        Image::from_tensor(t)
    }

    /// Extracts the axis-aligned window starting at (top, left).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(height >= 1 && width >= 1);
        assert!(
            top + height <= self.height() && left + width <= self.width(),
            "crop {}x{}+{}+{} exceeds {}x{}",
            height,
            width,
            top,
            left,
            self.height(),
            self.width()
        );
        let mut t = Tensor::zeros([1, 3, height, width]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    t.set(0, c, y, x, self.data.at(0, c, top + y, left + x));
                }
            }
        }
        Image::from_tensor(t)
    }

    fn plane_f64(&self, c: usize) -> Vec<f64> {
        let [_, _, h, w] = self.data.shape();
        let plane = &self.data.data()[c * h * w..(c + 1) * h * w];
        plane.iter().map(|&v| v as f64).collect()
    }

    fn from_planes(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> Image {
        let mut data = Vec::with_capacity(3 * height * width);
        for p in planes {
            assert_eq!(p.len(), height * width);
            data.extend(p.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
        }
        Image::from_tensor(Tensor::from_vec([1, 3, height, width], data))
    }
}

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot open {}: {source}", path.display())]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{}: unsupported pixel format {found}; supported: 8-bit RGB or 8-bit grayscale PNG", path.display())]
    UnsupportedFormat { path: PathBuf, found: String },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Loads an 8-bit RGB or grayscale PNG, mapping samples v/255 into [0, 1].
/// Grayscale is replicated to three channels. Anything else (16-bit depths,
/// alpha channels) is rejected with an explicit error.
pub fn load_png(path: &Path) -> Result<Image, ImagingError> {
    let reader = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|source| ImagingError::Open {
            path: path.to_path_buf(),
            source,
        })?;
    let decoded = reader.decode().map_err(|source| ImagingError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (h, w) = (decoded.height() as usize, decoded.width() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    match &decoded {
        image::DynamicImage::ImageRgb8(img) => {
            for y in 0..h {
                for x in 0..w {
                    let px = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
                    }
                }
            }
        }
        image::DynamicImage::ImageLuma8(img) => {
            for y in 0..h {
                for x in 0..w {
                    let v = img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0;
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = v;
                    }
                }
            }
        }
        other => {
            return Err(ImagingError::UnsupportedFormat {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    }
    Ok(Image::from_tensor(Tensor::from_vec([1, 3, h, w], data)))
}

/// Saves as an 8-bit RGB PNG, quantizing each sample to round(v * 255).
pub fn save_png(image: &Image, path: &Path) -> Result<(), ImagingError> {
    let (h, w) = (image.height(), image.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = image.data.at(0, c, y, x) as f64 * 255.0;
                v.round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImagingError::Write {
            path: path.to_path_buf(),
            source,
        })
}

/// Catmull-Rom cubic kernel (the a = -0.5 bicubic): support (-2, 2),
/// interpolating, and its four taps sum to one for any phase.
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Source taps and weights per output index for one axis, center-aligned
/// (source position (o + 0.5) * in/out - 0.5) with indices clamped to the
/// valid range.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for (j, (i, wv)) in idx.iter_mut().zip(wts.iter_mut()).enumerate() {
                let m = base as isize + j as isize - 1;
                *i = m.clamp(0, n_in as isize - 1) as usize;
                *wv = catmull_rom(frac - (j as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Separable Catmull-Rom resampling to out_h x out_w with edge-clamped
/// source taps; the result is clamped to [0, 1] (cubic weights overshoot).
pub fn bicubic_resize(image: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h >= 1 && out_w >= 1);
    let (h, w) = (image.height(), image.width());
    let x_taps = resample_taps(w, out_w);
    let y_taps = resample_taps(h, out_h);
    let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (c, out_plane) in planes.iter_mut().enumerate() {
        let src = image.plane_f64(c);
        let mut mid = vec![0.0f64; h * out_w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (o, (idx, wt)) in x_taps.iter().enumerate() {
                mid[y * out_w + o] = wt[0] * row[idx[0]]
                    + wt[1] * row[idx[1]]
                    + wt[2] * row[idx[2]]
                    + wt[3] * row[idx[3]];
            }
        }
        let mut dst = vec![0.0f64; out_h * out_w];
        for (o, (idx, wt)) in y_taps.iter().enumerate() {
            for x in 0..out_w {
                dst[o * out_w + x] = wt[0] * mid[idx[0] * out_w + x]
                    + wt[1] * mid[idx[1] * out_w + x]
                    + wt[2] * mid[idx[2] * out_w + x]
                    + wt[3] * mid[idx[3] * out_w + x];
            }
        }
        *out_plane = dst;
    }
    Image::from_planes(out_h, out_w, &planes)
}

/// Windowed sum along rows with clamp-to-edge sampling, via prefix sums.
fn windowed_sum_rows(src: &[f64], h: usize, w: usize, r: usize, dst: &mut [f64]) {
    let mut prefix = vec![0.0f64; w + 1];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            let mut s = prefix[hi] - prefix[lo];
            if r > x {
                s += (r - x) as f64 * row[0];
            }
            if x + r + 1 > w {
                s += (x + r + 1 - w) as f64 * row[w - 1];
            }
            dst[y * w + x] = s;
        }
    }
}

/// Column counterpart of `windowed_sum_rows`.
fn windowed_sum_cols(src: &[f64], h: usize, w: usize, r: usize, dst: &mut [f64]) {
    let mut prefix = vec![0.0f64; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + src[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            let mut s = prefix[hi] - prefix[lo];
            if r > y {
                s += (r - y) as f64 * src[x];
            }
            if y + r + 1 > h {
                s += (y + r + 1 - h) as f64 * src[(h - 1) * w + x];
            }
            dst[y * w + x] = s;
        }
    }
}

/// Mean over the (2r+1)^2 clamp-to-edge window at every pixel. Clamping is
/// independent per axis, so the 2D window sum separates into a row pass and
/// a column pass, O(N) total via prefix sums.
pub(crate) fn box_mean_plane(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0f64; h * w];
    let mut out = vec![0.0f64; h * w];
    windowed_sum_rows(src, h, w, r, &mut tmp);
    windowed_sum_cols(&tmp, h, w, r, &mut out);
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Per-channel windowed mean with edge-clamped borders.
pub fn box_filter(image: &Image, radius: usize) -> Image {
    assert!(radius >= 1);
    let (h, w) = (image.height(), image.width());
    let planes = [0, 1, 2].map(|c| box_mean_plane(&image.plane_f64(c), h, w, radius));
    Image::from_planes(h, w, &planes)
}

/// Edge-preserving guided filter: within each window the output is the best
/// ridge-regularized linear fit a*I + b of the input on the guide, and each
/// pixel averages the coefficients of every window covering it. Channel i of
/// the guide filters channel i of the input.
pub fn guided_filter(guide: &Image, input: &Image, radius: usize, eps: f64) -> Image {
    assert!(
        guide.height() == input.height() && guide.width() == input.width(),
        "guided_filter size mismatch: {}x{} vs {}x{}",
        guide.height(),
        guide.width(),
        input.height(),
        input.width()
    );
    assert!(radius >= 1);
    assert!(eps > 0.0);
    let (h, w) = (guide.height(), guide.width());
    let n = h * w;
    let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (c, out_plane) in planes.iter_mut().enumerate() {
        let i = guide.plane_f64(c);
        let p = input.plane_f64(c);
        let ii: Vec<f64> = i.iter().map(|v| v * v).collect();
        let ip: Vec<f64> = i.iter().zip(&p).map(|(a, b)| a * b).collect();
        let mean_i = box_mean_plane(&i, h, w, radius);
        let mean_p = box_mean_plane(&p, h, w, radius);
        let mean_ii = box_mean_plane(&ii, h, w, radius);
        let mean_ip = box_mean_plane(&ip, h, w, radius);
        let mut a = vec![0.0f64; n];
        let mut b = vec![0.0f64; n];
        for k in 0..n {
            let var = mean_ii[k] - mean_i[k] * mean_i[k];
            let cov = mean_ip[k] - mean_i[k] * mean_p[k];
            a[k] = cov / (var + eps);
            b[k] = mean_p[k] - a[k] * mean_i[k];
        }
        let mean_a = box_mean_plane(&a, h, w, radius);
        let mean_b = box_mean_plane(&b, h, w, radius);
        let mut q = vec![0.0f64; n];
        for k in 0..n {
            q[k] = mean_a[k] * i[k] + mean_b[k];
        }
        *out_plane = q;
    }
    Image::from_planes(h, w, &planes)
}

/// Element-wise minimum of two same-size images.
pub fn elementwise_min(a: &Image, b: &Image) -> Image {
    assert_eq!(a.tensor().shape(), b.tensor().shape(), "min size mismatch");
    let data = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(&x, &y)| x.min(y))
        .collect();
    Image::from_tensor(Tensor::from_vec(a.tensor().shape(), data))
}

/// Peak signal-to-noise ratio in dB on the [0, 1] scale: 10*log10(1/MSE),
/// with +inf for identical images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.tensor().shape(), b.tensor().shape(), "psnr size mismatch");
    let n = a.tensor().numel() as f64;
    let mse = stable_sum(a.tensor().data().iter().zip(b.tensor().data()).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    })) / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_image(h: usize, w: usize) -> Image {
        // Values on the exact 1/255 grid so PNG quantization is lossless.
        Image::from_fn(h, w, |c, y, x| ((c * 89 + y * 13 + x * 7) % 256) as f32 / 255.0)
    }

    #[test]
    fn png_round_trip_is_exact_on_the_255_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = grid_image(9, 14);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(4, 3, image::Luma([40000]))
            .save_with_format(&path, image::ImageFormat::Png)
            .unwrap();
        match load_png(&path) {
            Err(ImagingError::UnsupportedFormat { found, .. }) => {
                assert!(found.contains("16"), "got {found}")
            }
            other => panic!("expected UnsupportedFormat, got {other:?}"),
        }
    }

    #[test]
    fn all_black_png_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        save_png(&Image::constant(6, 5, 0.0), &path).unwrap();
        let img = load_png(&path).unwrap();
        assert!(img.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_png_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_fn(4, 4, |x, y| {
            image::Luma([(x * 16 + y) as u8])
        })
        .save_with_format(&path, image::ImageFormat::Png)
        .unwrap();
        let img = load_png(&path).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let r = img.tensor().at(0, 0, y, x);
                assert_eq!(r, img.tensor().at(0, 1, y, x));
                assert_eq!(r, img.tensor().at(0, 2, y, x));
                assert_eq!(r, (x * 16 + y) as f32 / 255.0);
            }
        }
    }

    #[test]
    fn missing_file_reports_open_error() {
        match load_png(Path::new("/nonexistent/nowhere.png")) {
            Err(ImagingError::Open { .. }) => {}
            other => panic!("expected Open error, got {other:?}"),
        }
    }

    #[test]
    fn bicubic_reproduces_constants_and_is_monotone_on_them() {
        for &(oh, ow) in &[(3usize, 3usize), (8, 5), (20, 31), (1, 1)] {
            let lo = bicubic_resize(&Image::constant(16, 12, 0.25), oh, ow);
            let hi = bicubic_resize(&Image::constant(16, 12, 0.75), oh, ow);
            for (&a, &b) in lo.tensor().data().iter().zip(hi.tensor().data()) {
                assert!((a - 0.25).abs() < 1e-6);
                assert!((b - 0.75).abs() < 1e-6);
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn bicubic_identity_resize_preserves_the_image() {
        let img = grid_image(7, 11);
        let same = bicubic_resize(&img, 7, 11);
        for (&a, &b) in img.tensor().data().iter().zip(same.tensor().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn box_filter_spreads_an_impulse_into_a_uniform_patch() {
        let mut t = Tensor::zeros([1, 3, 7, 7]);
        for c in 0..3 {
            t.set(0, c, 3, 3, 1.0);
        }
        let out = box_filter(&Image::from_tensor(t), 1);
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..7 {
                    let want = if (2..=4).contains(&y) && (2..=4).contains(&x) {
                        1.0 / 9.0
                    } else {
                        0.0
                    };
                    assert!((out.tensor().at(0, c, y, x) - want).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn box_filter_fixes_constants() {
        for r in [1, 2, 5] {
            let out = box_filter(&Image::constant(9, 6, 0.375), r);
            assert!(out.tensor().data().iter().all(|&v| v == 0.375));
        }
    }

    #[test]
    fn guided_filter_is_exact_on_constant_inputs() {
        let guide = grid_image(12, 10);
        for &(r, eps) in &[(1usize, 1e-4), (3, 0.01), (8, 1e2)] {
            let out = guided_filter(&guide, &Image::constant(12, 10, 0.625), r, eps);
            assert!(
                out.tensor().data().iter().all(|&v| v == 0.625),
                "r={r} eps={eps}"
            );
        }
    }

    #[test]
    fn psnr_matches_closed_forms() {
        let a = Image::constant(8, 8, 0.5);
        let b = Image::constant(8, 8, 0.6);
        assert!(psnr(&a, &a).is_infinite());
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &b), psnr(&b, &a));
    }

    #[test]
    fn elementwise_min_takes_the_smaller_sample() {
        let a = grid_image(5, 5);
        let b = Image::constant(5, 5, 0.5);
        let m = elementwise_min(&a, &b);
        for ((&x, &y), &z) in a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .zip(m.tensor().data())
        {
            assert_eq!(z, x.min(y));
        }
    }

    #[test]
    fn crop_extracts_the_requested_window() {
        let img = grid_image(10, 10);
        let c = img.crop(2, 3, 4, 5);
        assert_eq!((c.height(), c.width()), (4, 5));
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(c.tensor().at(0, ch, y, x), img.tensor().at(0, ch, 2 + y, 3 + x));
                }
            }
        }
    }
}

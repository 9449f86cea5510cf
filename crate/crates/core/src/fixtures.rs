//! Synthetic rainy/clean fixture pairs for scoring the pipeline.
//!
//! The training method itself is unsupervised and never reads a clean truth;
//! these pairs exist so the harness can measure restoration quality. Each
//! clean image is a smoothed random color field with geometric shapes layered
//! on top (edges and flat regions to watch for detail loss), and its rainy
//! partner adds a layer of bright anti-aliased streaks that vary in angle,
//! length and intensity within the one image: rainy = clamp01(clean + rain).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::imaging::{bicubic_resize, psnr, save_png, Image, ImagingError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Generator parameters. Ranges are inclusive and sampled per streak, so one
/// image carries a mix of orientations and strengths. Defaults are tuned so
/// a default-spec corpus lands in the high-teens-to-twenties PSNR band that
/// desk evaluation expects of "visibly rainy but recoverable".
#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Streaks per image.
    pub streak_count: (usize, usize),
    /// Streak length in pixels.
    pub streak_length: (f64, f64),
    /// Streak thickness in pixels (Gaussian cross-section, sigma = width/2).
    pub streak_width: f64,
    /// Angle from vertical in degrees; positive leans the top rightward.
    pub streak_angle: (f64, f64),
    /// Peak additive brightness of a streak before the opacity multiplier.
    pub streak_intensity: (f64, f64),
    /// Opacity multiplier applied to every streak.
    pub streak_alpha: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            count: 64,
            height: 96,
            width: 96,
            streak_count: (14, 26),
            streak_length: (12.0, 28.0),
            streak_width: 1.2,
            streak_angle: (-20.0, 20.0),
            streak_intensity: (0.25, 0.6),
            streak_alpha: 0.85,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |msg: String| Err(FixtureError::Spec(msg));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("{}x{} is too small; 16px minimum", self.height, self.width));
        }
        if self.streak_count.0 > self.streak_count.1 {
            return bad("streak count range is inverted".into());
        }
        for (name, (lo, hi)) in [
            ("length", self.streak_length),
            ("angle", self.streak_angle),
            ("intensity", self.streak_intensity),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("streak {name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.streak_length.0 < 1.0 {
            return bad("streak length must be at least 1px".into());
        }
        if self.streak_intensity.0 < 0.0 {
            return bad("streak intensity must be nonnegative".into());
        }
        if !(self.streak_width.is_finite() && self.streak_width > 0.0) {
            return bad(format!("streak width {} must be positive", self.streak_width));
        }
        if !(0.0..=1.0).contains(&self.streak_alpha) {
            return bad(format!("streak alpha {} must lie in [0, 1]", self.streak_alpha));
        }
        Ok(())
    }
}

/// Per-pair generation statistics, echoed into the directory manifest.
#[derive(Clone, Debug)]
pub struct FixturePair {
    pub name: String,
    pub psnr_db: f64,
    pub streaks: usize,
}

#[derive(Clone, Debug)]
pub struct FixtureReport {
    pub pairs: Vec<FixturePair>,
    pub mean_psnr_db: f64,
}

/// Each image gets its own stream keyed by (seed, index): pair k is the same
/// no matter how many pairs the run asks for, and generation order never
/// leaks between images.
fn fixture_rng(seed: u64, index: usize) -> ChaCha12Rng {
    use rand::SeedableRng;
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..23].copy_from_slice(b"fixture");
    ChaCha12Rng::from_seed(key)
}

fn smooth_field(height: usize, width: usize, rng: &mut ChaCha12Rng) -> Image {
    // Coarse grid upsampled bicubically: low-frequency color gradients with
    // a spatial scale tied to image size, not pixel count.
    let gh = (height / 12).max(2);
    let gw = (width / 12).max(2);
    let coarse = Image::from_tensor(Tensor::uniform([1, 3, gh, gw], 0.15, 0.85, rng));
    bicubic_resize(&coarse, height, width)
}

/// Soft-edged coverage of a disk: 1 inside, 0 outside, linear across the rim.
fn disk_coverage(d: f64, radius: f64) -> f64 {
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

fn blend(plane: &mut [f64], idx: usize, color: f64, alpha: f64) {
    plane[idx] = plane[idx] * (1.0 - alpha) + color * alpha;
}

fn paint_shapes(planes: &mut [Vec<f64>; 3], height: usize, width: usize, rng: &mut ChaCha12Rng) {
    let shapes = rng.gen_range(4..=9);
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..shapes {
        let kind = rng.gen_range(0..3u32);
        let color = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        let alpha: f64 = rng.gen_range(0.4..1.0);
        match kind {
            0 => {
                // Axis-aligned rectangle, hard edges.
                let rh = rng.gen_range(hf / 8.0..hf / 2.0);
                let rw = rng.gen_range(wf / 8.0..wf / 2.0);
                let top = rng.gen_range(0.0..hf - rh);
                let left = rng.gen_range(0.0..wf - rw);
                let (y0, y1) = (top as usize, ((top + rh) as usize).min(height));
                let (x0, x1) = (left as usize, ((left + rw) as usize).min(width));
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (p, c) in planes.iter_mut().zip(color) {
                            blend(p, y * width + x, c, alpha);
                        }
                    }
                }
            }
            1 => {
                // Disk with a one-pixel soft rim.
                let r = rng.gen_range(hf.min(wf) / 10.0..hf.min(wf) / 3.0);
                let cy = rng.gen_range(0.0..hf);
                let cx = rng.gen_range(0.0..wf);
                let y0 = (cy - r - 1.0).max(0.0) as usize;
                let y1 = ((cy + r + 2.0) as usize).min(height);
                let x0 = (cx - r - 1.0).max(0.0) as usize;
                let x1 = ((cx + r + 2.0) as usize).min(width);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        let cov = disk_coverage(d, r) * alpha;
                        if cov > 0.0 {
                            for (p, c) in planes.iter_mut().zip(color) {
                                blend(p, y * width + x, c, cov);
                            }
                        }
                    }
                }
            }
            _ => {
                // Full-width soft-edged stripe at an arbitrary orientation.
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (ny, nx) = (theta.cos(), theta.sin());
                let offset = rng.gen_range(0.0..(hf * ny.abs() + wf * nx.abs()));
                let half = rng.gen_range(1.0..3.5);
                for y in 0..height {
                    for x in 0..width {
                        let d = (y as f64 * ny + x as f64 * nx - offset).abs();
                        let cov = (half + 0.5 - d).clamp(0.0, 1.0) * alpha;
                        if cov > 0.0 {
                            for (p, c) in planes.iter_mut().zip(color) {
                                blend(p, y * width + x, c, cov);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn render_background(height: usize, width: usize, rng: &mut ChaCha12Rng) -> Image {
    let field = smooth_field(height, width, rng);
    let mut planes = [
        vec![0.0f64; height * width],
        vec![0.0f64; height * width],
        vec![0.0f64; height * width],
    ];
    for (c, p) in planes.iter_mut().enumerate() {
        for y in 0..height {
            for x in 0..width {
                p[y * width + x] = field.tensor().at(0, c, y, x) as f64;
            }
        }
    }
    paint_shapes(&mut planes, height, width, rng);
    let mut data = Vec::with_capacity(3 * height * width);
    for p in &planes {
        data.extend(p.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
    }
    Image::from_tensor(Tensor::from_vec([1, 3, height, width], data))
}

/// Additive achromatic rain layer: each streak is a capsule (segment with
/// rounded caps) carrying a Gaussian cross-section. Per-streak draw order is
/// fixed: center, length, angle, intensity.
fn render_rain(spec: &FixtureSpec, rng: &mut ChaCha12Rng) -> (Vec<f64>, usize) {
    let (height, width) = (spec.height, spec.width);
    let mut layer = vec![0.0f64; height * width];
    let n = rng.gen_range(spec.streak_count.0..=spec.streak_count.1);
    let sigma = spec.streak_width / 2.0;
    let reach = (3.0 * sigma).ceil() + 1.0;
    for _ in 0..n {
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let len = rng.gen_range(spec.streak_length.0..=spec.streak_length.1);
        let deg = rng.gen_range(spec.streak_angle.0..=spec.streak_angle.1);
        let peak = rng.gen_range(spec.streak_intensity.0..=spec.streak_intensity.1)
            * spec.streak_alpha;
        let theta = deg.to_radians();
        // Angle measured from vertical: dy runs down the image.
        let (dy, dx) = (theta.cos(), theta.sin());
        let (hy, hx) = (dy * len / 2.0, dx * len / 2.0);
        let y0 = ((cy - hy.abs() - reach).floor().max(0.0)) as usize;
        let y1 = (((cy + hy.abs() + reach).ceil()) as usize).min(height);
        let x0 = ((cx - hx.abs() - reach).floor().max(0.0)) as usize;
        let x1 = (((cx + hx.abs() + reach).ceil()) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                // Distance from the pixel center to the segment.
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let t = ((py * dy + px * dx) / (len / 2.0)).clamp(-1.0, 1.0);
                let (sy, sx) = (t * hy, t * hx);
                let d2 = (py - sy).powi(2) + (px - sx).powi(2);
                layer[y * width + x] += peak * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    (layer, n)
}

/// Renders pair `index` of the spec in memory: (clean, rainy, streak count).
/// The rainy member is clamp01(clean + rain); the rain layer is nonnegative,
/// so rainy >= clean pointwise.
pub fn render_pair(spec: &FixtureSpec, index: usize) -> (Image, Image, usize) {
    let mut rng = fixture_rng(spec.seed, index);
    let clean = render_background(spec.height, spec.width, &mut rng);
    let (rain, streaks) = render_rain(spec, &mut rng);
    let ct = clean.tensor();
    let [_, _, h, w] = ct.shape();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for (i, r) in rain.iter().enumerate() {
            let v = ct.data()[c * h * w + i] as f64 + r;
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let rainy = Image::from_tensor(Tensor::from_vec([1, 3, h, w], data));
    (clean, rainy, streaks)
}

/// Writes `clean/`, `rainy/` and `manifest.txt` under `dir`. Pairs share a
/// file name across the two subdirectories; the manifest records the spec and
/// the per-pair rain statistics.
pub fn gen_fixtures(spec: &FixtureSpec, dir: &Path) -> Result<FixtureReport, FixtureError> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| FixtureError::Io { path, source }
    };
    let clean_dir = dir.join("clean");
    let rainy_dir = dir.join("rainy");
    fs::create_dir_all(&clean_dir).map_err(io(&clean_dir))?;
    fs::create_dir_all(&rainy_dir).map_err(io(&rainy_dir))?;

    let mut pairs = Vec::with_capacity(spec.count);
    let mut psnr_sum = 0.0;
    for index in 0..spec.count {
        let (clean, rainy, streaks) = render_pair(spec, index);
        let name = format!("fixture-{index:05}.png");
        save_png(&clean, &clean_dir.join(&name))?;
        save_png(&rainy, &rainy_dir.join(&name))?;
        let psnr_db = psnr(&rainy, &clean);
        psnr_sum += psnr_db;
        pairs.push(FixturePair {
            name,
            psnr_db,
            streaks,
        });
    }
    let mean_psnr_db = psnr_sum / spec.count as f64;

    let mut manifest = String::from("fixtures v1\n");
    let _ = writeln!(
        manifest,
        "count={} height={} width={} seed={}",
        spec.count, spec.height, spec.width, spec.seed
    );
    let _ = writeln!(
        manifest,
        "streaks=({},{}) length=({},{}) width={} angle=({},{}) intensity=({},{}) alpha={}",
        spec.streak_count.0,
        spec.streak_count.1,
        spec.streak_length.0,
        spec.streak_length.1,
        spec.streak_width,
        spec.streak_angle.0,
        spec.streak_angle.1,
        spec.streak_intensity.0,
        spec.streak_intensity.1,
        spec.streak_alpha
    );
    for p in &pairs {
        let _ = writeln!(manifest, "pair {} psnr={:.4} streaks={}", p.name, p.psnr_db, p.streaks);
    }
    let _ = writeln!(manifest, "mean_psnr={mean_psnr_db:.4}");
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(io(&manifest_path))?;

    Ok(FixtureReport {
        pairs,
        mean_psnr_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> FixtureSpec {
        FixtureSpec {
            count: 4,
            height: 48,
            width: 48,
            seed: 7,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn rainy_never_falls_below_clean() {
        for index in 0..4 {
            let (clean, rainy, _) = render_pair(&small_spec(), index);
            for (r, c) in rainy.tensor().data().iter().zip(clean.tensor().data()) {
                assert!(r >= c, "rain subtracted light: {r} < {c}");
            }
        }
    }

    #[test]
    fn zero_streaks_leave_the_image_untouched() {
        let spec = FixtureSpec {
            streak_count: (0, 0),
            ..small_spec()
        };
        let (clean, rainy, streaks) = render_pair(&spec, 0);
        assert_eq!(streaks, 0);
        assert_eq!(clean.tensor(), rainy.tensor());
    }

    #[test]
    fn generation_is_byte_identical_under_a_fixed_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        gen_fixtures(&small_spec(), dir_a.path()).unwrap();
        gen_fixtures(&small_spec(), dir_b.path()).unwrap();
        for sub in ["clean", "rainy"] {
            for index in 0..4 {
                let name = format!("{sub}/fixture-{index:05}.png");
                let a = std::fs::read(dir_a.path().join(&name)).unwrap();
                let b = std::fs::read(dir_b.path().join(&name)).unwrap();
                assert_eq!(a, b, "{name} differs between runs");
            }
        }
        let a = std::fs::read(dir_a.path().join("manifest.txt")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.txt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn each_pair_depends_only_on_its_own_index() {
        // Growing the corpus must not reshuffle earlier pairs.
        let four = small_spec();
        let two = FixtureSpec { count: 2, ..four.clone() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        gen_fixtures(&four, dir_a.path()).unwrap();
        gen_fixtures(&two, dir_b.path()).unwrap();
        for index in 0..2 {
            let name = format!("rainy/fixture-{index:05}.png");
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} changed when the corpus grew");
        }
    }

    #[test]
    fn default_intensities_land_in_the_expected_psnr_band() {
        let spec = FixtureSpec {
            count: 12,
            seed: 3,
            ..FixtureSpec::default()
        };
        let mut sum = 0.0;
        for index in 0..spec.count {
            let (clean, rainy, _) = render_pair(&spec, index);
            sum += psnr(&rainy, &clean);
        }
        let mean = sum / spec.count as f64;
        assert!(
            (18.0..=30.0).contains(&mean),
            "mean rainy-vs-clean PSNR {mean:.2} dB outside 18-30 dB"
        );
    }

    #[test]
    fn contradictory_specs_are_refused() {
        let cases = [
            FixtureSpec { count: 0, ..small_spec() },
            FixtureSpec { height: 8, ..small_spec() },
            FixtureSpec { streak_count: (9, 3), ..small_spec() },
            FixtureSpec { streak_length: (20.0, 10.0), ..small_spec() },
            FixtureSpec { streak_intensity: (-0.2, 0.4), ..small_spec() },
            FixtureSpec { streak_alpha: 1.5, ..small_spec() },
            FixtureSpec { streak_width: 0.0, ..small_spec() },
        ];
        for (i, spec) in cases.iter().enumerate() {
            assert!(
                matches!(gen_fixtures(spec, Path::new("/nonexistent")), Err(FixtureError::Spec(_))),
                "case {i} accepted"
            );
        }
    }
}

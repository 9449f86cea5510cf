//! Label synthesis without annotation: a rainy image is shrunk eight-fold,
//! reconstructed by the frozen upscaler (which cannot reproduce thin streaks),
//! floored against the original, and smoothed with an edge-preserving filter.
//! The output is a blurred rain-free image used as a training label.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{
    bicubic_resize, elementwise_min, guided_filter, load_png, save_png, Image, ImagingError,
};
use crate::srdn::{srdn_forward, SrdnModel, SCALE};

/// Guided-filter window radius used when none is configured.
pub const DEFAULT_RADIUS: usize = 8;
/// Guided-filter regularizer used when none is configured.
pub const DEFAULT_EPS: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("image is {height}x{width}; the x{SCALE} scaling round trip needs at least {SCALE}x{SCALE}")]
    TooSmall { height: usize, width: usize },
    #[error("soft label {path} is not cached and no upscaler was supplied to compute it")]
    MissingLabel { path: PathBuf },
    #[error("label cache {dir} has no parameter record; populate it once with the upscaler available")]
    UnkeyedCache { dir: PathBuf },
    #[error(
        "label cache {dir} was built with {stored:?} but this run wants {wanted:?}; \
         pass the upscaler checkpoint or point at a matching cache"
    )]
    CacheMismatch {
        dir: PathBuf,
        stored: String,
        wanted: String,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("label cache io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which steps of the label synthesis run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Downscale, upscale, floor, then guided-filter.
    Full,
    /// Skip the scaling path entirely: self-guided filter of the input.
    NoScaling,
    /// Skip the guided filter: the floored image itself is the label.
    NoFilter,
}

impl LabelMode {
    pub fn tag(self) -> &'static str {
        match self {
            LabelMode::Full => "full",
            LabelMode::NoScaling => "noscale",
            LabelMode::NoFilter => "nofilter",
        }
    }
}

/// Every intermediate of the label synthesis, kept for inspection.
#[derive(Clone, Debug)]
pub struct SoftLabelBundle {
    /// The rainy input.
    pub rainy: Image,
    /// Bicubic 1/8 downscale; too coarse to retain streaks.
    pub downscaled: Image,
    /// Upscaler reconstruction at full size, blurred and largely rain-free.
    pub upscaled: Image,
    /// Pointwise min of input and reconstruction. Rain is additive, so the
    /// floor strips whatever brightness the reconstruction did not keep.
    pub rain_free: Image,
    /// Guided filter (guide = rain_free, input = rainy): edges restored from
    /// the rainy image, streaks absent from the guide stay suppressed.
    pub label: Image,
}

/// Center-crops to the largest size divisible by the scale factor.
pub fn crop_to_scale_multiple(x: &Image) -> Result<Image, TransformError> {
    let (h, w) = (x.height(), x.width());
    if h < SCALE || w < SCALE {
        return Err(TransformError::TooSmall {
            height: h,
            width: w,
        });
    }
    let (ch, cw) = (h - h % SCALE, w - w % SCALE);
    if (ch, cw) == (h, w) {
        return Ok(x.clone());
    }
    Ok(x.crop((h - ch) / 2, (w - cw) / 2, ch, cw))
}

/// Runs the full synthesis. Dimensions must already be divisible by the
/// scale factor; see [`crop_to_scale_multiple`].
pub fn transform(x: &Image, srdn: &SrdnModel, gf_radius: usize, gf_eps: f64) -> SoftLabelBundle {
    let (h, w) = (x.height(), x.width());
    assert!(
        h % SCALE == 0 && w % SCALE == 0,
        "{h}x{w} is not divisible by {SCALE}; crop first"
    );
    let downscaled = bicubic_resize(x, h / SCALE, w / SCALE);
    let upscaled = Image::from_tensor(srdn_forward(srdn, downscaled.tensor()));
    let rain_free = elementwise_min(x, &upscaled);
    let label = guided_filter(&rain_free, x, gf_radius, gf_eps);
    SoftLabelBundle {
        rainy: x.clone(),
        downscaled,
        upscaled,
        rain_free,
        label,
    }
}

/// Produces the soft label under one of the ablated modes.
pub fn transform_ablated(
    x: &Image,
    srdn: &SrdnModel,
    gf_radius: usize,
    gf_eps: f64,
    mode: LabelMode,
) -> Image {
    match mode {
        LabelMode::Full => transform(x, srdn, gf_radius, gf_eps).label,
        LabelMode::NoScaling => guided_filter(x, x, gf_radius, gf_eps),
        LabelMode::NoFilter => transform(x, srdn, gf_radius, gf_eps).rain_free,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short fingerprint of the upscaler weights, so labels computed with a
/// different pretraining run never alias in the cache.
pub fn srdn_weight_digest(model: &SrdnModel) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in model.named_params() {
        hasher.update(name.as_bytes());
        for &v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())[..16].to_string()
}

/// The parameter record stored alongside cached labels. `upscaler` is "-"
/// for modes that never run it.
pub fn label_params_string(upscaler: &str, gf_radius: usize, gf_eps: f64, mode: LabelMode) -> String {
    format!(
        "v1 radius={gf_radius} eps={gf_eps} upscaler={upscaler} mode={}",
        mode.tag()
    )
}

fn image_digest(x: &Image) -> String {
    let mut hasher = Sha256::new();
    for d in x.tensor().shape() {
        hasher.update((d as u64).to_le_bytes());
    }
    for &v in x.tensor().data() {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())[..32].to_string()
}

/// Token-wise equality of two parameter records, treating the upscaler
/// digest as a wildcard.
fn params_compatible(stored: &str, wanted: &str) -> bool {
    let stored: Vec<&str> = stored.split(' ').collect();
    let wanted: Vec<&str> = wanted.split(' ').collect();
    stored.len() == wanted.len()
        && stored.iter().zip(&wanted).all(|(s, w)| {
            s == w || (s.starts_with("upscaler=") && w.starts_with("upscaler="))
        })
}

fn cache_file_name(source: &Image, params: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image_digest(source).as_bytes());
    hasher.update(params.as_bytes());
    format!("{}.png", &hex(&hasher.finalize())[..32])
}

/// Fetches the soft label for `source` from the cache, computing and storing
/// it on a miss. Labels live as 8-bit PNGs, so a computed label is reloaded
/// through the same quantization before being returned; hits and misses give
/// bitwise-identical results.
///
/// The upscaler is optional: with a warm cache (and its parameter record)
/// training can run without the pretraining checkpoint at all.
pub fn cached_soft_label(
    cache_dir: &Path,
    source: &Image,
    srdn: Option<&SrdnModel>,
    gf_radius: usize,
    gf_eps: f64,
    mode: LabelMode,
) -> Result<Image, TransformError> {
    fs::create_dir_all(cache_dir)?;
    let params_path = cache_dir.join("cache-params.txt");
    let params = if mode == LabelMode::NoScaling {
        label_params_string("-", gf_radius, gf_eps, mode)
    } else if let Some(model) = srdn {
        label_params_string(&srdn_weight_digest(model), gf_radius, gf_eps, mode)
    } else {
        // Warm-cache path: the stored record supplies the upscaler digest,
        // but everything else must agree with what this run asked for.
        let stored = match fs::read_to_string(&params_path) {
            Ok(s) => s.trim_end().to_string(),
            Err(_) => {
                return Err(TransformError::UnkeyedCache {
                    dir: cache_dir.to_path_buf(),
                })
            }
        };
        let wanted = label_params_string("<any>", gf_radius, gf_eps, mode);
        if !params_compatible(&stored, &wanted) {
            return Err(TransformError::CacheMismatch {
                dir: cache_dir.to_path_buf(),
                stored,
                wanted,
            });
        }
        stored
    };
    if fs::read_to_string(&params_path).ok().as_deref() != Some(&params) {
        fs::write(&params_path, &params)?;
    }
    let path = cache_dir.join(cache_file_name(source, &params));
    if path.exists() {
        return Ok(load_png(&path)?);
    }
    let label = match (mode, srdn) {
        (LabelMode::NoScaling, _) => guided_filter(source, source, gf_radius, gf_eps),
        (_, Some(model)) => transform_ablated(source, model, gf_radius, gf_eps, mode),
        (_, None) => return Err(TransformError::MissingLabel { path }),
    };
    save_png(&label, &path)?;
    Ok(load_png(&path)?)
}

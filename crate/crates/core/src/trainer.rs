//! The two-stage training loop: a warm-up phase fits the residual network to
//! blurred soft labels alone; afterwards every step also transplants the
//! current rain estimate onto a random clean image and asks the base network
//! to take it back off. Includes Adam, the constant-then-linear learning-rate
//! ramp, deterministic batch sampling, and bit-exact checkpointing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::derain::{DerainModel, DetailBlock};
use crate::imaging::{load_png, Image, ImagingError};
use crate::metrics::{ssim_loss, SsimParams};
use crate::nn::{add_eager, clamp01_eager};
use crate::srdn::SrdnModel;
use crate::tensor::{Tape, Tensor};
use crate::transform::{cached_soft_label, crop_to_scale_multiple, LabelMode, TransformError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is not a valid checkpoint: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path} fails its content checksum; the file is corrupt")]
    Checksum { path: PathBuf },
    #[error("{path} has no parameter named {name}")]
    MissingParam { path: PathBuf, name: String },
    #[error("{path}: parameter {name} has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        path: PathBuf,
        name: String,
        got: [usize; 4],
        want: [usize; 4],
    },
    #[error("non-finite loss at epoch {epoch} step {step}; offending batch indices {indices:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        indices: Vec<usize>,
    },
    #[error("{dir} contains no PNG images")]
    EmptyCorpus { dir: PathBuf },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug)]
struct AdamSlot {
    name: String,
    m: Tensor<f32>,
    v: Tensor<f32>,
}


/// Adam with one first/second-moment pair per named parameter. The slot set
/// is fixed by the first step; every later step must present the same names
/// in the same order.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    slots: Vec<AdamSlot>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            slots: Vec::new(),
        }
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update over (name, parameter, gradient) triples. A `None`
    /// gradient leaves that parameter and its moments untouched (its branch
    /// was not part of this step's graph).
    pub fn step(&mut self, lr: f64, updates: &mut [(String, &mut Tensor<f32>, Option<&Tensor<f32>>)]) {
        if self.slots.is_empty() {
            self.slots = updates
                .iter()
                .map(|(name, p, _)| AdamSlot {
                    name: name.clone(),
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect();
        }
        assert_eq!(self.slots.len(), updates.len(), "optimizer slot set changed");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (r1, r2) = ((1.0 - self.beta1) as f32, (1.0 - self.beta2) as f32);
        let (inv1, inv2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
        let (lr32, eps32) = (lr as f32, self.epsilon as f32);
        for (slot, (name, param, grad)) in self.slots.iter_mut().zip(updates) {
            assert_eq!(&slot.name, name, "optimizer slots out of order");
            let Some(g) = grad else { continue };
            assert_eq!(g.shape(), param.shape(), "gradient shape mismatch for {name}");
            let p = param.data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + r1 * gi;
                v[i] = b2 * v[i] + r2 * gi * gi;
                p[i] -= lr32 * (m[i] * inv1) / ((v[i] * inv2).sqrt() + eps32);
            }
        }
    }

    /// Moment tensors under stable names, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for s in &self.slots {
            out.push((format!("adam.m/{}", s.name), &s.m));
        }
        for s in &self.slots {
            out.push((format!("adam.v/{}", s.name), &s.v));
        }
        out
    }

    /// Rebuilds the optimizer mid-run from checkpointed moments.
    pub fn restore(steps: u64, slots: Vec<(String, Tensor<f32>, Tensor<f32>)>) -> Adam {
        Adam {
            steps,
            slots: slots
                .into_iter()
                .map(|(name, m, v)| AdamSlot { name, m, v })
                .collect(),
            ..Adam::new()
        }
    }
}

impl Clone for Adam {
    fn clone(&self) -> Self {
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            steps: self.steps,
            slots: self
                .slots
                .iter()
                .map(|s| AdamSlot {
                    name: s.name.clone(),
                    m: s.m.clone(),
                    v: s.v.clone(),
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file format
//
// Text header, binary payload, trailing checksum:
//
//   drckpt 1\n
//   d <key>=<escaped value>\n        (descriptor block, repeated)
//   t <name> 4 <d0> <d1> <d2> <d3> <byte offset>\n   (parameter table)
//   payload <byte length>\n
//   <little-endian f32 payload>
//   \nsha256 <hex digest of everything above>\n

const CHECKPOINT_MAGIC: &str = "drckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parsed or to-be-written checkpoint: an ordered descriptor (epoch,
/// topology, config snapshot) plus ordered named parameter tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub descriptor: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn escape_value(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

impl Checkpoint {
    pub fn descriptor_value(&self, key: &str) -> Option<&str> {
        self.descriptor
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.descriptor {
            assert!(
                !k.is_empty() && !k.contains(['=', '\n', ' ']),
                "bad descriptor key {k:?}"
            );
            head.push_str(&format!("d {k}={}\n", escape_value(v)));
        }
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.params {
            assert!(
                !name.is_empty() && !name.contains([' ', '\n']),
                "bad parameter name {name:?}"
            );
            let [a, b, c, d] = t.shape();
            head.push_str(&format!("t {name} 4 {a} {b} {c} {d} {}\n", payload.len()));
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.push_str(&format!("payload {}\n", payload.len()));
        let mut bytes = head.into_bytes();
        bytes.extend_from_slice(&payload);
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        bytes.extend_from_slice(format!("\nsha256 {hex}\n").as_bytes());
        bytes
    }

    /// Writes atomically: a sibling temp file is renamed into place, so a
    /// crash never leaves a half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(io_err(path))?;
            }
        }
        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".to_string());
        let tmp = path.with_file_name(format!("{file_name}.tmp"));
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainerError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let bad = |reason: &str| TrainerError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String, TrainerError> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not utf-8"))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };

        let magic = next_line(&mut pos)?;
        if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(&format!("unrecognized magic line {magic:?}")));
        }
        let mut descriptor = Vec::new();
        let mut table: Vec<(String, [usize; 4], usize)> = Vec::new();
        let payload_len;
        loop {
            let line = next_line(&mut pos)?;
            if let Some(entry) = line.strip_prefix("d ") {
                let (k, v) = entry
                    .split_once('=')
                    .ok_or_else(|| bad("descriptor entry without '='"))?;
                descriptor.push((k.to_string(), unescape_value(v)));
            } else if let Some(entry) = line.strip_prefix("t ") {
                let fields: Vec<&str> = entry.split(' ').collect();
                if fields.len() != 7 || fields[1] != "4" {
                    return Err(bad(&format!("malformed table entry {line:?}")));
                }
                let mut dims = [0usize; 4];
                for (d, f) in dims.iter_mut().zip(&fields[2..6]) {
                    *d = f.parse().map_err(|_| bad("non-numeric dimension"))?;
                }
                let off = fields[6].parse().map_err(|_| bad("non-numeric offset"))?;
                table.push((fields[0].to_string(), dims, off));
            } else if let Some(len) = line.strip_prefix("payload ") {
                payload_len = len
                    .parse::<usize>()
                    .map_err(|_| bad("non-numeric payload length"))?;
                break;
            } else {
                return Err(bad(&format!("unexpected header line {line:?}")));
            }
        }
        if bytes.len() < pos + payload_len {
            return Err(bad("payload shorter than declared"));
        }
        let payload = &bytes[pos..pos + payload_len];
        let checked = pos + payload_len;

        let digest = Sha256::digest(&bytes[..checked]);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let trailer = std::str::from_utf8(&bytes[checked..])
            .map_err(|_| bad("trailer is not utf-8"))?;
        let claimed = trailer
            .strip_prefix("\nsha256 ")
            .and_then(|t| t.strip_suffix('\n'))
            .ok_or_else(|| bad("missing checksum trailer"))?;
        if claimed.len() != 64 || !claimed.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad("malformed checksum trailer"));
        }
        if claimed != hex {
            return Err(TrainerError::Checksum {
                path: path.to_path_buf(),
            });
        }

        let mut params = Vec::with_capacity(table.len());
        for (name, dims, off) in table {
            let numel: usize = dims.iter().product();
            let end = off + numel * 4;
            if end > payload_len {
                return Err(bad(&format!("parameter {name} extends past the payload")));
            }
            let data: Vec<f32> = payload[off..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push((name, Tensor::from_vec(dims, data)));
        }
        Ok(Checkpoint { descriptor, params })
    }
}

/// Packs model parameters plus optimizer state into a checkpoint value.
pub fn build_checkpoint(
    topology: &str,
    model_params: &[(String, &Tensor<f32>)],
    adam: &Adam,
    epochs_completed: usize,
    config_entries: &[(String, String)],
) -> Checkpoint {
    let mut descriptor = vec![
        ("topology".to_string(), topology.to_string()),
        ("epochs_completed".to_string(), epochs_completed.to_string()),
        ("adam_steps".to_string(), adam.steps().to_string()),
    ];
    for (k, v) in config_entries {
        descriptor.push((format!("config.{k}"), v.clone()));
    }
    let mut params: Vec<(String, Tensor<f32>)> = model_params
        .iter()
        .map(|(n, t)| (n.clone(), (*t).clone()))
        .collect();
    for (name, t) in adam.state_tensors() {
        params.push((name, t.clone()));
    }
    Checkpoint { descriptor, params }
}

fn restore_params(
    ck: &Checkpoint,
    path: &Path,
    params: Vec<(String, &mut Tensor<f32>)>,
) -> Result<(), TrainerError> {
    for (name, t) in params {
        let src = ck.param(&name).ok_or_else(|| TrainerError::MissingParam {
            path: path.to_path_buf(),
            name: name.clone(),
        })?;
        if src.shape() != t.shape() {
            return Err(TrainerError::ShapeMismatch {
                path: path.to_path_buf(),
                name,
                got: src.shape(),
                want: t.shape(),
            });
        }
        *t = src.clone();
    }
    Ok(())
}

fn restore_adam(ck: &Checkpoint, path: &Path, names: &[String]) -> Result<Adam, TrainerError> {
    let present = names
        .iter()
        .filter(|n| ck.param(&format!("adam.m/{n}")).is_some())
        .count();
    if present == 0 {
        return Ok(Adam::new());
    }
    if present != names.len() {
        return Err(TrainerError::Format {
            path: path.to_path_buf(),
            reason: "partial optimizer state".to_string(),
        });
    }
    let steps = ck
        .descriptor_value("adam_steps")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainerError::Format {
            path: path.to_path_buf(),
            reason: "missing or malformed adam_steps".to_string(),
        })?;
    let mut slots = Vec::with_capacity(names.len());
    for n in names {
        let fetch = |prefix: &str| -> Result<Tensor<f32>, TrainerError> {
            ck.param(&format!("{prefix}/{n}"))
                .cloned()
                .ok_or_else(|| TrainerError::MissingParam {
                    path: path.to_path_buf(),
                    name: format!("{prefix}/{n}"),
                })
        };
        slots.push((n.clone(), fetch("adam.m")?, fetch("adam.v")?));
    }
    Ok(Adam::restore(steps, slots))
}

fn check_topology(ck: &Checkpoint, path: &Path, want: &str) -> Result<(), TrainerError> {
    match ck.descriptor_value("topology") {
        Some(t) if t == want => Ok(()),
        Some(t) => Err(TrainerError::Format {
            path: path.to_path_buf(),
            reason: format!("holds a {t:?} model, expected {want:?}"),
        }),
        None => Err(TrainerError::Format {
            path: path.to_path_buf(),
            reason: "missing topology descriptor".to_string(),
        }),
    }
}

fn epochs_completed_of(ck: &Checkpoint, path: &Path) -> Result<usize, TrainerError> {
    ck.descriptor_value("epochs_completed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainerError::Format {
            path: path.to_path_buf(),
            reason: "missing or malformed epochs_completed".to_string(),
        })
}

pub const DERAIN_TOPOLOGY: &str = "derain+detail";
pub const SRDN_TOPOLOGY: &str = "srdn";

pub struct DerainState {
    pub model: DerainModel,
    pub detail: DetailBlock,
    pub adam: Adam,
    pub epochs_completed: usize,
}

pub fn save_derain_checkpoint(
    path: &Path,
    model: &DerainModel,
    detail: &DetailBlock,
    adam: &Adam,
    epochs_completed: usize,
    config: &TrainConfig,
) -> Result<(), TrainerError> {
    let mut params = model.named_params();
    params.extend(detail.named_params());
    build_checkpoint(
        DERAIN_TOPOLOGY,
        &params,
        adam,
        epochs_completed,
        &config.descriptor_entries(),
    )
    .save(path)
}

pub fn load_derain_checkpoint(path: &Path) -> Result<DerainState, TrainerError> {
    let ck = Checkpoint::load(path)?;
    check_topology(&ck, path, DERAIN_TOPOLOGY)?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut model = DerainModel::new(&mut rng);
    let mut detail = DetailBlock::new(&mut rng);
    restore_params(&ck, path, model.params_mut())?;
    restore_params(&ck, path, detail.params_mut())?;
    let names: Vec<String> = model
        .params_mut()
        .into_iter()
        .map(|(n, _)| n)
        .chain(detail.params_mut().into_iter().map(|(n, _)| n))
        .collect();
    let adam = restore_adam(&ck, path, &names)?;
    let epochs_completed = epochs_completed_of(&ck, path)?;
    Ok(DerainState {
        model,
        detail,
        adam,
        epochs_completed,
    })
}

pub struct SrdnState {
    pub model: SrdnModel,
    pub adam: Adam,
    pub epochs_completed: usize,
}

pub fn save_srdn_checkpoint(
    path: &Path,
    model: &SrdnModel,
    adam: &Adam,
    epochs_completed: usize,
    config_entries: &[(String, String)],
) -> Result<(), TrainerError> {
    build_checkpoint(
        SRDN_TOPOLOGY,
        &model.named_params(),
        adam,
        epochs_completed,
        config_entries,
    )
    .save(path)
}

pub fn load_srdn_checkpoint(path: &Path) -> Result<SrdnState, TrainerError> {
    let ck = Checkpoint::load(path)?;
    check_topology(&ck, path, SRDN_TOPOLOGY)?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut model = SrdnModel::new(&mut rng);
    restore_params(&ck, path, model.params_mut())?;
    let names: Vec<String> = model.params_mut().into_iter().map(|(n, _)| n).collect();
    let adam = restore_adam(&ck, path, &names)?;
    let epochs_completed = epochs_completed_of(&ck, path)?;
    Ok(SrdnState {
        model,
        adam,
        epochs_completed,
    })
}

// ---------------------------------------------------------------------------
// Configuration and schedule

/// Training configuration. Defaults are the desk-scale schedule; the paper-
/// scale values (batch 8, patch 256, 10k epochs) remain expressible.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_epochs: usize,
    /// Epochs trained on the soft objective alone before feedback starts.
    pub soft_only_epochs: usize,
    pub lr_initial: f64,
    pub batch: usize,
    /// Square patch side; must be divisible by 8 so labels stay on the
    /// scaling grid.
    pub patch: usize,
    /// Weight of the hard objective in the combined loss.
    pub alpha: f32,
    pub seed: u64,
    pub rainy_dir: PathBuf,
    pub clean_dir: PathBuf,
    pub label_cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Upscaler weights for computing soft labels on cache misses.
    pub srdn_checkpoint: Option<PathBuf>,
    /// A numbered checkpoint is written every this many epochs.
    pub checkpoint_every: usize,
    pub gf_radius: usize,
    pub gf_eps: f64,
    pub no_scaling: bool,
    pub no_filter: bool,
    pub no_feedback: bool,
    pub no_detail: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 600,
            soft_only_epochs: 100,
            lr_initial: 2e-4,
            batch: 4,
            patch: 96,
            alpha: 4.0,
            seed: 0,
            rainy_dir: PathBuf::new(),
            clean_dir: PathBuf::new(),
            label_cache_dir: PathBuf::new(),
            checkpoint_dir: PathBuf::new(),
            srdn_checkpoint: None,
            checkpoint_every: 100,
            gf_radius: crate::transform::DEFAULT_RADIUS,
            gf_eps: crate::transform::DEFAULT_EPS,
            no_scaling: false,
            no_filter: false,
            no_feedback: false,
            no_detail: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let fail = |m: String| Err(TrainerError::Config(m));
        if self.total_epochs < 2 {
            return fail(format!(
                "total_epochs = {} but the schedule needs at least 2",
                self.total_epochs
            ));
        }
        if self.soft_only_epochs >= self.total_epochs {
            return fail(format!(
                "soft_only_epochs = {} must be less than total_epochs = {}",
                self.soft_only_epochs, self.total_epochs
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha = {} must be finite and >= 0", self.alpha));
        }
        if self.patch == 0 || self.patch % 8 != 0 {
            return fail(format!("patch = {} must be a positive multiple of 8", self.patch));
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".to_string());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return fail(format!("lr_initial = {} must be finite and positive", self.lr_initial));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1".to_string());
        }
        if self.no_scaling && self.no_filter {
            return fail("no_scaling and no_filter are mutually exclusive label ablations".to_string());
        }
        Ok(())
    }

    /// Which label synthesis the ablation flags select.
    pub fn label_mode(&self) -> LabelMode {
        if self.no_scaling {
            LabelMode::NoScaling
        } else if self.no_filter {
            LabelMode::NoFilter
        } else {
            LabelMode::Full
        }
    }

    /// Snapshot entries stored in checkpoints and run manifests.
    pub fn descriptor_entries(&self) -> Vec<(String, String)> {
        vec![
            ("total_epochs".into(), self.total_epochs.to_string()),
            ("soft_only_epochs".into(), self.soft_only_epochs.to_string()),
            ("lr_initial".into(), self.lr_initial.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("rainy_dir".into(), self.rainy_dir.display().to_string()),
            ("clean_dir".into(), self.clean_dir.display().to_string()),
            (
                "label_cache_dir".into(),
                self.label_cache_dir.display().to_string(),
            ),
            (
                "checkpoint_dir".into(),
                self.checkpoint_dir.display().to_string(),
            ),
            (
                "srdn_checkpoint".into(),
                self.srdn_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("gf_radius".into(), self.gf_radius.to_string()),
            ("gf_eps".into(), self.gf_eps.to_string()),
            ("no_scaling".into(), self.no_scaling.to_string()),
            ("no_filter".into(), self.no_filter.to_string()),
            ("no_feedback".into(), self.no_feedback.to_string()),
            ("no_detail".into(), self.no_detail.to_string()),
        ]
    }
}

/// Learning rate at a given epoch: constant for the first half of the run,
/// then a linear ramp down to zero.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    assert!(epoch < config.total_epochs, "epoch out of schedule");
    let half = config.total_epochs / 2;
    if epoch <= half {
        config.lr_initial
    } else {
        config.lr_initial * (1.0 - (epoch - half) as f64 / half as f64)
    }
}

// ---------------------------------------------------------------------------
// One optimizer step

/// Per-step record emitted on the log stream.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub soft_loss: f64,
    /// Absent during warm-up and under the no_feedback ablation.
    pub hard_loss: Option<f64>,
    pub total_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let hard = match self.hard_loss {
            Some(h) => format!(" hard={h:.6}"),
            None => String::new(),
        };
        format!(
            "epoch={} step={} soft={:.6}{hard} total={:.6} lr={:.3e} wall_s={:.3}",
            self.epoch, self.step, self.soft_loss, self.total_loss, self.lr, self.wall_seconds
        )
    }
}

pub(crate) fn non_finite_members(tensors: &[&Tensor<f32>]) -> Vec<usize> {
    let mut out = Vec::new();
    for t in tensors {
        let [b, c, h, w] = t.shape();
        let per = c * h * w;
        for i in 0..b {
            if t.data()[i * per..(i + 1) * per]
                .iter()
                .any(|v| !v.is_finite())
                && !out.contains(&i)
            {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Runs one combined-objective step and applies a single Adam update over the
/// base network and detail block jointly.
///
/// The residual estimate from the soft path doubles as the rain layer for the
/// feedback pair. It enters that second pass detached: the hard objective
/// trains the base network on the synthesized pair, it does not get to shrink
/// the residual that built the pair.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut DerainModel,
    detail: &mut DetailBlock,
    adam: &mut Adam,
    x_batch: &Tensor<f32>,
    label_batch: &Tensor<f32>,
    clean_batch: &Tensor<f32>,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<StepReport, TrainerError> {
    let started = Instant::now();
    assert_eq!(x_batch.shape(), label_batch.shape(), "label batch shape mismatch");
    assert_eq!(x_batch.shape(), clean_batch.shape(), "clean batch shape mismatch");
    let poisoned = non_finite_members(&[x_batch, label_batch, clean_batch]);
    if !poisoned.is_empty() {
        return Err(TrainerError::NonFiniteLoss {
            epoch,
            step,
            indices: poisoned,
        });
    }
    let lr = lr_at(epoch, config);
    let feedback_on = epoch >= config.soft_only_epochs && !config.no_feedback;

    let (soft, hard, total, grads, vars) = {
        let mut tape: Tape<f32> = Tape::new();
        let vx = tape.constant(x_batch.clone());
        let vlabel = tape.constant(label_batch.clone());
        let bound = model.bind(&mut tape, true);
        let bound_detail = detail.bind(&mut tape, true);
        let ssim = SsimParams::default();

        let residual = bound.forward(&mut tape, vx);
        let residual_used = if config.no_detail {
            residual
        } else {
            bound_detail.apply(&mut tape, residual)
        };
        let restored = tape.sub(vx, residual_used);
        let soft_loss = ssim_loss(&mut tape, restored, vlabel, &ssim);

        let (loss, hard_loss) = if feedback_on {
            let vclean = tape.constant(clean_batch.clone());
            let rain = tape.detach(residual_used);
            let synthetic = {
                let sum = tape.add(vclean, rain);
                tape.clamp01(sum)
            };
            // The feedback pass uses the base network alone; the detail block
            // exists to absorb soft-label blur, not to help here.
            let second = bound.forward(&mut tape, synthetic);
            let recovered = tape.sub(synthetic, second);
            let hl = ssim_loss(&mut tape, recovered, vclean, &ssim);
            let scaled = tape.scale(hl, config.alpha);
            (tape.add(soft_loss, scaled), Some(hl))
        } else {
            (soft_loss, None)
        };

        let total = tape.value(loss).item() as f64;
        if !total.is_finite() {
            let indices = non_finite_members(&[
                x_batch,
                label_batch,
                clean_batch,
                tape.value(residual_used),
            ]);
            return Err(TrainerError::NonFiniteLoss {
                epoch,
                step,
                indices,
            });
        }
        let grads = tape.backward(loss);
        let mut vars = bound.leaf_vars();
        vars.extend(bound_detail.leaf_vars());
        (
            tape.value(soft_loss).item() as f64,
            hard_loss.map(|h| tape.value(h).item() as f64),
            total,
            grads,
            vars,
        )
    };

    let mut named = model.params_mut();
    named.extend(detail.params_mut());
    assert_eq!(named.len(), vars.len());
    let mut updates: Vec<(String, &mut Tensor<f32>, Option<&Tensor<f32>>)> = named
        .into_iter()
        .zip(&vars)
        .map(|((name, p), &v)| (name, p, grads.get(v)))
        .collect();
    adam.step(lr, &mut updates);

    Ok(StepReport {
        epoch,
        step,
        soft_loss: soft,
        hard_loss: hard,
        total_loss: total,
        lr,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Builds one hard-labeled pair: the enhanced residual extracted from `x` is
/// added onto the clean image, clamped into range. With zero-weight models
/// the synthetic image equals the clean one exactly.
pub fn synthesize_pair(
    model: &DerainModel,
    detail: &DetailBlock,
    x: &Image,
    c: &Image,
) -> (Image, Image) {
    assert_eq!(
        (x.height(), x.width()),
        (c.height(), c.width()),
        "clean image must be cropped to the rainy image's size"
    );
    let residual = model.forward_eager(x.tensor());
    let enhanced = detail.apply_eager(&residual);
    let d = clamp01_eager(&add_eager(c.tensor(), &enhanced));
    (Image::from_tensor(d), c.clone())
}

// ---------------------------------------------------------------------------
// The epoch loop

/// Loads every PNG in a directory, sorted by file name so corpus order never
/// depends on the directory's physical layout.
pub fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, Image)>, TrainerError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(TrainerError::EmptyCorpus {
            dir: dir.to_path_buf(),
        });
    }
    paths
        .into_iter()
        .map(|p| load_png(&p).map(|im| (p, im)).map_err(TrainerError::from))
        .collect()
}

/// Independent per-epoch randomness: resuming at epoch k replays exactly the
/// batches an uninterrupted run would have drawn.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..21].copy_from_slice(b"epoch");
    ChaCha12Rng::from_seed(key)
}

pub(crate) fn stack_images(parts: &[Image]) -> Tensor<f32> {
    let [_, c, h, w] = parts[0].tensor().shape();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        assert_eq!(p.tensor().shape(), [1, c, h, w]);
        data.extend_from_slice(p.tensor().data());
    }
    Tensor::from_vec([parts.len(), c, h, w], data)
}

/// Runs the full schedule and returns the final checkpoint (also written to
/// `checkpoint_dir/derain-final.ckpt`). `resume_from` continues a previous
/// run bit-exactly; `on_step` receives every step report.
pub fn train(
    config: &TrainConfig,
    resume_from: Option<&Path>,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<Checkpoint, TrainerError> {
    config.validate()?;
    let patch = config.patch;

    let rainy_named = load_corpus(&config.rainy_dir)?;
    let mut rainy = Vec::with_capacity(rainy_named.len());
    for (path, im) in &rainy_named {
        let cropped = crop_to_scale_multiple(im)
            .map_err(|e| TrainerError::Config(format!("{}: {e}", path.display())))?;
        if cropped.height() < patch || cropped.width() < patch {
            return Err(TrainerError::Config(format!(
                "{}: {}x{} is smaller than the {patch}px patch",
                path.display(),
                cropped.height(),
                cropped.width()
            )));
        }
        rainy.push(cropped);
    }
    let clean_named = load_corpus(&config.clean_dir)?;
    for (path, im) in &clean_named {
        if im.height() < patch || im.width() < patch {
            return Err(TrainerError::Config(format!(
                "{}: {}x{} is smaller than the {patch}px patch",
                path.display(),
                im.height(),
                im.width()
            )));
        }
    }
    let clean: Vec<Image> = clean_named.into_iter().map(|(_, im)| im).collect();

    let srdn = config
        .srdn_checkpoint
        .as_deref()
        .map(load_srdn_checkpoint)
        .transpose()?
        .map(|s| s.model);
    let mode = config.label_mode();
    let mut labels = Vec::with_capacity(rainy.len());
    for im in &rainy {
        labels.push(cached_soft_label(
            &config.label_cache_dir,
            im,
            srdn.as_ref(),
            config.gf_radius,
            config.gf_eps,
            mode,
        )?);
    }

    let (mut model, mut detail, mut adam, start_epoch) = match resume_from {
        Some(path) => {
            let state = load_derain_checkpoint(path)?;
            if state.epochs_completed >= config.total_epochs {
                return Err(TrainerError::Config(format!(
                    "{} already covers all {} epochs",
                    path.display(),
                    config.total_epochs
                )));
            }
            (state.model, state.detail, state.adam, state.epochs_completed)
        }
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            let model = DerainModel::new(&mut rng);
            let detail = DetailBlock::new(&mut rng);
            (model, detail, Adam::new(), 0)
        }
    };

    fs::create_dir_all(&config.checkpoint_dir).map_err(io_err(&config.checkpoint_dir))?;
    for epoch in start_epoch..config.total_epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..rainy.len()).collect();
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(config.batch).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            let mut cs = Vec::with_capacity(chunk.len());
            // Draw order per sample is fixed: patch corner, then the clean
            // image and its corner. Changing it changes every run.
            for &i in chunk {
                let (h, w) = (rainy[i].height(), rainy[i].width());
                let oy = rng.gen_range(0..=h - patch);
                let ox = rng.gen_range(0..=w - patch);
                xs.push(rainy[i].crop(oy, ox, patch, patch));
                ys.push(labels[i].crop(oy, ox, patch, patch));
                let j = rng.gen_range(0..clean.len());
                let (ch, cw) = (clean[j].height(), clean[j].width());
                let cy = rng.gen_range(0..=ch - patch);
                let cx = rng.gen_range(0..=cw - patch);
                cs.push(clean[j].crop(cy, cx, patch, patch));
            }
            let report = training_step(
                &mut model,
                &mut detail,
                &mut adam,
                &stack_images(&xs),
                &stack_images(&ys),
                &stack_images(&cs),
                config,
                epoch,
                step,
            )?;
            on_step(&report);
        }
        let completed = epoch + 1;
        if completed % config.checkpoint_every == 0 && completed < config.total_epochs {
            save_derain_checkpoint(
                &config.checkpoint_dir.join(format!("derain-epoch{completed:05}.ckpt")),
                &model,
                &detail,
                &adam,
                completed,
                config,
            )?;
        }
    }

    let mut params = model.named_params();
    params.extend(detail.named_params());
    let final_ck = build_checkpoint(
        DERAIN_TOPOLOGY,
        &params,
        &adam,
        config.total_epochs,
        &config.descriptor_entries(),
    );
    final_ck.save(&config.checkpoint_dir.join("derain-final.ckpt"))?;
    Ok(final_ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png;

    fn test_config() -> TrainConfig {
        TrainConfig {
            total_epochs: 4,
            soft_only_epochs: 1,
            batch: 2,
            patch: 16,
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    fn image_batch(seed: u64, b: usize) -> Tensor<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::uniform([b, 3, 16, 16], 0.05, 0.95, &mut rng)
    }

    fn fresh_models(seed: u64) -> (DerainModel, DetailBlock) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (DerainModel::new(&mut rng), DetailBlock::new(&mut rng))
    }

    fn param_bits(model: &DerainModel, detail: &DetailBlock) -> Vec<Vec<u32>> {
        model
            .named_params()
            .into_iter()
            .chain(detail.named_params())
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn learning_rate_holds_then_ramps_to_zero() {
        let config = TrainConfig {
            total_epochs: 600,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &config), 2e-4);
        assert_eq!(lr_at(299, &config), 2e-4);
        assert_eq!(lr_at(300, &config), 2e-4);
        let last = lr_at(599, &config);
        assert!((last - 2e-4 / 300.0).abs() < 1e-12);
        for e in 301..600 {
            assert!(lr_at(e, &config) < lr_at(e - 1, &config));
        }
    }

    #[test]
    #[should_panic(expected = "out of schedule")]
    fn learning_rate_outside_the_schedule_panics() {
        let config = test_config();
        lr_at(4, &config);
    }

    #[test]
    fn configuration_contradictions_are_rejected() {
        let ok = test_config();
        assert!(ok.validate().is_ok());
        let cases: Vec<(&str, TrainConfig)> = vec![
            (
                "warm-up too long",
                TrainConfig {
                    soft_only_epochs: 4,
                    ..test_config()
                },
            ),
            (
                "patch off the grid",
                TrainConfig {
                    patch: 90,
                    ..test_config()
                },
            ),
            (
                "negative alpha",
                TrainConfig {
                    alpha: -1.0,
                    ..test_config()
                },
            ),
            (
                "both label ablations",
                TrainConfig {
                    no_scaling: true,
                    no_filter: true,
                    ..test_config()
                },
            ),
            (
                "zero batch",
                TrainConfig {
                    batch: 0,
                    ..test_config()
                },
            ),
        ];
        for (what, config) in cases {
            assert!(
                matches!(config.validate(), Err(TrainerError::Config(_))),
                "{what} accepted"
            );
        }
    }

    #[test]
    fn adam_moves_by_the_step_size_under_a_constant_gradient() {
        // With a constant gradient the bias corrections cancel exactly:
        // m_hat = g and v_hat = g*g every step, so each update is
        // lr * g / (|g| + eps), i.e. very nearly lr * sign(g).
        let mut adam = Adam::new();
        let mut p = Tensor::from_vec([1, 1, 1, 1], vec![1.0f32]);
        let mut q = Tensor::from_vec([1, 1, 1, 1], vec![5.0f32]);
        let g = Tensor::from_vec([1, 1, 1, 1], vec![0.5f32]);
        for _ in 0..3 {
            let mut updates = vec![
                ("p".to_string(), &mut p, Some(&g)),
                ("q".to_string(), &mut q, None),
            ];
            adam.step(0.125, &mut updates);
        }
        assert_eq!(adam.steps(), 3);
        assert!((p.item() - (1.0 - 3.0 * 0.125)).abs() < 1e-5, "{}", p.item());
        // The gradient-free parameter and its moments never move.
        assert_eq!(q.item(), 5.0);
        assert!(adam.state_tensors()[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ckpt");
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let awkward = vec![0.0f32, -0.0, 1.5e-38, f32::MIN_POSITIVE, -3.25e7];
        let ck = Checkpoint {
            descriptor: vec![
                ("topology".into(), "demo".into()),
                ("note".into(), "line one\nline two = a\\b".into()),
            ],
            params: vec![
                ("a.weight".into(), Tensor::uniform([2, 3, 4, 5], -2.0, 2.0, &mut rng)),
                ("a.bias".into(), Tensor::from_vec([1, 5, 1, 1], awkward)),
            ],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.descriptor, ck.descriptor);
        assert_eq!(back.params.len(), 2);
        for ((n0, t0), (n1, t1)) in ck.params.iter().zip(&back.params) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let same = t0
                .data()
                .iter()
                .zip(t1.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{n0} changed across the round trip");
        }
    }

    #[test]
    fn tampered_checkpoints_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ck = Checkpoint {
            descriptor: vec![("topology".into(), "demo".into())],
            params: vec![("w".into(), Tensor::full([1, 1, 2, 2], 0.25))],
        };
        ck.save(&path).unwrap();
        let pristine = fs::read(&path).unwrap();

        // Flip one payload byte: checksum mismatch.
        let mut bent = pristine.clone();
        let idx = bent.len() - 80;
        bent[idx] ^= 0x40;
        fs::write(&path, &bent).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainerError::Checksum { .. })
        ));

        // Truncate: structural failure.
        fs::write(&path, &pristine[..pristine.len() - 10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainerError::Format { .. })
        ));

        // Wrong magic: refused before anything else.
        let mut wrong = pristine.clone();
        wrong[0] = b'x';
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainerError::Format { .. })
        ));
    }

    #[test]
    fn trained_state_survives_checkpointing_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let (mut model, mut detail) = fresh_models(17);
        let mut adam = Adam::new();
        let config = test_config();
        training_step(
            &mut model,
            &mut detail,
            &mut adam,
            &image_batch(1, 2),
            &image_batch(2, 2),
            &image_batch(3, 2),
            &config,
            2,
            0,
        )
        .unwrap();
        save_derain_checkpoint(&path, &model, &detail, &adam, 3, &config).unwrap();
        let state = load_derain_checkpoint(&path).unwrap();
        assert_eq!(state.epochs_completed, 3);
        assert_eq!(state.adam.steps(), 1);
        assert_eq!(
            param_bits(&model, &detail),
            param_bits(&state.model, &state.detail)
        );
        let before: Vec<Vec<u32>> = adam
            .state_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let after: Vec<Vec<u32>> = state
            .adam
            .state_tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn report_totals_decompose_into_the_two_objectives() {
        let (mut model, mut detail) = fresh_models(5);
        let mut adam = Adam::new();
        let config = test_config();
        let warm = training_step(
            &mut model,
            &mut detail,
            &mut adam,
            &image_batch(10, 2),
            &image_batch(11, 2),
            &image_batch(12, 2),
            &config,
            0,
            0,
        )
        .unwrap();
        assert!(warm.hard_loss.is_none());
        assert_eq!(warm.total_loss, warm.soft_loss);

        let fed = training_step(
            &mut model,
            &mut detail,
            &mut adam,
            &image_batch(13, 2),
            &image_batch(14, 2),
            &image_batch(15, 2),
            &config,
            2,
            1,
        )
        .unwrap();
        let hard = fed.hard_loss.expect("feedback epoch must report a hard loss");
        assert!(
            (fed.total_loss - (fed.soft_loss + 4.0 * hard)).abs() < 1e-6,
            "total {} vs parts {} + 4*{}",
            fed.total_loss,
            fed.soft_loss,
            hard
        );
        assert_eq!(fed.lr, 2e-4);
    }

    #[test]
    fn warm_up_updates_ignore_the_clean_batch_entirely() {
        let (model_0, detail_0) = fresh_models(23);
        let config = test_config();
        let x = image_batch(20, 2);
        let label = image_batch(21, 2);
        let mut runs = Vec::new();
        for clean_seed in [22, 522] {
            let (mut model, mut detail) = (model_0.clone(), detail_0.clone());
            let mut adam = Adam::new();
            training_step(
                &mut model,
                &mut detail,
                &mut adam,
                &x,
                &label,
                &image_batch(clean_seed, 2),
                &config,
                0,
                0,
            )
            .unwrap();
            runs.push(param_bits(&model, &detail));
        }
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn the_hard_objective_cannot_reach_the_detail_block() {
        // The synthesized pair enters the second pass detached, so with the
        // soft loss out of the picture no gradient path leads to the detail
        // block at all.
        let (model, detail) = fresh_models(29);
        let mut tape: Tape<f32> = Tape::new();
        let vx = tape.constant(image_batch(31, 1));
        let vc = tape.constant(image_batch(32, 1));
        let bound = model.bind(&mut tape, true);
        let bound_detail = detail.bind(&mut tape, true);
        let r = bound.forward(&mut tape, vx);
        let re = bound_detail.apply(&mut tape, r);
        let rain = tape.detach(re);
        let sum = tape.add(vc, rain);
        let d = tape.clamp01(sum);
        let second = bound.forward(&mut tape, d);
        let recovered = tape.sub(d, second);
        let hard = ssim_loss(&mut tape, recovered, vc, &SsimParams::default());
        let grads = tape.backward(hard);
        for v in bound_detail.leaf_vars() {
            assert!(grads.get(v).is_none(), "hard loss leaked into the detail block");
        }
        let reached = bound
            .leaf_vars()
            .iter()
            .filter(|&&v| grads.get(v).is_some())
            .count();
        assert_eq!(reached, 36, "base network should be fully trained by the hard loss");
    }

    #[test]
    fn zero_alpha_reproduces_the_soft_only_update() {
        let (model_0, detail_0) = fresh_models(37);
        let x = image_batch(40, 2);
        let label = image_batch(41, 2);
        let clean = image_batch(42, 2);
        let mut outcomes = Vec::new();
        for config in [
            TrainConfig {
                alpha: 0.0,
                ..test_config()
            },
            TrainConfig {
                no_feedback: true,
                ..test_config()
            },
        ] {
            let (mut model, mut detail) = (model_0.clone(), detail_0.clone());
            let mut adam = Adam::new();
            training_step(
                &mut model, &mut detail, &mut adam, &x, &label, &clean, &config, 2, 0,
            )
            .unwrap();
            let values: Vec<Vec<f32>> = model
                .named_params()
                .into_iter()
                .chain(detail.named_params())
                .map(|(_, t)| t.data().to_vec())
                .collect();
            outcomes.push(values);
        }
        assert_eq!(outcomes[0], outcomes[1]);
    }

    #[test]
    fn no_detail_trains_the_base_network_alone() {
        let (mut model, mut detail) = fresh_models(43);
        let before: Vec<Vec<u32>> = detail
            .named_params()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut adam = Adam::new();
        let config = TrainConfig {
            no_detail: true,
            ..test_config()
        };
        let report = training_step(
            &mut model,
            &mut detail,
            &mut adam,
            &image_batch(50, 2),
            &image_batch(51, 2),
            &image_batch(52, 2),
            &config,
            2,
            0,
        )
        .unwrap();
        assert!(report.hard_loss.is_some());
        assert_eq!(detail.invocations(), 0);
        let after: Vec<Vec<u32>> = detail
            .named_params()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "detail block moved despite being ablated away");
    }

    #[test]
    fn no_feedback_never_reports_a_hard_loss() {
        let (mut model, mut detail) = fresh_models(47);
        let mut adam = Adam::new();
        let config = TrainConfig {
            no_feedback: true,
            ..test_config()
        };
        for epoch in 0..4 {
            let report = training_step(
                &mut model,
                &mut detail,
                &mut adam,
                &image_batch(60, 2),
                &image_batch(61, 2),
                &image_batch(62, 2),
                &config,
                epoch,
                0,
            )
            .unwrap();
            assert!(report.hard_loss.is_none());
        }
    }

    #[test]
    fn synthesis_with_zero_weights_returns_the_clean_image() {
        let (mut model, mut detail) = fresh_models(53);
        for (_, t) in model.params_mut().into_iter().chain(detail.params_mut()) {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let x = Image::from_tensor(image_batch(70, 1));
        let c = Image::from_tensor(image_batch(71, 1));
        let (d, c_back) = synthesize_pair(&model, &detail, &x, &c);
        assert_eq!(d.tensor().data(), c.tensor().data());
        assert_eq!(c_back.tensor().data(), c.tensor().data());
    }

    #[test]
    fn synthesis_adds_the_enhanced_residual_where_nothing_clips() {
        let (model, detail) = fresh_models(59);
        let x = Image::from_tensor(image_batch(72, 1));
        let c = Image::from_tensor(image_batch(73, 1));
        let (d, _) = synthesize_pair(&model, &detail, &x, &c);
        let re = detail.apply_eager(&model.forward_eager(x.tensor()));
        for ((&dv, &cv), &rv) in d
            .tensor()
            .data()
            .iter()
            .zip(c.tensor().data())
            .zip(re.data())
        {
            let raw = cv + rv;
            if (0.0..=1.0).contains(&raw) {
                assert_eq!(dv, raw);
            } else {
                assert_eq!(dv, raw.clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn poisoned_batches_abort_with_their_indices() {
        let (mut model, mut detail) = fresh_models(61);
        let mut adam = Adam::new();
        let config = test_config();
        let mut x = image_batch(80, 2);
        let per = 3 * 16 * 16;
        x.data_mut()[per + 5] = f32::NAN;
        let err = training_step(
            &mut model,
            &mut detail,
            &mut adam,
            &x,
            &image_batch(81, 2),
            &image_batch(82, 2),
            &config,
            0,
            7,
        )
        .unwrap_err();
        match err {
            TrainerError::NonFiniteLoss { epoch, step, indices } => {
                assert_eq!((epoch, step), (0, 7));
                assert_eq!(indices, vec![1]);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn corpus_loading_is_sorted_and_refuses_empty_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path()),
            Err(TrainerError::EmptyCorpus { .. })
        ));
        for name in ["b.png", "a.png", "c.png"] {
            save_png(
                &Image::constant(16, 16, 0.5),
                &dir.path().join(name),
            )
            .unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        let names: Vec<String> = corpus
            .iter()
            .map(|(p, _)| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
    }
}

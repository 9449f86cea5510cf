//! The joint super-resolution and denoising network: a small back-projection
//! x8 upscaler. Restoring a heavily downscaled rainy image cannot recover
//! the thin high-frequency rain streaks, so the round trip acts as a
//! rain-suppressing filter once the network is trained to upscale.
//!
//! Two projection pairs share their weights across the unit's internal
//! passes, back-projection style: an up unit up-projects, down-projects,
//! and re-up-projects its own correction; the down unit mirrors that. The
//! head fuses both up-unit outputs. Training minimizes a reconstruction
//! term plus a one-sided overshoot penalty, so the restored image is pulled
//! under the rainy input rather than onto its streaks.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::imaging::{bicubic_resize, Image};
use crate::nn::{
    clamp01_eager, concat_c_eager, relu_eager, sub_eager, BoundConv, BoundConvT, Conv2dLayer,
    ConvTranspose2dLayer,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::trainer::{
    epoch_rng, non_finite_members, save_srdn_checkpoint, stack_images, Adam, TrainerError,
};

/// Feature width of the stem and projection pairs.
pub const FEATURES: usize = 16;
/// Spatial scale between the downscaled input and the restored output.
pub const SCALE: usize = 8;
const KERNEL: usize = 12;
const PADDING: usize = 2;

/// One projection pair: a single transposed conv and a single conv, reused
/// for every internal pass of the unit built on them.
#[derive(Clone, Debug)]
pub struct ProjectionPair {
    pub up: ConvTranspose2dLayer,
    pub down: Conv2dLayer,
}

impl ProjectionPair {
    fn new(rng: &mut impl Rng) -> Self {
        ProjectionPair {
            up: ConvTranspose2dLayer::new(FEATURES, FEATURES, KERNEL, SCALE, PADDING, rng),
            down: Conv2dLayer::new(FEATURES, FEATURES, KERNEL, SCALE, PADDING, 1, rng),
        }
    }

    fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> (BoundConvT, BoundConv) {
        (self.up.bind(tape, trainable), self.down.bind(tape, trainable))
    }
}

/// The x8 restoration network. Canonical parameter order: stem, pair1
/// (up before down), pair2, head; weight before bias within each layer.
#[derive(Clone, Debug)]
pub struct SrdnModel {
    pub stem: Conv2dLayer,
    pub pairs: Vec<ProjectionPair>,
    pub head: Conv2dLayer,
}

impl SrdnModel {
    pub fn new(rng: &mut impl Rng) -> Self {
        SrdnModel {
            stem: Conv2dLayer::conv3x3(3, FEATURES, 1, rng),
            pairs: (0..2).map(|_| ProjectionPair::new(rng)).collect(),
            head: Conv2dLayer::conv3x3(2 * FEATURES, 3, 1, rng),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, p) in self.pairs.iter().enumerate() {
            out.push((format!("pair{}.up.weight", i + 1), &p.up.weight));
            out.push((format!("pair{}.up.bias", i + 1), &p.up.bias));
            out.push((format!("pair{}.down.weight", i + 1), &p.down.weight));
            out.push((format!("pair{}.down.bias", i + 1), &p.down.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = vec![
            ("stem.weight".to_string(), &mut self.stem.weight),
            ("stem.bias".to_string(), &mut self.stem.bias),
        ];
        for (i, p) in self.pairs.iter_mut().enumerate() {
            out.push((format!("pair{}.up.weight", i + 1), &mut p.up.weight));
            out.push((format!("pair{}.up.bias", i + 1), &mut p.up.bias));
            out.push((format!("pair{}.down.weight", i + 1), &mut p.down.weight));
            out.push((format!("pair{}.down.bias", i + 1), &mut p.down.bias));
        }
        out.push(("head.weight".to_string(), &mut self.head.weight));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundSrdn {
        BoundSrdn {
            stem: self.stem.bind(tape, trainable),
            pairs: self.pairs.iter().map(|p| p.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Tape-free x8 restoration; the frozen-model path.
    pub fn forward_eager(&self, x_l: &Tensor<f32>) -> Tensor<f32> {
        let [_, _, h, w] = x_l.shape();
        assert!(h >= 2 && w >= 2, "input spatial dims must be at least 2");
        let f0 = relu_eager(&self.stem.apply_eager(x_l));
        let h1 = up_unit_eager(&self.pairs[0], &f0);
        let l1 = down_unit_eager(&self.pairs[0], &h1);
        let h2 = up_unit_eager(&self.pairs[1], &l1);
        clamp01_eager(&self.head.apply_eager(&concat_c_eager(&[&h1, &h2])))
    }
}

fn add_eager(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// h0 = up(l); e = down(h0) - l; h = h0 + up(e). Both passes share weights.
fn up_unit_eager(pair: &ProjectionPair, l: &Tensor<f32>) -> Tensor<f32> {
    let h0 = pair.up.apply_eager(l);
    let l0 = pair.down.apply_eager(&h0);
    let e = sub_eager(&l0, l);
    let h1 = pair.up.apply_eager(&e);
    add_eager(&h0, &h1)
}

/// l0 = down(h); e = up(l0) - h; l = l0 + down(e). Mirror of the up unit.
fn down_unit_eager(pair: &ProjectionPair, h: &Tensor<f32>) -> Tensor<f32> {
    let l0 = pair.down.apply_eager(h);
    let h0 = pair.up.apply_eager(&l0);
    let e = sub_eager(&h0, h);
    let l1 = pair.down.apply_eager(&e);
    add_eager(&l0, &l1)
}

/// Tape-resident parameter handles for the restoration network.
#[derive(Clone, Debug)]
pub struct BoundSrdn {
    pub stem: BoundConv,
    pub pairs: Vec<(BoundConvT, BoundConv)>,
    pub head: BoundConv,
}

impl BoundSrdn {
    /// Parameter vars flattened in the canonical order.
    pub fn leaf_vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(12);
        out.extend(self.stem.vars());
        for (up, down) in &self.pairs {
            out.extend(up.vars());
            out.extend(down.vars());
        }
        out.extend(self.head.vars());
        out
    }

    fn up_unit<T: Scalar>(&self, tape: &mut Tape<T>, pair: usize, l: Var) -> Var {
        let (up, down) = &self.pairs[pair];
        let h0 = up.apply(tape, l);
        let l0 = down.apply(tape, h0);
        let e = tape.sub(l0, l);
        let h1 = up.apply(tape, e);
        tape.add(h0, h1)
    }

    fn down_unit<T: Scalar>(&self, tape: &mut Tape<T>, pair: usize, h: Var) -> Var {
        let (up, down) = &self.pairs[pair];
        let l0 = down.apply(tape, h);
        let h0 = up.apply(tape, l0);
        let e = tape.sub(h0, h);
        let l1 = down.apply(tape, e);
        tape.add(l0, l1)
    }

    /// Runs the network: x8 spatial output in [0, 1].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x_l: Var) -> Var {
        let [_, _, h, w] = tape.value(x_l).shape();
        assert!(h >= 2 && w >= 2, "input spatial dims must be at least 2");
        let stem_out = self.stem.apply(tape, x_l);
        let f0 = tape.relu(stem_out);
        let h1 = self.up_unit(tape, 0, f0);
        let l1 = self.down_unit(tape, 0, h1);
        let h2 = self.up_unit(tape, 1, l1);
        let cat = tape.concat_c(&[h1, h2]);
        let pre = self.head.apply(tape, cat);
        tape.clamp01(pre)
    }
}

/// Frozen-model restoration of a downscaled image.
pub fn srdn_forward(model: &SrdnModel, x_l: &Tensor<f32>) -> Tensor<f32> {
    model.forward_eager(x_l)
}

/// Reconstruction plus one-sided overshoot penalty:
/// mse(X_H, X) + mse(X_H, min(X, X_H)), the self-referential minimum taken
/// with the current output and gradients flowing through both occurrences.
/// The second term reduces algebraically to mean(relu(X_H - X)^2).
pub fn srdn_loss<T: Scalar>(tape: &mut Tape<T>, x_h: Var, x: Var) -> Var {
    assert_eq!(tape.value(x_h).shape(), tape.value(x).shape());
    let fit = crate::metrics::mse_loss(tape, x_h, x);
    let y_s = tape.min(x, x_h);
    let overshoot = crate::metrics::mse_loss(tape, x_h, y_s);
    tape.add(fit, overshoot)
}

/// Pre-training schedule for the restoration network. The desk defaults are
/// declared values, not published ones: 200 epochs at a constant 1e-4 with
/// batch 4 trains the reduced architecture to convergence on the fixture
/// corpus in minutes.
#[derive(Clone, Debug)]
pub struct SrdnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Square crop side taken from each corpus image; the network input is
    /// its x8 bicubic downscale, so this must sit on the scale grid.
    pub patch: usize,
    pub seed: u64,
    /// Written after the final epoch when set.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for SrdnTrainConfig {
    fn default() -> Self {
        SrdnTrainConfig {
            epochs: 200,
            lr: 1e-4,
            batch: 4,
            patch: 96,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl SrdnTrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: String| Err(TrainerError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be finite and positive", self.lr));
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patch % SCALE != 0 || self.patch < 2 * SCALE {
            return bad(format!(
                "patch {} must be a multiple of {SCALE} and at least {}",
                self.patch,
                2 * SCALE
            ));
        }
        Ok(())
    }

    pub fn descriptor_entries(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Trains the upscaler on random crops of unlabeled rainy images: each crop
/// is bicubically downscaled x8 and the network learns to restore it under
/// the reconstruction-plus-overshoot objective. `on_epoch` receives the mean
/// per-sample loss of every epoch. Returns the optimizer state so callers can
/// checkpoint beyond the optional final write.
pub fn pretrain_srdn(
    model: &mut SrdnModel,
    corpus: &[Image],
    config: &SrdnTrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Adam, TrainerError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainerError::Config("empty corpus: no training images given".into()));
    }
    let patch = config.patch;
    for (i, im) in corpus.iter().enumerate() {
        if im.height() < patch || im.width() < patch {
            return Err(TrainerError::Config(format!(
                "corpus image {i} is {}x{}, smaller than the {patch}px patch",
                im.height(),
                im.width()
            )));
        }
    }

    let mut adam = Adam::new();
    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ls = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let oy = rng.gen_range(0..=corpus[i].height() - patch);
                let ox = rng.gen_range(0..=corpus[i].width() - patch);
                let x = corpus[i].crop(oy, ox, patch, patch);
                ls.push(bicubic_resize(&x, patch / SCALE, patch / SCALE));
                xs.push(x);
            }
            let x = stack_images(&xs);
            let x_l = stack_images(&ls);
            let poisoned = non_finite_members(&[&x, &x_l]);
            if !poisoned.is_empty() {
                return Err(TrainerError::NonFiniteLoss {
                    epoch,
                    step,
                    indices: poisoned,
                });
            }

            let loss_value;
            let grads;
            let vars;
            {
                let mut tape: Tape<f32> = Tape::new();
                let vl = tape.constant(x_l);
                let vx = tape.constant(x);
                let bound = model.bind(&mut tape, true);
                let x_h = bound.forward(&mut tape, vl);
                let loss = srdn_loss(&mut tape, x_h, vx);
                loss_value = tape.value(loss).item() as f64;
                if !loss_value.is_finite() {
                    return Err(TrainerError::NonFiniteLoss {
                        epoch,
                        step,
                        indices: non_finite_members(&[tape.value(x_h)]),
                    });
                }
                grads = tape.backward(loss);
                vars = bound.leaf_vars();
            }
            let mut updates: Vec<(String, &mut Tensor<f32>, Option<&Tensor<f32>>)> = model
                .params_mut()
                .into_iter()
                .zip(&vars)
                .map(|((name, p), &v)| (name, p, grads.get(v)))
                .collect();
            adam.step(config.lr, &mut updates);
            loss_sum += loss_value * chunk.len() as f64;
        }
        on_epoch(epoch, loss_sum / corpus.len() as f64);
    }

    if let Some(path) = &config.checkpoint_path {
        save_srdn_checkpoint(path, model, &adam, config.epochs, &config.descriptor_entries())?;
    }
    Ok(adam)
}

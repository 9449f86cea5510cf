//! The rain-residual network: a feature stem, six dilated self-correction
//! blocks tapped by a three-node aggregation tree, and a Tanh head emitting
//! the residual map, plus the training-only detail enhancement block.
//!
//! Each block convolves its input at dilation 1, convolves the prediction
//! error of that first pass at dilation 3, and sums the two, so a single
//! block sees both fine structure and wider context. The blocks form one
//! sequential chain; aggregation nodes only read taps off it. Subtracting
//! the head's residual from the input reconstructs the rain-free estimate.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::nn::{concat_c_eager, relu_eager, sub_eager, tanh_eager, BoundConv, Conv2dLayer};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Feature width shared by the stem, blocks, and aggregation nodes.
pub const FEATURES: usize = 16;

/// One multi-scale block: a dilation-1 conv, then a dilation-3 conv over the
/// first conv's prediction error.
#[derive(Clone, Debug)]
pub struct DilatedBlock {
    pub w1: Conv2dLayer,
    pub w3: Conv2dLayer,
}

impl DilatedBlock {
    pub fn new(rng: &mut impl Rng) -> Self {
        DilatedBlock {
            w1: Conv2dLayer::conv3x3(FEATURES, FEATURES, 1, rng),
            w3: Conv2dLayer::conv3x3(FEATURES, FEATURES, 3, rng),
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> (BoundConv, BoundConv) {
        (self.w1.bind(tape, trainable), self.w3.bind(tape, trainable))
    }

    /// Tape-free forward for inference.
    pub fn forward_eager(&self, f_prev: &Tensor<f32>) -> Tensor<f32> {
        let f1 = self.w1.apply_eager(f_prev);
        let e = sub_eager(f_prev, &f1);
        let f3 = self.w3.apply_eager(&e);
        let mut sum = f1;
        for (s, &v) in sum.data_mut().iter_mut().zip(f3.data()) {
            *s += v;
        }
        relu_eager(&sum)
    }
}

/// F1 = W1 * F_prev; e = F_prev - F1; F3 = W3 * e; F = relu(F1 + F3).
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w1: &BoundConv,
    w3: &BoundConv,
    f_prev: Var,
) -> Var {
    let f1 = w1.apply(tape, f_prev);
    let e = tape.sub(f_prev, f1);
    let f3 = w3.apply(tape, e);
    let sum = tape.add(f1, f3);
    tape.relu(sum)
}

/// The base deraining network. Parameter order is canonical: stem, blocks
/// one through six (w1 before w3), nodes a/b/c, root, head; weight before
/// bias within each layer. Checkpoints, optimizer slots, and tape bindings
/// all share it.
#[derive(Clone, Debug)]
pub struct DerainModel {
    pub stem: Conv2dLayer,
    pub blocks: Vec<DilatedBlock>,
    pub node_a: Conv2dLayer,
    pub node_b: Conv2dLayer,
    pub node_c: Conv2dLayer,
    pub root: Conv2dLayer,
    pub head: Conv2dLayer,
}

impl DerainModel {
    pub fn new(rng: &mut impl Rng) -> Self {
        DerainModel {
            stem: Conv2dLayer::conv3x3(3, FEATURES, 1, rng),
            blocks: (0..6).map(|_| DilatedBlock::new(rng)).collect(),
            node_a: Conv2dLayer::conv3x3(2 * FEATURES, FEATURES, 1, rng),
            node_b: Conv2dLayer::conv3x3(2 * FEATURES, FEATURES, 1, rng),
            node_c: Conv2dLayer::conv3x3(2 * FEATURES, FEATURES, 1, rng),
            root: Conv2dLayer::conv3x3(3 * FEATURES, FEATURES, 1, rng),
            head: Conv2dLayer::conv3x3(FEATURES, 3, 1, rng),
        }
    }

    fn layers(&self) -> Vec<(String, &Conv2dLayer)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.w1", i + 1), &b.w1));
            out.push((format!("block{}.w3", i + 1), &b.w3));
        }
        out.push(("node_a".to_string(), &self.node_a));
        out.push(("node_b".to_string(), &self.node_b));
        out.push(("node_c".to_string(), &self.node_c));
        out.push(("root".to_string(), &self.root));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        fn push<'a>(
            out: &mut Vec<(String, &'a mut Tensor<f32>)>,
            name: String,
            layer: &'a mut Conv2dLayer,
        ) {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        let mut out = Vec::new();
        push(&mut out, "stem".to_string(), &mut self.stem);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push(&mut out, format!("block{}.w1", i + 1), &mut b.w1);
            push(&mut out, format!("block{}.w3", i + 1), &mut b.w3);
        }
        push(&mut out, "node_a".to_string(), &mut self.node_a);
        push(&mut out, "node_b".to_string(), &mut self.node_b);
        push(&mut out, "node_c".to_string(), &mut self.node_c);
        push(&mut out, "root".to_string(), &mut self.root);
        push(&mut out, "head".to_string(), &mut self.head);
        out
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundDerain {
        BoundDerain {
            stem: self.stem.bind(tape, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(tape, trainable))
                .collect(),
            node_a: self.node_a.bind(tape, trainable),
            node_b: self.node_b.bind(tape, trainable),
            node_c: self.node_c.bind(tape, trainable),
            root: self.root.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Rebinds from an externally supplied flat var list in canonical order
    /// (as produced by `BoundDerain::leaf_vars`).
    pub fn bound_from_vars(&self, vars: &[Var]) -> BoundDerain {
        let mut it = vars.iter().copied();
        let mut next2 = |layer: &Conv2dLayer| {
            let pair = [it.next().expect("var count"), it.next().expect("var count")];
            BoundConv::from_vars(&pair, layer)
        };
        let bound = BoundDerain {
            stem: next2(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| (next2(&b.w1), next2(&b.w3)))
                .collect(),
            node_a: next2(&self.node_a),
            node_b: next2(&self.node_b),
            node_c: next2(&self.node_c),
            root: next2(&self.root),
            head: next2(&self.head),
        };
        assert!(it.next().is_none(), "var count");
        bound
    }

    /// Tape-free forward producing the residual map; used at test time.
    pub fn forward_eager(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let mut f = relu_eager(&self.stem.apply_eager(x));
        let mut taps = Vec::with_capacity(6);
        for b in &self.blocks {
            f = b.forward_eager(&f);
            taps.push(f.clone());
        }
        let node = |layer: &Conv2dLayer, a: &Tensor<f32>, b: &Tensor<f32>| {
            relu_eager(&layer.apply_eager(&concat_c_eager(&[a, b])))
        };
        let na = node(&self.node_a, &taps[0], &taps[1]);
        let nb = node(&self.node_b, &taps[2], &taps[3]);
        let nc = node(&self.node_c, &taps[4], &taps[5]);
        let fused = relu_eager(&self.root.apply_eager(&concat_c_eager(&[&na, &nb, &nc])));
        tanh_eager(&self.head.apply_eager(&fused))
    }
}

/// Tape-resident parameter handles for the base network.
#[derive(Clone, Debug)]
pub struct BoundDerain {
    pub stem: BoundConv,
    pub blocks: Vec<(BoundConv, BoundConv)>,
    pub node_a: BoundConv,
    pub node_b: BoundConv,
    pub node_c: BoundConv,
    pub root: BoundConv,
    pub head: BoundConv,
}

impl BoundDerain {
    /// Parameter vars flattened in the canonical order.
    pub fn leaf_vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(36);
        out.extend(self.stem.vars());
        for (w1, w3) in &self.blocks {
            out.extend(w1.vars());
            out.extend(w3.vars());
        }
        out.extend(self.node_a.vars());
        out.extend(self.node_b.vars());
        out.extend(self.node_c.vars());
        out.extend(self.root.vars());
        out.extend(self.head.vars());
        out
    }

    /// Runs the network, returning the residual map in (-1, 1).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let stem_out = self.stem.apply(tape, x);
        let mut f = tape.relu(stem_out);
        let mut taps = Vec::with_capacity(6);
        for (w1, w3) in &self.blocks {
            f = block_forward(tape, w1, w3, f);
            taps.push(f);
        }
        let node = |layer: &BoundConv, a: Var, b: Var, tape: &mut Tape<T>| {
            let cat = tape.concat_c(&[a, b]);
            let out = layer.apply(tape, cat);
            tape.relu(out)
        };
        let na = node(&self.node_a, taps[0], taps[1], tape);
        let nb = node(&self.node_b, taps[2], taps[3], tape);
        let nc = node(&self.node_c, taps[4], taps[5], tape);
        let cat = tape.concat_c(&[na, nb, nc]);
        let fused = self.root.apply(tape, cat);
        let fused = tape.relu(fused);
        let pre = self.head.apply(tape, fused);
        tape.tanh(pre)
    }
}

/// Training-only refinement head mapping the residual to an enhanced
/// residual, so the base network is not forced to imitate soft-label blur.
/// Counts its invocations so tests can prove the inference path never
/// touches it.
#[derive(Debug)]
pub struct DetailBlock {
    pub expand: Conv2dLayer,
    pub reduce: Conv2dLayer,
    invocations: AtomicUsize,
}

impl Clone for DetailBlock {
    fn clone(&self) -> Self {
        DetailBlock {
            expand: self.expand.clone(),
            reduce: self.reduce.clone(),
            invocations: AtomicUsize::new(0),
        }
    }
}

impl DetailBlock {
    pub fn new(rng: &mut impl Rng) -> Self {
        DetailBlock {
            expand: Conv2dLayer::conv3x3(3, FEATURES, 1, rng),
            reduce: Conv2dLayer::conv3x3(FEATURES, 3, 1, rng),
            invocations: AtomicUsize::new(0),
        }
    }

    /// How many times any bound handle of this block has run forward.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        vec![
            ("detail.expand.weight".to_string(), &self.expand.weight),
            ("detail.expand.bias".to_string(), &self.expand.bias),
            ("detail.reduce.weight".to_string(), &self.reduce.weight),
            ("detail.reduce.bias".to_string(), &self.reduce.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let DetailBlock { expand, reduce, .. } = self;
        vec![
            ("detail.expand.weight".to_string(), &mut expand.weight),
            ("detail.expand.bias".to_string(), &mut expand.bias),
            ("detail.reduce.weight".to_string(), &mut reduce.weight),
            ("detail.reduce.bias".to_string(), &mut reduce.bias),
        ]
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundDetail<'_> {
        BoundDetail {
            expand: self.expand.bind(tape, trainable),
            reduce: self.reduce.bind(tape, trainable),
            counter: &self.invocations,
        }
    }

    /// Rebinds from a flat var list in canonical order.
    pub fn bound_from_vars(&self, vars: &[Var]) -> BoundDetail<'_> {
        assert_eq!(vars.len(), 4);
        BoundDetail {
            expand: BoundConv::from_vars(&vars[0..2], &self.expand),
            reduce: BoundConv::from_vars(&vars[2..4], &self.reduce),
            counter: &self.invocations,
        }
    }

    /// Eager enhancement pass; counts as an invocation like the bound form.
    pub fn apply_eager(&self, residual: &Tensor<f32>) -> Tensor<f32> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let h = relu_eager(&self.expand.apply_eager(residual));
        tanh_eager(&self.reduce.apply_eager(&h))
    }
}

/// Tape-resident handles for the detail block.
pub struct BoundDetail<'a> {
    pub expand: BoundConv,
    pub reduce: BoundConv,
    counter: &'a AtomicUsize,
}

impl BoundDetail<'_> {
    pub fn leaf_vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(4);
        out.extend(self.expand.vars());
        out.extend(self.reduce.vars());
        out
    }

    /// Maps a residual to the enhanced residual, in (-1, 1).
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, r_hat: Var) -> Var {
        self.counter.fetch_add(1, Ordering::Relaxed);
        let h = self.expand.apply(tape, r_hat);
        let h = tape.relu(h);
        let pre = self.reduce.apply(tape, h);
        tape.tanh(pre)
    }
}

/// Test-time operator: predicts the rain residual and subtracts it.
/// Returns the rain-free estimate clamped to the unit interval alongside the
/// raw residual; losses during training see the unclamped difference.
pub fn derain(model: &DerainModel, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let r = model.forward_eager(x);
    let y = crate::nn::clamp01_eager(&sub_eager(x, &r));
    (y, r)
}

/// Exact count of trainable scalars, walking every parameter tensor. The
/// detail block exists only during training, so inference reporting passes
/// `None`.
pub fn parameter_count(model: &DerainModel, detail: Option<&DetailBlock>) -> usize {
    let base: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
    let extra: usize = detail
        .map(|d| d.named_params().iter().map(|(_, t)| t.numel()).sum())
        .unwrap_or(0);
    base + extra
}

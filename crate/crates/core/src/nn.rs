//! Shared building blocks for the two networks: convolution layers that own
//! their parameters, tape binding, and eager (tape-free) application for
//! inference paths.
//!
//! Binding clones a layer's tensors onto a tape as leaves (trainable) or
//! constants (frozen), in a canonical order that parameter names, optimizer
//! slots, and checkpoints all share. A layer bound once can be applied many
//! times; the tape accumulates gradients for reused weights.

use rand::Rng;

use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

/// A 2D convolution layer: weight (out_c, in_c, k, k), bias (1, out_c, 1, 1),
/// and fixed geometry. Weights initialize uniformly in
/// +-sqrt(1 / (in_c * k * k)); biases start at zero.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_c * kernel * kernel) as f64).sqrt();
        Conv2dLayer {
            weight: Tensor::uniform([out_c, in_c, kernel, kernel], -bound, bound, rng),
            bias: Tensor::zeros([1, out_c, 1, 1]),
            stride,
            padding,
            dilation,
        }
    }

    /// Convenience constructor for the ubiquitous size-preserving 3x3 case.
    pub fn conv3x3(in_c: usize, out_c: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        Conv2dLayer::new(in_c, out_c, 3, 1, dilation, dilation, rng)
    }

    /// Puts the parameters on a tape. `trainable` decides leaf vs constant.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        let w = self.weight.cast::<T>();
        let b = self.bias.cast::<T>();
        let (weight, bias) = if trainable {
            (tape.leaf(w), tape.leaf(b))
        } else {
            (tape.constant(w), tape.constant(b))
        };
        BoundConv {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        }
    }

    /// Applies the layer without a tape; the inference path.
    pub fn apply_eager(&self, x: &Tensor<f32>) -> Tensor<f32> {
        kernels::conv2d(
            x,
            &self.weight,
            Some(&self.bias),
            self.stride,
            self.padding,
            self.dilation,
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Tape-resident handles for one convolution layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl BoundConv {
    /// Rebuilds the handle from vars laid out as [weight, bias], taking the
    /// geometry from the owning layer.
    pub fn from_vars(vars: &[Var], layer: &Conv2dLayer) -> Self {
        assert_eq!(vars.len(), 2);
        BoundConv {
            weight: vars[0],
            bias: vars[1],
            stride: layer.stride,
            padding: layer.padding,
            dilation: layer.dilation,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.conv2d(
            x,
            self.weight,
            Some(self.bias),
            self.stride,
            self.padding,
            self.dilation,
        )
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// A transposed 2D convolution layer: weight (in_c, out_c, k, k), bias
/// (1, out_c, 1, 1). Initialization mirrors `Conv2dLayer`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2dLayer {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2dLayer {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_c * kernel * kernel) as f64).sqrt();
        ConvTranspose2dLayer {
            weight: Tensor::uniform([in_c, out_c, kernel, kernel], -bound, bound, rng),
            bias: Tensor::zeros([1, out_c, 1, 1]),
            stride,
            padding,
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConvT {
        let w = self.weight.cast::<T>();
        let b = self.bias.cast::<T>();
        let (weight, bias) = if trainable {
            (tape.leaf(w), tape.leaf(b))
        } else {
            (tape.constant(w), tape.constant(b))
        };
        BoundConvT {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn apply_eager(&self, x: &Tensor<f32>) -> Tensor<f32> {
        kernels::conv_transpose2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Tape-resident handles for one transposed convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundConvT {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl BoundConvT {
    pub fn from_vars(vars: &[Var], layer: &ConvTranspose2dLayer) -> Self {
        assert_eq!(vars.len(), 2);
        BoundConvT {
            weight: vars[0],
            bias: vars[1],
            stride: layer.stride,
            padding: layer.padding,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.conv_transpose2d(x, self.weight, Some(self.bias), self.stride, self.padding)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Eager ReLU for inference paths; matches the tape op exactly.
pub fn relu_eager(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.max(0.0))
}

/// Eager saturated tanh; bitwise-identical to the tape's tanh op.
pub fn tanh_eager(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.tanh().min(f32::BELOW_ONE).max(-f32::BELOW_ONE))
}

/// Eager clamp to [0, 1]; matches the tape op.
pub fn clamp01_eager(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Eager elementwise sum.
pub fn add_eager(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Eager elementwise difference.
pub fn sub_eager(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x - y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Eager channel concatenation of same-size maps.
pub fn concat_c_eager(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    assert!(!parts.is_empty());
    let [b, _, h, w] = parts[0].shape();
    assert_eq!(b, 1, "eager concat is an inference-path helper; batch 1");
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        assert_eq!([p.shape()[0], p.shape()[2], p.shape()[3]], [b, h, w]);
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([1, c_total, h, w], data)
}

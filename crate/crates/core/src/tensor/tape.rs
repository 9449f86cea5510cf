//! Reverse-mode differentiation tape.
//!
//! Ops append nodes holding their output value plus whatever the
//! vector-Jacobian product needs; [`Tape::backward`] walks the record in
//! reverse exactly once. Gradients are only materialized along paths that end
//! in a `leaf`, so constants (input batches, cached labels) cost nothing in
//! the backward pass. Intermediate gradients are freed as soon as they have
//! been consumed; after `backward`, gradients remain queryable for leaves.

use super::kernels;
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// Value copy that blocks gradient flow to its source.
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise minimum; ties route the subgradient to the first operand.
    Min(Var, Var),
    Relu(Var),
    Tanh(Var),
    Clamp01(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Mean(Var),
    ConcatC(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    /// Separable valid-region filter with one symmetric 1-D tap vector
    /// applied along width then height.
    SepFilterValid {
        x: Var,
        taps: Vec<T>,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    by_var: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_var.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        assert!(
            value.all_finite(),
            "non-finite value out of {} (shape {:?})",
            op_name(&op),
            value.shape()
        );
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input: receives a gradient from `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (data, labels, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Copy of `v`'s value that gradients do not cross.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(Op::Detach, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), value, needs)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Min(a, b), value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    /// Hyperbolic tangent, saturated one ulp inside the open interval so the
    /// (-1, 1) range contract survives floating-point rounding at large
    /// magnitudes.
    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| x.tanh().min(T::BELOW_ONE).max(-T::BELOW_ONE));
        let needs = self.needs(a);
        self.push(Op::Tanh(a), value, needs)
    }

    /// Clip to [0,1]; gradient is zero outside the clipped range and passes
    /// through on the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::ZERO).min(T::ONE));
        let needs = self.needs(a);
        self.push(Op::Clamp01(a), value, needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), value, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), value, needs)
    }

    /// Arithmetic mean over every element, as a 1x1x1x1 tensor. Accumulates
    /// in f64 with a fixed reduction order.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(a).mean_f64()));
        let needs = self.needs(a);
        self.push(Op::Mean(a), value, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_c of nothing");
        let [bn, _, h, w] = self.value(parts[0]).shape();
        let mut c_total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).shape();
            assert_eq!(
                (pb, ph, pw),
                (bn, h, w),
                "concat_c parts must agree outside the channel axis"
            );
            c_total += pc;
        }
        let mut out = Tensor::zeros([bn, c_total, h, w]);
        let plane = h * w;
        for b in 0..bn {
            let mut c_off = 0;
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                let src = &t.data()[b * pc * plane..][..pc * plane];
                out.data_mut()[(b * c_total + c_off) * plane..][..pc * plane]
                    .copy_from_slice(src);
                c_off += pc;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatC(parts.to_vec()), out, needs)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Var {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            dilation,
        );
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                dilation,
            },
            value,
            needs,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Var {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        );
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            value,
            needs,
        )
    }

    pub fn sep_filter_valid(&mut self, x: Var, taps: &[T]) -> Var {
        let value = sep_filter_valid(self.value(x), taps);
        let needs = self.needs(x);
        self.push(
            Op::SepFilterValid {
                x,
                taps: taps.to_vec(),
            },
            value,
            needs,
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every leaf
    /// that (transitively) contributed to it.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut by_var: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        by_var.resize_with(self.nodes.len(), || None);
        if !self.needs(loss) {
            return Grads { by_var };
        }
        by_var[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let Some(g) = by_var[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], g.map(|v| -v));
                    }
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], zip(&g, self.value(*b), |gv, bv| gv * bv));
                    }
                    if self.needs(*b) {
                        accumulate(&mut by_var[b.0], zip(&g, self.value(*a), |gv, av| gv * av));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut by_var[a.0], zip(&g, bv, |gv, y| gv / y));
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let mut gb = zip(&g, av, |gv, x| gv * x);
                        for (d, y) in gb.data_mut().iter_mut().zip(bv.data()) {
                            *d = -*d / (*y * *y);
                        }
                        accumulate(&mut by_var[b.0], gb);
                    }
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        let ga = Tensor::from_vec(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(av.data().iter().zip(bv.data()))
                                .map(|(&gv, (&x, &y))| if x <= y { gv } else { T::ZERO })
                                .collect(),
                        );
                        accumulate(&mut by_var[a.0], ga);
                    }
                    if self.needs(*b) {
                        let gb = Tensor::from_vec(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(av.data().iter().zip(bv.data()))
                                .map(|(&gv, (&x, &y))| if x <= y { T::ZERO } else { gv })
                                .collect(),
                        );
                        accumulate(&mut by_var[b.0], gb);
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let ga = zip(&g, av, |gv, x| if x > T::ZERO { gv } else { T::ZERO });
                    accumulate(&mut by_var[a.0], ga);
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    let ga = zip(&g, out, |gv, t| gv * (T::ONE - t * t));
                    accumulate(&mut by_var[a.0], ga);
                }
                Op::Clamp01(a) => {
                    let av = self.value(*a);
                    let ga = zip(&g, av, |gv, x| {
                        if x >= T::ZERO && x <= T::ONE {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    accumulate(&mut by_var[a.0], ga);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut by_var[a.0], g.map(|v| v * c));
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut by_var[a.0], g);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let per = T::from_f64(g.item().to_f64() / src.numel() as f64);
                    accumulate(&mut by_var[a.0], Tensor::full(src.shape(), per));
                }
                Op::ConcatC(parts) => {
                    let [bn, c_total, h, w] = g.shape();
                    let plane = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.needs(p) {
                            let mut gp = Tensor::zeros([bn, pc, h, w]);
                            for b in 0..bn {
                                let src = &g.data()[(b * c_total + c_off) * plane..][..pc * plane];
                                gp.data_mut()[b * pc * plane..][..pc * plane]
                                    .copy_from_slice(src);
                            }
                            accumulate(&mut by_var[p.0], gp);
                        }
                        c_off += pc;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                    dilation,
                } => {
                    if self.needs(*x) {
                        let gx = kernels::conv2d_grad_input(
                            &g,
                            self.value(*w),
                            self.value(*x).shape(),
                            *stride,
                            *padding,
                            *dilation,
                        );
                        accumulate(&mut by_var[x.0], gx);
                    }
                    if self.needs(*w) {
                        let gw = kernels::conv2d_grad_weight(
                            &g,
                            self.value(*x),
                            self.value(*w).shape(),
                            *stride,
                            *padding,
                            *dilation,
                        );
                        accumulate(&mut by_var[w.0], gw);
                    }
                    if let Some(bvar) = bias {
                        if self.needs(*bvar) {
                            accumulate(&mut by_var[bvar.0], kernels::conv_grad_bias(&g));
                        }
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    if self.needs(*x) {
                        let gx = kernels::convt_grad_input(
                            &g,
                            self.value(*w),
                            self.value(*x).shape(),
                            *stride,
                            *padding,
                        );
                        accumulate(&mut by_var[x.0], gx);
                    }
                    if self.needs(*w) {
                        let gw = kernels::convt_grad_weight(
                            &g,
                            self.value(*x),
                            self.value(*w).shape(),
                            *stride,
                            *padding,
                        );
                        accumulate(&mut by_var[w.0], gw);
                    }
                    if let Some(bvar) = bias {
                        if self.needs(*bvar) {
                            accumulate(&mut by_var[bvar.0], kernels::conv_grad_bias(&g));
                        }
                    }
                }
                Op::SepFilterValid { x, taps } => {
                    let gx = sep_filter_valid_adjoint(&g, taps, self.value(*x).shape());
                    accumulate(&mut by_var[x.0], gx);
                }
            }
        }
        Grads { by_var }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Detach => "detach",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Min(..) => "min",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Clamp01(..) => "clamp01",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Mean(..) => "mean",
        Op::ConcatC(..) => "concat_c",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::SepFilterValid { .. } => "sep_filter_valid",
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(
        a.shape(),
        b.shape(),
        "elementwise op shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (d, s) in t.data_mut().iter_mut().zip(g.data()) {
                *d += *s;
            }
        }
    }
}

fn sep_filter_valid<T: Scalar>(x: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    let [bn, c, h, w] = x.shape();
    let k = taps.len();
    assert!(
        h >= k && w >= k,
        "filter window {k} exceeds input {h}x{w}"
    );
    let wo = w - k + 1;
    let ho = h - k + 1;
    let mut horiz = Tensor::zeros([bn, c, h, wo]);
    for plane in 0..bn * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut horiz.data_mut()[plane * h * wo..][..h * wo];
        for y in 0..h {
            let row = &src[y * w..][..w];
            let out = &mut dst[y * wo..][..wo];
            for (j, &t) in taps.iter().enumerate() {
                for (o, s) in out.iter_mut().zip(&row[j..j + wo]) {
                    *o += t * *s;
                }
            }
        }
    }
    let mut out = Tensor::zeros([bn, c, ho, wo]);
    for plane in 0..bn * c {
        let src = &horiz.data()[plane * h * wo..][..h * wo];
        let dst = &mut out.data_mut()[plane * ho * wo..][..ho * wo];
        for y in 0..ho {
            let orow = &mut dst[y * wo..][..wo];
            for (i, &t) in taps.iter().enumerate() {
                let srow = &src[(y + i) * wo..][..wo];
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o += t * *s;
                }
            }
        }
    }
    out
}

fn sep_filter_valid_adjoint<T: Scalar>(
    g: &Tensor<T>,
    taps: &[T],
    x_shape: [usize; 4],
) -> Tensor<T> {
    let [bn, c, h, w] = x_shape;
    let k = taps.len();
    let [_, _, ho, wo] = g.shape();
    debug_assert_eq!((ho, wo), (h - k + 1, w - k + 1));
    let mut vert = Tensor::zeros([bn, c, h, wo]);
    for plane in 0..bn * c {
        let src = &g.data()[plane * ho * wo..][..ho * wo];
        let dst = &mut vert.data_mut()[plane * h * wo..][..h * wo];
        for y in 0..ho {
            let grow = &src[y * wo..][..wo];
            for (i, &t) in taps.iter().enumerate() {
                let vrow = &mut dst[(y + i) * wo..][..wo];
                for (v, s) in vrow.iter_mut().zip(grow) {
                    *v += t * *s;
                }
            }
        }
    }
    let mut gx = Tensor::zeros(x_shape);
    for plane in 0..bn * c {
        let src = &vert.data()[plane * h * wo..][..h * wo];
        let dst = &mut gx.data_mut()[plane * h * w..][..h * w];
        for y in 0..h {
            let vrow = &src[y * wo..][..wo];
            let xrow = &mut dst[y * w..][..w];
            for (j, &t) in taps.iter().enumerate() {
                for (x0, s) in vrow.iter().enumerate() {
                    xrow[x0 + j] += t * *s;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_backward_fills_inverse_count() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        let grads = tape.backward(m);
        for &g in grads.get(x).unwrap().data() {
            assert_eq!(g, 0.25);
        }
    }

    #[test]
    fn linear_loss_grad_is_input_over_n() {
        // loss = mean(w * x) with x constant => dloss/dw = x / N
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::full([1, 1, 2, 2], 0.5));
        let prod = tape.mul(w, x);
        let loss = tape.mean(prod);
        let grads = tape.backward(loss);
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[0.25, 0.5, 0.75, 1.0]);
        assert!(grads.get(x).is_none(), "constants receive no grad");
    }

    #[test]
    fn detach_blocks_propagation() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::full([1, 1, 1, 2], 3.0));
        let d = tape.detach(w);
        let prod = tape.mul(d, d);
        let loss = tape.mean(prod);
        let grads = tape.backward(loss);
        assert!(grads.get(w).is_none(), "detached path must not reach the leaf");
        assert_eq!(tape.value(loss).item(), 9.0);
    }

    #[test]
    fn min_tie_routes_to_first_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![1.0, 5.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![1.0, 3.0, 4.0]));
        let m = tape.min(a, b);
        assert_eq!(tape.value(m).data(), &[1.0, 3.0, 2.0]);
        let loss = tape.mean(m);
        let grads = tape.backward(loss);
        let third = 1.0 / 3.0;
        assert_eq!(grads.get(a).unwrap().data(), &[third, 0.0, third]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, third, 0.0]);
    }

    #[test]
    fn clamp01_grad_is_zero_outside_range() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec([1, 1, 1, 4], vec![-0.5, 0.0, 0.7, 1.3]));
        let c = tape.clamp01(a);
        assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.7, 1.0]);
        let loss = tape.mean(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn relu_of_both_signs_reconstructs_abs() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![-2.0, -0.5, 0.0, 0.5, 2.0];
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 5], vals.clone()));
        let nx = tape.scale(x, -1.0);
        let rp = tape.relu(x);
        let rn = tape.relu(nx);
        let s = tape.add(rp, rn);
        for (o, v) in tape.value(s).data().iter().zip(&vals) {
            assert_eq!(*o, v.abs());
        }
    }

    #[test]
    fn tanh_stays_strictly_inside_unit_interval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 4], vec![-50.0, -1.0, 1.0, 50.0]));
        let t = tape.tanh(x);
        for &v in tape.value(t).data() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn concat_backward_splits_by_channel() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::full([1, 2, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full([1, 1, 2, 2], 2.0));
        let cat = tape.concat_c(&[a, b]);
        assert_eq!(tape.value(cat).shape(), [1, 3, 2, 2]);
        let loss = tape.mean(cat);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().numel(), 8);
        assert_eq!(grads.get(b).unwrap().numel(), 4);
        for &g in grads.get(b).unwrap().data() {
            assert!((g - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sep_filter_box_taps_average_rows_and_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let taps = vec![1.0 / 3.0; 3];
        let f = tape.sep_filter_valid(x, &taps);
        assert_eq!(tape.value(f).shape(), [1, 1, 1, 1]);
        assert!((tape.value(f).item() - 5.0).abs() < 1e-12);
    }
}

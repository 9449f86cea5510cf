//! Adam optimizer with bias correction.

use thiserror::Error;

use super::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient for parameter {index} ({name}); step aborted")]
    NonFiniteGrad { index: usize, name: String },
}

/// Per-parameter first/second moment estimates plus the shared step counter.
/// Moments are kept in the parameter precision so checkpoints round-trip
/// bit-exactly; the update arithmetic itself runs in f64.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_shapes: &[[usize; 4]]) -> Self {
        AdamState {
            m: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed state. Moment shapes must match the
    /// parameters this state will be stepped with.
    pub fn restore(m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) -> Self {
        assert_eq!(m.len(), v.len(), "moment vectors must pair up");
        AdamState {
            m,
            v,
            t,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update, applied in place. `names` is used only for
    /// error messages and may be shorter than `params`. Any non-finite
    /// gradient aborts the whole step before any parameter changes.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
        names: &[String],
    ) -> Result<(), AdamError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(AdamError::NonFiniteGrad {
                    index: i,
                    name: names.get(i).cloned().unwrap_or_default(),
                });
            }
            assert_eq!(
                g.shape(),
                params[i].shape(),
                "gradient shape mismatch for parameter {i}"
            );
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for ((pv, gv), (mv, vv)) in pd
                .iter_mut()
                .zip(g.data())
                .zip(md.iter_mut().zip(vd.iter_mut()))
            {
                let gf = gv.to_f64();
                let mf = self.beta1 * mv.to_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vv.to_f64() + (1.0 - self.beta2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *pv = T::from_f64(pv.to_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f32>::full([1, 1, 1, 3], 0.7);
        let g = Tensor::<f32>::zeros([1, 1, 1, 3]);
        let mut state = AdamState::new(&[p.shape()]);
        state.step(&mut [&mut p], &[&g], 0.1, &[]).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.7));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // Bias correction makes the first update lr * g / (|g| + eps').
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::<f64>::scalar(0.003);
        let mut state = AdamState::new(&[p.shape()]);
        state.step(&mut [&mut p], &[&g], 0.1, &[]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-4, "got {}", p.item());
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::<f64>::scalar(0.5);
        let mut state = AdamState::new(&[p.shape()]);
        let mut last = p.item();
        for _ in 0..50 {
            state.step(&mut [&mut p], &[&g], 0.01, &[]).unwrap();
            assert!(p.item() < last);
            last = p.item();
        }
    }

    #[test]
    fn nan_gradient_aborts_without_touching_parameters() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let g = Tensor::<f32>::scalar(f32::NAN);
        let mut state = AdamState::new(&[p.shape()]);
        let err = state
            .step(&mut [&mut p], &[&g], 0.1, &[String::from("w")])
            .unwrap_err();
        assert!(matches!(err, AdamError::NonFiniteGrad { index: 0, .. }));
        assert_eq!(p.item(), 1.0);
        assert_eq!(state.step_count(), 0, "aborted step must not consume t");
    }
}

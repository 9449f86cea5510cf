//! Loss primitives recorded on the tape: the SSIM index, its loss form
//! 1 - SSIM, and mean squared error. Gradients flow to both arguments.

use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Local-statistics parameters for the SSIM index: Gaussian window plus the
/// two stabilizing constants on dynamic range L = 1.
#[derive(Clone, Debug)]
pub struct SsimParams {
    /// Side length of the Gaussian window; odd.
    pub window: usize,
    /// Standard deviation of the window, in pixels.
    pub sigma: f64,
    /// Luminance stabilizer, (0.01 * L)^2.
    pub c1: f64,
    /// Contrast/structure stabilizer, (0.03 * L)^2.
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimParams {
    /// Window taps, computed and normalized to sum one in f64, then
    /// narrowed to the working precision.
    pub fn gaussian_taps<T: Scalar>(&self) -> Vec<T> {
        assert!(self.window >= 1 && self.window % 2 == 1, "window must be odd");
        assert!(self.sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0);
        let c = (self.window / 2) as f64;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter().map(|&t| T::from_f64(t / sum)).collect()
    }
}

/// Mean SSIM index over all valid window positions and channels, in (-1, 1].
///
/// Local means and second moments come from the separable Gaussian window
/// with no padding, variances are the uncentered-moment form E[x^2] - mu^2,
/// and the map is the product of the luminance and contrast/structure
/// factors. Identical inputs give exactly 1, and the expression is bitwise
/// symmetric in its arguments.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, params: &SsimParams) -> Var {
    let shape = tape.value(x).shape();
    assert_eq!(shape, tape.value(y).shape(), "ssim shape mismatch");
    assert!(
        shape[2] >= params.window && shape[3] >= params.window,
        "{}x{} input smaller than the {} window",
        shape[2],
        shape[3],
        params.window
    );
    let taps = params.gaussian_taps::<T>();
    let c1 = T::from_f64(params.c1);
    let c2 = T::from_f64(params.c2);
    let two = T::from_f64(2.0);

    let mu_x = tape.sep_filter_valid(x, &taps);
    let mu_y = tape.sep_filter_valid(y, &taps);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let e_xx = tape.sep_filter_valid(xx, &taps);
    let e_yy = tape.sep_filter_valid(yy, &taps);
    let e_xy = tape.sep_filter_valid(xy, &taps);
    let mu_xx = tape.mul(mu_x, mu_x);
    let mu_yy = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let var_x = tape.sub(e_xx, mu_xx);
    let var_y = tape.sub(e_yy, mu_yy);
    let cov = tape.sub(e_xy, mu_xy);

    let l_num = {
        let t = tape.scale(mu_xy, two);
        tape.add_scalar(t, c1)
    };
    let l_den = {
        let t = tape.add(mu_xx, mu_yy);
        tape.add_scalar(t, c1)
    };
    let cs_num = {
        let t = tape.scale(cov, two);
        tape.add_scalar(t, c2)
    };
    let cs_den = {
        let t = tape.add(var_x, var_y);
        tape.add_scalar(t, c2)
    };
    let num = tape.mul(l_num, cs_num);
    let den = tape.mul(l_den, cs_den);
    let map = tape.div(num, den);
    tape.mean(map)
}

/// SSIM loss 1 - ssim(x, y): non-negative, zero only at equality.
pub fn ssim_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, params: &SsimParams) -> Var {
    let s = ssim(tape, x, y, params);
    let neg = tape.scale(s, T::from_f64(-1.0));
    tape.add_scalar(neg, T::ONE)
}

/// Mean SSIM of two already-computed tensors, default window, no gradients.
pub fn ssim_index(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mut tape: Tape<f32> = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let s = ssim(&mut tape, va, vb, &SsimParams::default());
    tape.value(s).item() as f64
}

/// Mean squared difference.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Var {
    assert_eq!(
        tape.value(x).shape(),
        tape.value(y).shape(),
        "mse shape mismatch"
    );
    let d = tape.sub(x, y);
    let d2 = tape.mul(d, d);
    tape.mean(d2)
}

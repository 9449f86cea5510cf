//! Self-supervised single-image deraining.
//!
//! The pipeline has two stages. Stage one turns a rainy photograph into a
//! blurred rain-free "soft label" without any paired data: the image is
//! bicubically downscaled by 8, restored by a small super-resolving denoiser,
//! combined with the original through an element-wise minimum, and smoothed
//! with a guided filter. Stage two trains a compact residual network against
//! those soft labels, then transplants the rain it extracts onto unrelated
//! clean images to build sharp synthetic pairs that teach the same network to
//! keep detail.
//!
//! Crate layout mirrors that split: [`tensor`] is the differentiable array
//! engine everything runs on, [`imaging`] holds the classical operators,
//! [`metrics`] the loss primitives, [`srdn`]/[`transform`] stage one,
//! [`derain`]/[`trainer`] stage two, and [`fixtures`]/[`eval`] the synthetic
//! test harness.

pub mod derain;
pub mod eval;
pub mod fixtures;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod srdn;
pub mod tensor;
pub mod trainer;
pub mod transform;

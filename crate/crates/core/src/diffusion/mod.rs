//! DDPM machinery: schedule, forward corruption, x̂₀ estimation and
//! (guided) ancestral sampling, plus two ε-predictors.

mod gmm;
mod sampling;
mod schedule;
mod tiny;

pub use gmm::{gmm_posterior_mean, gmm_predict_eps, GmmDenoiser, GmmPrior};
pub use sampling::{
    estimate_x0, estimate_x0_raw, guided_sample_step, posterior_mean, q_sample, sample,
    sample_step, sample_with,
};
pub use schedule::{build_linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
pub use tiny::{
    continue_training, train_tiny_denoiser, TinyConfig, TinyDenoiser, TrainConfig, TrainReport,
};

use crate::error::Result;
use crate::tensor::Tensor;

/// An ε-predictor `Z(x_t, t)`.
///
/// Implementations must be deterministic and return a tensor of the input's
/// shape. `t` runs over `1..=T`.
pub trait Denoiser: Send + Sync {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x_t, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_eps(x_t, t)
    }
}

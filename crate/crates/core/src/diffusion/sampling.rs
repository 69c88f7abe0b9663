use rand::Rng;
use rand_distr::StandardNormal;

use super::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t` without clamping.
pub fn estimate_x0_raw(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (inv, b) = ((1.0 / ab.sqrt()) as f32, (1.0 - ab).sqrt() as f32);
    x_t.zip_map(eps_hat, |x, e| (x - b * e) * inv)
}

/// x̂₀ estimate clamped to the model range `[-1, 1]`.
pub fn estimate_x0(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(estimate_x0_raw(x_t, eps_hat, t, sched)?.clamp(-1.0, 1.0))
}

/// Mean of `q(x_{t−1} | x_t, x̂₀)`.
pub fn posterior_mean(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x_t.zip_map(x0_hat, |xt, x0| (c0 * x0 as f64 + ct * xt as f64) as f32)
}

fn add_posterior_noise<R: Rng + ?Sized>(
    mut mean: Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Tensor {
    let var = sched.posterior_variance(t);
    if var > 0.0 {
        let sd = var.sqrt() as f32;
        for v in mean.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    mean
}

/// Draws `x_{t−1} ~ N(μ(x_t, x̂₀), β̃_t)`. No noise is drawn when `β̃_t = 0`.
pub fn sample_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, x0_hat, t, sched)?;
    Ok(add_posterior_noise(mean, t, sched, rng))
}

/// Draws `x_{t−1} ~ N(μ − s·β̃_t·∇loss, β̃_t)`.
///
/// `loss_grad` is the gradient of a guidance loss with respect to x̂₀; the
/// mean moves against it. With `scale == 0` or a zero gradient the result is
/// bit-identical to [`sample_step`] for the same rng stream.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    loss_grad: &Tensor,
    scale: f32,
    rng: &mut R,
) -> Result<Tensor> {
    loss_grad.expect_shape("guided_sample_step", x_t.shape())?;
    let mut mean = posterior_mean(x_t, x0_hat, t, sched)?;
    if scale != 0.0 {
        let k = (scale as f64 * sched.posterior_variance(t)) as f32;
        for (m, g) in mean.data_mut().iter_mut().zip(loss_grad.data()) {
            *m -= k * g;
        }
    }
    Ok(add_posterior_noise(mean, t, sched, rng))
}

/// Unguided ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    shape: Shape,
    rng: &mut R,
) -> Result<Tensor> {
    sample_with(denoiser, sched, shape, rng, |_, _| {})
}

/// [`sample`], calling `observe(t, x_{t−1})` after every step.
pub fn sample_with<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    shape: Shape,
    rng: &mut R,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let mut x = Tensor::randn(shape, rng);
    for t in (1..=sched.timesteps()).rev() {
        let eps = denoiser.predict_eps(&x, t)?;
        if eps.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "predict_eps",
                left: shape,
                right: eps.shape(),
            });
        }
        let x0 = estimate_x0(&x, &eps, t, sched)?;
        x = sample_step(&x, &x0, t, sched, rng)?;
        observe(t, &x);
    }
    Ok(x)
}

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Per-timestep variance tables. Index `t` runs over `1..=T`; index 0 holds
/// the conventions `ᾱ₀ = 1`, `β₀ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

/// Linearly spaced betas from `beta_start` at `t = 1` to `beta_end` at `t = T`.
pub fn build_linear_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::invalid(format!(
            "schedule needs at least 2 timesteps, got {timesteps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let step = (beta_end - beta_start) / (timesteps - 1) as f64;
    NoiseSchedule::from_betas(
        (0..timesteps)
            .map(|i| beta_start + step * i as f64)
            .collect(),
    )
}

impl NoiseSchedule {
    /// Builds the tables from `β₁..β_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::invalid("schedule needs at least 2 timesteps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut all_betas = Vec::with_capacity(betas.len() + 1);
        all_betas.push(0.0);
        all_betas.extend(betas);
        let mut alpha_bars = vec![1.0];
        let mut posterior_variances = vec![0.0];
        for t in 1..all_betas.len() {
            let beta = all_betas[t];
            let prev = alpha_bars[t - 1];
            let ab = prev * (1.0 - beta);
            alpha_bars.push(ab);
            posterior_variances.push((1.0 - prev) / (1.0 - ab) * beta);
        }
        Ok(NoiseSchedule {
            betas: all_betas,
            alpha_bars,
            posterior_variances,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `β̃_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t]
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }
}

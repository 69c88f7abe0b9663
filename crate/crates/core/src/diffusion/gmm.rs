use rand::Rng;
use rand_distr::StandardNormal;

use super::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Gaussian mixture over single images, with diagonal covariances.
///
/// Serves as an exactly-known data distribution: its MMSE denoiser has a
/// closed form, so sampling with it must reproduce the mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Tensor>,
    variances: Vec<Tensor>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Tensor>, variances: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len() {
            return Err(Error::invalid(format!(
                "gmm needs matching non-empty component lists, got {} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("gmm weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("gmm weights sum to {total}, not 1")));
        }
        let shape = means[0].shape();
        if shape.batch() != 1 {
            return Err(Error::invalid("gmm components must be single images"));
        }
        for (m, v) in means.iter().zip(&variances) {
            m.expect_shape("gmm mean", shape)?;
            v.expect_shape("gmm variance", shape)?;
            if v.data().iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid("gmm component variance must be positive"));
            }
        }
        Ok(GmmPrior {
            weights,
            means,
            variances,
        })
    }

    /// Components sharing one isotropic variance.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Tensor>, variance: f32) -> Result<Self> {
        let variances = means
            .iter()
            .map(|m| Tensor::full(m.shape(), variance))
            .collect();
        Self::new(weights, means, variances)
    }

    /// Shape of one image, batch 1.
    pub fn item_shape(&self) -> Shape {
        self.means[0].shape()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn variances(&self) -> &[Tensor] {
        &self.variances
    }

    /// Draws `n` images and their component labels.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * self.item_shape().numel());
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            labels.push(k);
            for (m, v) in self.means[k].data().iter().zip(self.variances[k].data()) {
                let z: f32 = rng.sample(StandardNormal);
                data.push(m + v.sqrt() * z);
            }
        }
        let shape = self.item_shape().with_batch(n);
        (Tensor::from_vec(shape, data).expect("consistent"), labels)
    }

    /// Index of the component mean closest (L2) to a single image.
    pub fn nearest_component(&self, x: &Tensor) -> usize {
        let dist = |m: &Tensor| -> f64 {
            m.data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum()
        };
        (0..self.means.len())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .unwrap_or(0)
    }
}

/// `E[x0 | x_t]` under the mixture when `x_t = √ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn gmm_posterior_mean(prior: &GmmPrior, x_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let item = prior.item_shape();
    if x_t.shape().with_batch(1) != item {
        return Err(Error::ShapeMismatch {
            op: "gmm_posterior_mean",
            left: x_t.shape(),
            right: item,
        });
    }
    let sa = alpha_bar.sqrt();
    let noise = 1.0 - alpha_bar;
    let d = item.numel();
    let k = prior.components();
    let mut out = Vec::with_capacity(x_t.numel());
    let mut logits = vec![0.0f64; k];
    for x in x_t.data().chunks(d) {
        for (c, logit) in logits.iter_mut().enumerate() {
            let m = prior.means[c].data();
            let v = prior.variances[c].data();
            let mut ll = 0.0;
            for i in 0..d {
                let s = alpha_bar * v[i] as f64 + noise;
                let r = x[i] as f64 - sa * m[i] as f64;
                ll -= 0.5 * (r * r / s + s.ln());
            }
            *logit = prior.weights[c].ln() + ll;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let resp: Vec<f64> = logits.iter().map(|l| (l - max).exp() / norm).collect();
        for i in 0..d {
            let mut e = 0.0;
            for (c, r) in resp.iter().enumerate() {
                if *r == 0.0 {
                    continue;
                }
                let m = prior.means[c].data()[i] as f64;
                let v = prior.variances[c].data()[i] as f64;
                let gain = sa * v / (alpha_bar * v + noise);
                e += r * (m + gain * (x[i] as f64 - sa * m));
            }
            out.push(e as f32);
        }
    }
    Tensor::from_vec(x_t.shape(), out)
}

/// Exact MMSE ε prediction under the mixture prior.
pub fn gmm_predict_eps(
    prior: &GmmPrior,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let e0 = gmm_posterior_mean(prior, x_t, ab)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(&e0, |x, m| ((x as f64 - sa * m as f64) / sn) as f32)
}

/// [`Denoiser`] wrapper around [`gmm_predict_eps`].
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    pub prior: GmmPrior,
    pub schedule: NoiseSchedule,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior, schedule: NoiseSchedule) -> Self {
        GmmDenoiser { prior, schedule }
    }
}

impl Denoiser for GmmDenoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        gmm_predict_eps(&self.prior, x_t, t, &self.schedule)
    }
}

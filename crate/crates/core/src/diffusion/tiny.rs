//! A small convolutional encoder–decoder ε-predictor trained from scratch.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

use super::{q_sample, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gradtape::{Activation, AdamConfig, AdamState, Graph, Var};
use crate::nn::{conv_params, conv_params_mut, Conv2d, Module, LEAKY_SLOPE};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TinyConfig {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub image_channels: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            base_channels: 32,
            embed_dim: 32,
            image_channels: 3,
        }
    }
}

// Layer slots, in parameter order.
const STEM: usize = 0;
const ENC: usize = 1;
const DOWN1: usize = 2;
const DOWN2: usize = 3;
const MID: usize = 4;
const UP2: usize = 5;
const UP1: usize = 6;
const HEAD: usize = 7;
const TIME: usize = 8;
const PROJ1: usize = 9;
const PROJ2: usize = 10;
const PROJ3: usize = 11;
const LAYERS: usize = 12;

/// Three-level encoder–decoder with additive skips. A sinusoidal timestep
/// embedding is projected to a per-channel offset at each encoder level.
///
/// Spatial dims must be multiples of 4.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyDenoiser {
    config: TinyConfig,
    layers: Vec<Conv2d>,
}

fn he_gain() -> f32 {
    (6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub(crate) fn timestep_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * f).sin() as f32);
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * f).cos() as f32);
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::from_vec(Shape::new(timesteps.len(), dim, 1, 1), data).expect("consistent")
}

impl TinyDenoiser {
    pub fn new<R: Rng + ?Sized>(config: TinyConfig, rng: &mut R) -> Self {
        let c = config.base_channels;
        let ic = config.image_channels;
        let e = config.embed_dim;
        let g = he_gain();
        let mut layers = Vec::with_capacity(LAYERS);
        layers.push(Conv2d::new(ic, c, 3, 1, 1, 3f32.sqrt(), rng)); // STEM
        layers.push(Conv2d::new(c, c, 3, 1, 1, g, rng)); // ENC
        layers.push(Conv2d::new(c, 2 * c, 3, 2, 1, g, rng)); // DOWN1
        layers.push(Conv2d::new(2 * c, 2 * c, 3, 2, 1, g, rng)); // DOWN2
        layers.push(Conv2d::new(2 * c, 2 * c, 3, 1, 1, g, rng)); // MID
        layers.push(Conv2d::new(2 * c, 2 * c, 3, 1, 1, g, rng)); // UP2
        layers.push(Conv2d::new(2 * c, c, 3, 1, 1, g, rng)); // UP1
        layers.push(Conv2d::new(c, ic, 3, 1, 1, 0.5, rng)); // HEAD
        layers.push(Conv2d::new(e, 2 * c, 1, 1, 0, g, rng)); // TIME
        layers.push(Conv2d::new(2 * c, c, 1, 1, 0, 3f32.sqrt(), rng)); // PROJ1
        layers.push(Conv2d::new(2 * c, 2 * c, 1, 1, 0, 3f32.sqrt(), rng)); // PROJ2
        layers.push(Conv2d::new(2 * c, 2 * c, 1, 1, 0, 3f32.sqrt(), rng)); // PROJ3
        TinyDenoiser { config, layers }
    }

    pub fn config(&self) -> TinyConfig {
        self.config
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let [_, c, h, w] = shape.0;
        if c != self.config.image_channels || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "tiny denoiser expects {} channels and spatial dims divisible by 4, got {shape}",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    /// Records the forward pass; `timesteps` has one entry per batch item.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        self.check_input(g.shape(x))?;
        if timesteps.len() != g.shape(x).batch() {
            return Err(Error::invalid("one timestep per batch item required"));
        }
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let layer = |g: &mut Graph, i: usize, x: Var| {
            self.layers[i].forward(g, &params[2 * i..2 * i + 2], x)
        };

        let emb = g.constant(timestep_embedding(timesteps, self.config.embed_dim));
        let th = layer(g, TIME, emb)?;
        let th = g.activation(th, act);
        let p1 = layer(g, PROJ1, th)?;
        let p2 = layer(g, PROJ2, th)?;
        let p3 = layer(g, PROJ3, th)?;

        let s = layer(g, STEM, x)?;
        let h1 = layer(g, ENC, s)?;
        let h1 = g.add_channel(h1, p1)?;
        let h1 = g.activation(h1, act);
        let h2 = layer(g, DOWN1, h1)?;
        let h2 = g.add_channel(h2, p2)?;
        let h2 = g.activation(h2, act);
        let h3 = layer(g, DOWN2, h2)?;
        let h3 = g.add_channel(h3, p3)?;
        let h3 = g.activation(h3, act);
        let m = layer(g, MID, h3)?;
        let m = g.activation(m, act);

        let u = g.upsample2x(m);
        let u = layer(g, UP2, u)?;
        let u = g.activation(u, act);
        let u2 = g.add(u, h2)?;
        let u = g.upsample2x(u2);
        let u = layer(g, UP1, u)?;
        let u = g.activation(u, act);
        let u1 = g.add(u, h1)?;
        layer(g, HEAD, u1)
    }
}

/// Version tag of the serialised parameter layout.
pub const TINY_FORMAT_VERSION: f32 = 1.0;

impl TinyDenoiser {
    /// A metadata tensor `[version, base_channels, embed_dim, image_channels]`
    /// followed by the parameters.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let c = self.config;
        let meta = Tensor::from_vec(
            Shape::new(1, 1, 1, 4),
            vec![
                TINY_FORMAT_VERSION,
                c.base_channels as f32,
                c.embed_dim as f32,
                c.image_channels as f32,
            ],
        )
        .expect("meta shape");
        std::iter::once(meta)
            .chain(self.parameters().into_iter().cloned())
            .collect()
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let meta = tensors
            .first()
            .ok_or_else(|| Error::Decode("empty parameter file".into()))?;
        if meta.shape() != Shape::new(1, 1, 1, 4) || meta.data()[0] != TINY_FORMAT_VERSION {
            return Err(Error::Decode("not a tiny denoiser parameter file".into()));
        }
        let dim = |v: f32| {
            if (1.0..=4096.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Decode(format!("bad model dimension {v}")))
            }
        };
        let config = TinyConfig {
            base_channels: dim(meta.data()[1])?,
            embed_dim: dim(meta.data()[2])?,
            image_channels: dim(meta.data()[3])?,
        };
        // Shapes come from a deterministic init; the values are overwritten.
        let mut model = TinyDenoiser::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        model.load_parameters(&tensors[1..])?;
        Ok(model)
    }
}

impl Module for TinyDenoiser {
    fn parameters(&self) -> Vec<&Tensor> {
        conv_params(&self.layers)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.layers)
    }
}

impl Denoiser for TinyDenoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let ts = vec![t; x_t.shape().batch()];
        let out = self.forward(&mut g, &params, x, &ts)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub model: TinyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            model: TinyConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: TinyDenoiser,
    /// ε-prediction MSE per step.
    pub losses: Vec<f32>,
}

fn flip_horizontal(x: &Tensor) -> Tensor {
    let [_, _, h, w] = x.shape().0;
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for i in 0..w {
            dst[i] = src[w - 1 - i];
        }
    }
    debug_assert_eq!(out.numel() % (h * w), 0);
    out
}

/// Fits ε-prediction on images in model range by minimising
/// `‖ε − Z(√ᾱ_t·x0 + √(1−ᾱ_t)·ε, t)‖²` with uniformly drawn `t`.
///
/// The model is initialised from `rng` before any step is taken, so
/// `steps == 0` returns the initial weights.
pub fn train_tiny_denoiser<R: Rng + ?Sized>(
    images: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let model = TinyDenoiser::new(cfg.model, rng);
    continue_training(model, images, sched, cfg, rng)
}

/// Like [`train_tiny_denoiser`] but starting from existing weights.
pub fn continue_training<R: Rng + ?Sized>(
    mut model: TinyDenoiser,
    images: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let shape = images[0].shape();
    for im in images {
        im.expect_shape("train_tiny_denoiser", shape)?;
        if im.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("training images must lie in [-1, 1]"));
        }
    }
    model.check_input(shape)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = AdamState::new(model.parameters(), AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut eps_all = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let mut x0 = images.choose(rng).expect("non-empty").clone();
            if rng.random_bool(0.5) {
                x0 = flip_horizontal(&x0);
            }
            let t = rng.random_range(1..=sched.timesteps());
            let eps = Tensor::randn(shape, rng);
            xs.push(q_sample(&x0, t, &eps, sched)?);
            eps_all.push(eps);
            ts.push(t);
        }
        let x_t = Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?;
        let eps = Tensor::concat_batch(&eps_all.iter().collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let xv = g.constant(x_t);
        let target = g.constant(eps);
        let pred = model.forward(&mut g, &params, xv, &ts)?;
        let loss = g.mse(pred, target)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::non_finite(losses.len(), "denoiser training loss"));
        }
        let grads = g.backward(loss)?.collect(&g, &params);
        adam.step(&mut model.parameters_mut(), &grads)?;
        losses.push(lv);
    }
    Ok(TrainReport { model, losses })
}

//! Test-time degradation modeling: a degradation network φ and a domain
//! discriminator D, each updated once per reverse-sampling timestep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradtape::{Activation, AdamConfig, AdamState, Graph, LogTerm, Var};
use crate::nn::{conv_params, conv_params_mut, Conv2d, Module, LEAKY_SLOPE};
use crate::tensor::{Shape, Tensor};

/// Seed of the fixed feature extractor. Changing it changes every perceptual loss.
pub const FEATURE_SEED: u64 = 0x5eed_f00d;

const IMAGE_CHANNELS: usize = 3;
const PHI_WIDTH: usize = 16;

fn leaky() -> Activation {
    Activation::LeakyRelu(LEAKY_SLOPE)
}

fn leaky_gain() -> f32 {
    (6.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// φ: four 3×3 convolutions, 3→16→16→16→3, leaky ReLU in between, output
/// clamped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationNet {
    layers: Vec<Conv2d>,
}

impl DegradationNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let c = [
            IMAGE_CHANNELS,
            PHI_WIDTH,
            PHI_WIDTH,
            PHI_WIDTH,
            IMAGE_CHANNELS,
        ];
        let layers = (0..4)
            .map(|i| Conv2d::new(c[i], c[i + 1], 3, 1, 1, leaky_gain(), rng))
            .collect();
        DegradationNet { layers }
    }

    /// Weights realising the identity on `[-1, 1]` exactly.
    ///
    /// Uses `lrelu(x) − lrelu(−x) = (1 + slope)·x`: each colour channel is
    /// carried as a ± pair of hidden channels through centre taps.
    pub fn identity() -> Self {
        let k = 1.0 / (1.0 + LEAKY_SLOPE);
        let c = [
            IMAGE_CHANNELS,
            PHI_WIDTH,
            PHI_WIDTH,
            PHI_WIDTH,
            IMAGE_CHANNELS,
        ];
        let layers = (0..4)
            .map(|l| {
                let (ci, co) = (c[l], c[l + 1]);
                let mut w = Tensor::zeros(Shape::new(co, ci, 3, 3));
                for ch in 0..IMAGE_CHANNELS {
                    let mut set = |o: usize, i: usize, v: f32| {
                        let idx = w.index(o, i, 1, 1);
                        w.data_mut()[idx] = v;
                    };
                    match l {
                        0 => {
                            set(2 * ch, ch, 1.0);
                            set(2 * ch + 1, ch, -1.0);
                        }
                        3 => {
                            set(ch, 2 * ch, k);
                            set(ch, 2 * ch + 1, -k);
                        }
                        _ => {
                            set(2 * ch, 2 * ch, k);
                            set(2 * ch, 2 * ch + 1, -k);
                            set(2 * ch + 1, 2 * ch, -k);
                            set(2 * ch + 1, 2 * ch + 1, k);
                        }
                    }
                }
                Conv2d {
                    weight: w,
                    bias: Tensor::zeros(Shape::new(1, co, 1, 1)),
                    stride: 1,
                    padding: 1,
                }
            })
            .collect();
        DegradationNet { layers }
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &params[2 * i..2 * i + 2], h)?;
            if i + 1 < self.layers.len() {
                h = g.activation(h, leaky());
            }
        }
        Ok(g.clamp(h, -1.0, 1.0))
    }

    /// φ(x) without recording gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

impl Module for DegradationNet {
    fn parameters(&self) -> Vec<&Tensor> {
        conv_params(&self.layers)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.layers)
    }
}

/// Four strided convolutions, global mean and a sigmoid: one probability per
/// batch item, clamped to `[PROB_EPS, 1 − PROB_EPS]` by the log terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDiscriminator {
    layers: Vec<Conv2d>,
}

impl DomainDiscriminator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let g = leaky_gain();
        let layers = vec![
            Conv2d::new(IMAGE_CHANNELS, 16, 3, 2, 1, g, rng),
            Conv2d::new(16, 32, 3, 2, 1, g, rng),
            Conv2d::new(32, 32, 3, 2, 1, g, rng),
            Conv2d::new(32, 1, 3, 1, 1, 3f32.sqrt(), rng),
        ];
        DomainDiscriminator { layers }
    }

    /// `(N, 3, H, W) -> (N, 1, 1, 1)` probabilities.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &params[2 * i..2 * i + 2], h)?;
            if i + 1 < self.layers.len() {
                h = g.activation(h, leaky());
            }
        }
        let m = g.spatial_mean(h);
        Ok(g.activation(m, Activation::Sigmoid))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

impl Module for DomainDiscriminator {
    fn parameters(&self) -> Vec<&Tensor> {
        conv_params(&self.layers)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.layers)
    }
}

/// V: three fixed random 3×3 convolution + ReLU layers (3→16→16→16).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 6f32.sqrt();
        let layers = vec![
            Conv2d::new(IMAGE_CHANNELS, 16, 3, 1, 1, gain, &mut rng),
            Conv2d::new(16, 16, 3, 1, 1, gain, &mut rng),
            Conv2d::new(16, 16, 3, 1, 1, gain, &mut rng),
        ];
        FeatureExtractor { layers }
    }

    /// The extractor every job uses.
    pub fn pinned() -> Self {
        Self::from_seed(FEATURE_SEED)
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &params[2 * i..2 * i + 2], h)?;
            h = g.activation(h, Activation::Relu);
        }
        Ok(h)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

impl Module for FeatureExtractor {
    fn parameters(&self) -> Vec<&Tensor> {
        conv_params(&self.layers)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdmConfig {
    /// Weights of the reconstruction, perceptual and adversarial terms.
    pub lambda: [f32; 3],
    pub lr: f32,
    /// Adam steps per timestep for each of φ and D.
    pub steps: usize,
    /// Re-initialise φ, D and their optimisers before every timestep instead
    /// of warm-starting across the job.
    pub reinit_each_step: bool,
}

impl TdmConfig {
    pub fn new(lambda: [f32; 3]) -> Self {
        TdmConfig {
            lambda,
            lr: 1e-3,
            steps: 1,
            reinit_each_step: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::config("lambda", "weights must be finite and >= 0"));
        }
        if !self.lambda.iter().any(|l| *l > 0.0) {
            return Err(Error::config(
                "lambda",
                "at least one weight must be positive",
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("tdm_lr", "must be positive"));
        }
        Ok(())
    }
}

/// Values of the φ objective and its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TdmLosses {
    pub rec: f64,
    pub pec: f64,
    pub gan: f64,
    pub phi: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TdmRecord {
    /// φ losses before the update.
    pub losses: TdmLosses,
    /// Discriminator loss before its update.
    pub dis: f64,
}

/// Graph nodes of the φ objective.
#[derive(Clone, Copy, Debug)]
pub struct PhiLossVars {
    pub rec: Var,
    pub pec: Var,
    pub gan: Var,
    pub total: Var,
    /// φ(x), needed as the discriminator's fake batch.
    pub phi_out: Var,
}

/// Records `λ₁·‖x − φ(x)‖² + λ₂·‖V(x) − V(φ(x))‖² + λ₃·mean log(1 − D(φ(x)))`.
///
/// Terms with a zero weight are recorded for logging but kept out of `total`.
#[allow(clippy::too_many_arguments)]
pub fn phi_loss_graph(
    g: &mut Graph,
    x: Var,
    phi: &DegradationNet,
    phi_params: &[Var],
    d: &DomainDiscriminator,
    d_params: &[Var],
    v: &FeatureExtractor,
    v_params: &[Var],
    lambda: [f32; 3],
) -> Result<PhiLossVars> {
    let phi_out = phi.forward(g, phi_params, x)?;
    let rec = g.mse(x, phi_out)?;
    let fx = v.forward(g, v_params, x)?;
    let fphi = v.forward(g, v_params, phi_out)?;
    let pec = g.mse(fx, fphi)?;
    let dout = d.forward(g, d_params, phi_out)?;
    let gan = g.mean_log(dout, LogTerm::LogOneMinus)?;
    let mut total: Option<Var> = None;
    for (term, w) in [rec, pec, gan].into_iter().zip(lambda) {
        if w == 0.0 {
            continue;
        }
        let weighted = g.scale(term, w);
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("lambda", "all weights are zero"))?;
    Ok(PhiLossVars {
        rec,
        pec,
        gan,
        total,
        phi_out,
    })
}

/// `−mean log D(real) − mean log(1 − D(fake))`.
pub fn discriminator_loss_graph(
    g: &mut Graph,
    d: &DomainDiscriminator,
    d_params: &[Var],
    real: Var,
    fake: Var,
) -> Result<Var> {
    let dr = d.forward(g, d_params, real)?;
    let df = d.forward(g, d_params, fake)?;
    let a = g.mean_log(dr, LogTerm::Log)?;
    let b = g.mean_log(df, LogTerm::LogOneMinus)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Discriminator loss from given probabilities.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(d_real.clone());
    let f = g.constant(d_fake.clone());
    let a = g.mean_log(r, LogTerm::Log)?;
    let b = g.mean_log(f, LogTerm::LogOneMinus)?;
    Ok(-(g.value(a).item() as f64) - g.value(b).item() as f64)
}

/// Evaluates the φ objective on the batch `x` without updating anything.
pub fn tdm_losses(
    x: &Tensor,
    phi: &DegradationNet,
    d: &DomainDiscriminator,
    v: &FeatureExtractor,
    lambda: [f32; 3],
) -> Result<TdmLosses> {
    let mut g = Graph::new();
    let pp = phi.bind(&mut g, false);
    let dp = d.bind(&mut g, false);
    let vp = v.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let vars = phi_loss_graph(&mut g, xv, phi, &pp, d, &dp, v, &vp, lambda)?;
    Ok(read_losses(&g, &vars))
}

fn read_losses(g: &Graph, vars: &PhiLossVars) -> TdmLosses {
    let item = |v: Var| g.value(v).item() as f64;
    TdmLosses {
        rec: item(vars.rec),
        pec: item(vars.pec),
        gan: item(vars.gan),
        phi: item(vars.total),
    }
}

/// Per-job TDM state: φ, D, the fixed V and both optimisers.
#[derive(Clone, Debug)]
pub struct Tdm {
    cfg: TdmConfig,
    phi: DegradationNet,
    d: DomainDiscriminator,
    v: FeatureExtractor,
    opt_phi: AdamState,
    opt_d: AdamState,
    rng: ChaCha8Rng,
}

impl Tdm {
    /// Fresh networks drawn from `rng`, the pinned feature extractor.
    pub fn new(cfg: TdmConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let phi = DegradationNet::new(&mut rng);
        let d = DomainDiscriminator::new(&mut rng);
        Ok(Self::with_networks(
            cfg,
            phi,
            d,
            FeatureExtractor::pinned(),
            rng,
        ))
    }

    pub fn with_networks(
        cfg: TdmConfig,
        phi: DegradationNet,
        d: DomainDiscriminator,
        v: FeatureExtractor,
        rng: ChaCha8Rng,
    ) -> Self {
        let adam = AdamConfig::with_lr(cfg.lr);
        let opt_phi = AdamState::new(phi.parameters(), adam);
        let opt_d = AdamState::new(d.parameters(), adam);
        Tdm {
            cfg,
            phi,
            d,
            v,
            opt_phi,
            opt_d,
            rng,
        }
    }

    pub fn config(&self) -> &TdmConfig {
        &self.cfg
    }

    pub fn phi(&self) -> &DegradationNet {
        &self.phi
    }

    pub fn discriminator(&self) -> &DomainDiscriminator {
        &self.d
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.v
    }

    fn reinit(&mut self) {
        self.phi = DegradationNet::new(&mut self.rng);
        self.d = DomainDiscriminator::new(&mut self.rng);
        let adam = AdamConfig::with_lr(self.cfg.lr);
        self.opt_phi = AdamState::new(self.phi.parameters(), adam);
        self.opt_d = AdamState::new(self.d.parameters(), adam);
    }

    /// One TDM round at timestep `t`: `cfg.steps` Adam steps on φ, each
    /// followed by one on D. `x0r` holds the referred estimates, if any.
    ///
    /// The inputs are treated as constants. Returns the losses seen before
    /// the last update (or the current losses when `steps == 0`).
    pub fn step(
        &mut self,
        x0g: &Tensor,
        x0r: Option<&Tensor>,
        y: &Tensor,
        t: usize,
    ) -> Result<TdmRecord> {
        y.expect_shape("tdm target", x0g.shape())?;
        let x = match x0r {
            Some(r) => Tensor::concat_batch(&[x0g, r])?,
            None => x0g.clone(),
        };
        if self.cfg.reinit_each_step {
            self.reinit();
        }
        if self.cfg.steps == 0 {
            let losses = tdm_losses(&x, &self.phi, &self.d, &self.v, self.cfg.lambda)?;
            let fake = self.phi.apply(&x)?;
            let dis = discriminator_loss(&self.d.apply(y)?, &self.d.apply(&fake)?)?;
            return Ok(TdmRecord { losses, dis });
        }
        let mut record = TdmRecord::default();
        for _ in 0..self.cfg.steps {
            record = self.step_once(&x, y, t)?;
        }
        Ok(record)
    }

    fn step_once(&mut self, x: &Tensor, y: &Tensor, t: usize) -> Result<TdmRecord> {
        let mut g = Graph::new();
        let pp = self.phi.bind(&mut g, true);
        let dp = self.d.bind(&mut g, false);
        let vp = self.v.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let vars = phi_loss_graph(
            &mut g,
            xv,
            &self.phi,
            &pp,
            &self.d,
            &dp,
            &self.v,
            &vp,
            self.cfg.lambda,
        )?;
        let losses = read_losses(&g, &vars);
        for (name, v) in [
            ("L_rec", losses.rec),
            ("L_pec", losses.pec),
            ("L_gan", losses.gan),
            ("L_phi", losses.phi),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(t, format!("tdm loss {name}")));
            }
        }
        let grads = g.backward(vars.total)?.collect(&g, &pp);
        let fake = g.value(vars.phi_out).clone();
        self.opt_phi.step(&mut self.phi.parameters_mut(), &grads)?;
        if !self.phi.is_finite() {
            return Err(Error::non_finite(t, "tdm phi parameters"));
        }

        let mut g = Graph::new();
        let dp = self.d.bind(&mut g, true);
        let real = g.constant(y.clone());
        let fake = g.constant(fake);
        let dis = discriminator_loss_graph(&mut g, &self.d, &dp, real, fake)?;
        let dis_value = g.value(dis).item() as f64;
        if !dis_value.is_finite() {
            return Err(Error::non_finite(t, "tdm loss L_dis"));
        }
        let grads = g.backward(dis)?.collect(&g, &dp);
        self.opt_d.step(&mut self.d.parameters_mut(), &grads)?;
        if !self.d.is_finite() {
            return Err(Error::non_finite(t, "tdm discriminator parameters"));
        }
        Ok(TdmRecord {
            losses,
            dis: dis_value,
        })
    }
}

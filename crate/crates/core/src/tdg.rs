//! Three-stage diffusion guidance: stage-dependent losses on x̂₀ whose
//! gradients steer the guided posterior mean.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradtape::{AdamConfig, AdamState, Graph, LogTerm, Var};
use crate::nn::Module;
use crate::tdm::{discriminator_loss_graph, DegradationNet, DomainDiscriminator, FeatureExtractor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    First,
    Second,
    Third,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::First => 1,
            Stage::Second => 2,
            Stage::Third => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// T of the sampler.
    pub timesteps: usize,
    /// Steps with 0-based index `t > b1` are in stage one.
    pub b1: usize,
    /// Steps with `b2 < t <= b1` are in stage two, the rest in stage three.
    pub b2: usize,
    pub gamma: [f32; 5],
    pub scale: f32,
    /// Also guide the referred trajectories in stages two and three.
    pub refer_all_stages: bool,
    /// Learning rate of the residual discriminator.
    pub lr: f32,
}

impl GuidanceConfig {
    /// Boundaries at 60% and 5% of `timesteps`.
    pub fn new(timesteps: usize, gamma: [f32; 5], scale: f32) -> Self {
        GuidanceConfig {
            timesteps,
            b1: default_b1(timesteps),
            b2: default_b2(timesteps),
            gamma,
            scale,
            refer_all_stages: false,
            lr: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timesteps;
        if t < 3 || self.b1 + 1 >= t {
            return Err(Error::config(
                "b1",
                format!("need T-1 > b1, got T={t}, b1={}", self.b1),
            ));
        }
        if self.b2 >= self.b1 {
            return Err(Error::config(
                "b2",
                format!("need b1 > b2 >= 0, got b1={}, b2={}", self.b1, self.b2),
            ));
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::config("gamma", "weights must be finite and >= 0"));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::config("scale", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("dres_lr", "must be positive"));
        }
        Ok(())
    }
}

pub fn default_b1(timesteps: usize) -> usize {
    (timesteps as f64 * 0.6).round() as usize
}

pub fn default_b2(timesteps: usize) -> usize {
    (timesteps as f64 * 0.05).round() as usize
}

/// Stage of the 0-based step index `t ∈ [0, T)`. A boundary index belongs
/// to the later (smaller-t) stage.
pub fn stage_of(t: usize, cfg: &GuidanceConfig) -> Result<Stage> {
    if t >= cfg.timesteps {
        return Err(Error::invalid(format!(
            "step index {t} outside [0, {})",
            cfg.timesteps
        )));
    }
    Ok(if t > cfg.b1 {
        Stage::First
    } else if t > cfg.b2 {
        Stage::Second
    } else {
        Stage::Third
    })
}

/// Unweighted loss values seen while forming a guidance tensor. `None`
/// marks a term that was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GuidanceTerms {
    pub rec: Option<f64>,
    pub pec: Option<f64>,
    pub gan: Option<f64>,
    pub tv: Option<f64>,
    /// The weighted total whose gradient is G.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    /// `∇_{x̂₀}` of the weighted loss.
    pub grad: Tensor,
    pub terms: GuidanceTerms,
}

fn zero_guidance(x: &Tensor) -> Guidance {
    Guidance {
        grad: Tensor::zeros(x.shape()),
        terms: GuidanceTerms::default(),
    }
}

/// `γ₁·∇‖y − φ(x̂₀)‖²`, item by item when `x0` holds several images.
pub fn guidance_stage1(
    x0: &Tensor,
    y: &Tensor,
    phi: &DegradationNet,
    gamma1: f32,
) -> Result<Guidance> {
    let item = x0.shape().with_batch(1);
    y.expect_shape("guidance target", item)?;
    if gamma1 == 0.0 {
        let mut g = zero_guidance(x0);
        g.terms.rec = None;
        return Ok(g);
    }
    let mut grads = Vec::with_capacity(x0.shape().batch());
    let mut rec_sum = 0.0;
    for x in x0.split_batch() {
        let mut g = Graph::new();
        let pp = phi.bind(&mut g, false);
        let xv = g.leaf(x);
        let yv = g.constant(y.clone());
        let out = phi.forward(&mut g, &pp, xv)?;
        let rec = g.mse(yv, out)?;
        let loss = g.scale(rec, gamma1);
        rec_sum += g.value(rec).item() as f64;
        grads.push(g.backward(loss)?.get(&g, xv));
    }
    let n = grads.len() as f64;
    let grad = Tensor::concat_batch(&grads.iter().collect::<Vec<_>>())?;
    Ok(Guidance {
        grad,
        terms: GuidanceTerms {
            rec: Some(rec_sum / n),
            total: gamma1 as f64 * rec_sum / n,
            ..Default::default()
        },
    })
}

/// Graph nodes of the stage-two/three objective; absent terms had zero weight.
#[derive(Clone, Copy, Debug)]
pub struct StageLossVars {
    pub rec: Option<Var>,
    pub pec: Option<Var>,
    pub gan: Option<Var>,
    pub tv: Option<Var>,
    pub total: Option<Var>,
}

/// Records `γ₂·‖y − φ(x)‖² + γ₃·‖V(y) − V(φ(x))‖² + γ₄·mean log(1 − Dres(x − y))`,
/// plus `γ₅·TV(x)` when `with_tv`. Zero-weighted terms are not evaluated.
#[allow(clippy::too_many_arguments)]
pub fn stage_loss_graph(
    g: &mut Graph,
    x: Var,
    y: Var,
    phi: (&DegradationNet, &[Var]),
    v: (&FeatureExtractor, &[Var]),
    dres: (&DomainDiscriminator, &[Var]),
    gamma: [f32; 5],
    with_tv: bool,
) -> Result<StageLossVars> {
    let [_, g2, g3, g4, g5] = gamma;
    let needs_phi = g2 != 0.0 || g3 != 0.0;
    let phi_out = if needs_phi {
        Some(phi.0.forward(g, phi.1, x)?)
    } else {
        None
    };
    let mut weighted = Vec::new();
    let mut rec = None;
    let mut pec = None;
    let mut gan = None;
    let mut tv = None;
    if g2 != 0.0 {
        let r = g.mse(y, phi_out.expect("phi evaluated"))?;
        weighted.push(g.scale(r, g2));
        rec = Some(r);
    }
    if g3 != 0.0 {
        let fy = v.0.forward(g, v.1, y)?;
        let fp = v.0.forward(g, v.1, phi_out.expect("phi evaluated"))?;
        let p = g.mse(fy, fp)?;
        weighted.push(g.scale(p, g3));
        pec = Some(p);
    }
    if g4 != 0.0 {
        let resid = g.sub(x, y)?;
        let d = dres.0.forward(g, dres.1, resid)?;
        let l = g.mean_log(d, LogTerm::LogOneMinus)?;
        weighted.push(g.scale(l, g4));
        gan = Some(l);
    }
    if with_tv && g5 != 0.0 {
        let l = g.total_variation(x)?;
        weighted.push(g.scale(l, g5));
        tv = Some(l);
    }
    let mut total = None;
    for w in weighted {
        total = Some(match total {
            None => w,
            Some(acc) => g.add(acc, w)?,
        });
    }
    Ok(StageLossVars {
        rec,
        pec,
        gan,
        tv,
        total,
    })
}

/// Guidance for the guided image plus, when applicable, for the referred ones.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGuidance {
    pub guided: Guidance,
    pub referred: Option<Guidance>,
    /// Residual-discriminator loss before its update, if it was updated.
    pub dres_loss: Option<f64>,
}

/// Per-job guidance state: the residual discriminator and its optimiser.
#[derive(Clone, Debug)]
pub struct Tdg {
    cfg: GuidanceConfig,
    dres: DomainDiscriminator,
    opt: AdamState,
}

impl Tdg {
    pub fn new(cfg: GuidanceConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let dres = DomainDiscriminator::new(rng);
        let opt = AdamState::new(dres.parameters(), AdamConfig::with_lr(cfg.lr));
        Ok(Tdg { cfg, dres, opt })
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.cfg
    }

    pub fn residual_discriminator(&self) -> &DomainDiscriminator {
        &self.dres
    }

    /// Guidance under `rule` at timestep `t` (used for diagnostics only).
    #[allow(clippy::too_many_arguments)]
    pub fn guide(
        &mut self,
        rule: Stage,
        x0g: &Tensor,
        x0r: Option<&Tensor>,
        y: &Tensor,
        phi: &DegradationNet,
        v: &FeatureExtractor,
        t: usize,
    ) -> Result<StepGuidance> {
        y.expect_shape("guidance target", x0g.shape())?;
        let gamma = self.cfg.gamma;
        let (guided, dres_loss) = match rule {
            Stage::First => (guidance_stage1(x0g, y, phi, gamma[0])?, None),
            Stage::Second | Stage::Third => {
                let guided = self.stage23(x0g, y, phi, v, rule == Stage::Third)?;
                let dres_loss = if gamma[3] != 0.0 {
                    Some(self.update_dres(x0g, x0r, y, phi, t)?)
                } else {
                    None
                };
                (guided, dres_loss)
            }
        };
        if !guided.grad.is_finite() || !guided.terms.total.is_finite() {
            return Err(Error::non_finite(t, format!("stage {rule} guidance")));
        }
        let referred = match x0r {
            Some(r) if rule == Stage::First => Some(guidance_stage1(r, y, phi, gamma[0])?),
            Some(r) if self.cfg.refer_all_stages => Some(guidance_stage1(r, y, phi, gamma[1])?),
            _ => None,
        };
        if let Some(r) = &referred {
            if !r.grad.is_finite() {
                return Err(Error::non_finite(t, "referred guidance"));
            }
        }
        Ok(StepGuidance {
            guided,
            referred,
            dres_loss,
        })
    }

    fn stage23(
        &self,
        x0: &Tensor,
        y: &Tensor,
        phi: &DegradationNet,
        v: &FeatureExtractor,
        with_tv: bool,
    ) -> Result<Guidance> {
        let mut g = Graph::new();
        let pp = phi.bind(&mut g, false);
        let vp = v.bind(&mut g, false);
        let dp = self.dres.bind(&mut g, false);
        let xv = g.leaf(x0.clone());
        let yv = g.constant(y.clone());
        let vars = stage_loss_graph(
            &mut g,
            xv,
            yv,
            (phi, &pp),
            (v, &vp),
            (&self.dres, &dp),
            self.cfg.gamma,
            with_tv,
        )?;
        let Some(total) = vars.total else {
            return Ok(zero_guidance(x0));
        };
        let item = |v: Option<Var>| v.map(|v| g.value(v).item() as f64);
        let terms = GuidanceTerms {
            rec: item(vars.rec),
            pec: item(vars.pec),
            gan: item(vars.gan),
            tv: item(vars.tv),
            total: g.value(total).item() as f64,
        };
        let grad = g.backward(total)?.get(&g, xv);
        Ok(Guidance { grad, terms })
    }

    /// One Adam step on Dres with real residuals `[x̂g, x̂r] − φ([x̂g, x̂r])`
    /// and fake residual `x̂g − y`.
    fn update_dres(
        &mut self,
        x0g: &Tensor,
        x0r: Option<&Tensor>,
        y: &Tensor,
        phi: &DegradationNet,
        t: usize,
    ) -> Result<f64> {
        let x = match x0r {
            Some(r) => Tensor::concat_batch(&[x0g, r])?,
            None => x0g.clone(),
        };
        let real = x.sub(&phi.apply(&x)?)?;
        let fake = x0g.sub(y)?;
        let mut g = Graph::new();
        let dp = self.dres.bind(&mut g, true);
        let rv = g.constant(real);
        let fv = g.constant(fake);
        let loss = discriminator_loss_graph(&mut g, &self.dres, &dp, rv, fv)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::non_finite(t, "residual discriminator loss"));
        }
        let grads = g.backward(loss)?.collect(&g, &dp);
        self.opt.step(&mut self.dres.parameters_mut(), &grads)?;
        if !self.dres.is_finite() {
            return Err(Error::non_finite(t, "residual discriminator parameters"));
        }
        Ok(value)
    }
}

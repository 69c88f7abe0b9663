//! One restoration job: guided and referred trajectories sampled from noise
//! while φ is learned and stage guidance is applied at every timestep.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{estimate_x0, guided_sample_step, sample_step, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tdg::{stage_of, GuidanceConfig, GuidanceTerms, Stage, Tdg};
use crate::tdm::{Tdm, TdmConfig, TdmRecord};
use crate::tensor::Tensor;

/// Stream of the job seed used for the guided trajectory. Unguided
/// [`crate::diffusion::sample`] with `ChaCha8Rng::seed_from_u64(seed)`
/// consumes the same stream.
pub const GUIDED_STREAM: u64 = 0;
/// Stream for the referred trajectories.
pub const REFERRED_STREAM: u64 = 1;
/// Stream for initialising φ, D and the residual discriminator.
pub const INIT_STREAM: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPreset {
    pub name: String,
    pub lambda: [f32; 3],
    pub gamma: [f32; 5],
    pub scale: f32,
}

impl TaskPreset {
    pub fn validate(&self) -> Result<()> {
        if self
            .lambda
            .iter()
            .chain(&self.gamma)
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::config("preset", "weights must be finite and >= 0"));
        }
        // s = 0 is accepted: it switches guidance off.
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::config("scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

pub const PRESET_NAMES: [&str; 6] = [
    "dehaze",
    "lowlight",
    "denoise",
    "toy_dehaze",
    "toy_lowlight",
    "toy_denoise",
];

/// Task weights. The plain names carry the published weights, tuned for a
/// large 256×256 prior; the `toy_` family is tuned for 32×32 toy images and
/// the tiny denoiser.
pub fn preset(task: &str) -> Result<TaskPreset> {
    let (lambda, gamma, scale) = match task {
        "dehaze" => ([0.2, 0.5, 0.2], [2.0, 1.0, 1e-3, 0.0, 1e-4], 25000.0),
        "lowlight" => ([0.05, 0.4, 0.5], [0.0, 1.0, 2e-3, 1e-4, 5e-5], 50000.0),
        "denoise" => ([3.0, 5e-3, 1e-3], [1.0, 0.9, 0.0, 0.0, 5e-4], 5000.0),
        "toy_dehaze" => ([0.2, 0.5, 0.2], [2.0, 1.0, 1e-3, 0.0, 1e-4], 2500.0),
        "toy_lowlight" => ([1.0, 0.4, 0.05], [0.0, 1.0, 2e-3, 1e-4, 5e-5], 2500.0),
        "toy_denoise" => ([3.0, 5e-3, 1e-3], [1.0, 0.9, 0.0, 0.0, 5e-3], 3000.0),
        other => {
            return Err(Error::config(
                "task",
                format!(
                    "unknown task `{other}`, expected one of {}",
                    PRESET_NAMES.join(", ")
                ),
            ))
        }
    };
    Ok(TaskPreset {
        name: task.to_string(),
        lambda,
        gamma,
        scale,
    })
}

/// Guidance schedules compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// The stage-one rule at every timestep.
    Uniform,
    /// Stage one replaced by the stage-two rule.
    MinusFirst,
    /// Stage two replaced by the stage-one rule.
    MinusSecond,
    /// Stage three replaced by the stage-two rule.
    MinusThird,
    /// All three stages.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Uniform,
        Variant::MinusFirst,
        Variant::MinusSecond,
        Variant::MinusThird,
        Variant::Full,
    ];

    /// The rule applied at a timestep whose natural stage is `stage`.
    pub fn rule(self, stage: Stage) -> Stage {
        match (self, stage) {
            (Variant::Uniform, _) => Stage::First,
            (Variant::MinusFirst, Stage::First) => Stage::Second,
            (Variant::MinusSecond, Stage::Second) => Stage::First,
            (Variant::MinusThird, Stage::Third) => Stage::Second,
            (_, s) => s,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Uniform => "U.G.",
            Variant::MinusFirst => "-F.S.",
            Variant::MinusSecond => "-S.S.",
            Variant::MinusThird => "-T.S.",
            Variant::Full => "TDG",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ug" | "u.g." | "uniform" => Variant::Uniform,
            "minusfs" | "-f.s." | "-fs" => Variant::MinusFirst,
            "minusss" | "-s.s." | "-ss" => Variant::MinusSecond,
            "minusts" | "-t.s." | "-ts" => Variant::MinusThird,
            "tdg" | "full" => Variant::Full,
            _ => return Err(Error::config("variant", format!("unknown variant `{s}`"))),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestoreConfig {
    pub preset: TaskPreset,
    pub k_referred: usize,
    pub seed: u64,
    /// Stage boundaries as 0-based step indices; `None` picks 60% / 5% of T.
    pub b1: Option<usize>,
    pub b2: Option<usize>,
    pub tdm_lr: f32,
    pub tdm_steps: usize,
    pub reinit_each_step: bool,
    pub refer_all_stages: bool,
    pub variant: Variant,
}

impl RestoreConfig {
    pub fn new(preset: TaskPreset, seed: u64) -> Self {
        RestoreConfig {
            preset,
            k_referred: 1,
            seed,
            b1: None,
            b2: None,
            tdm_lr: 1e-3,
            tdm_steps: 1,
            reinit_each_step: false,
            refer_all_stages: false,
            variant: Variant::Full,
        }
    }

    pub fn guidance(&self, timesteps: usize) -> GuidanceConfig {
        let mut g = GuidanceConfig::new(timesteps, self.preset.gamma, self.preset.scale);
        if let Some(b1) = self.b1 {
            g.b1 = b1;
        }
        if let Some(b2) = self.b2 {
            g.b2 = b2;
        }
        g.refer_all_stages = self.refer_all_stages;
        g
    }

    pub fn tdm(&self) -> TdmConfig {
        TdmConfig {
            lambda: self.preset.lambda,
            lr: self.tdm_lr,
            steps: self.tdm_steps,
            reinit_each_step: self.reinit_each_step,
        }
    }
}

/// Telemetry of one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub stage: Stage,
    /// Rule applied after the ablation remapping.
    pub rule: Stage,
    /// ‖G‖₂ of the guided image.
    pub gnorm: f64,
    pub tdm: TdmRecord,
    pub guide: GuidanceTerms,
    pub dres: Option<f64>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6e}"),
            None => "-".to_string(),
        };
        let l = &self.tdm.losses;
        write!(
            f,
            "t={} stage={} rule={} gnorm={:.6e} l_rec={:.6e} l_pec={:.6e} l_gan={:.6e} l_phi={:.6e} l_dis={:.6e} g_rec={} g_pec={} g_gan={} g_tv={} g_total={:.6e} l_dres={}",
            self.t,
            self.stage,
            self.rule,
            self.gnorm,
            l.rec,
            l.pec,
            l.gan,
            l.phi,
            self.tdm.dis,
            opt(self.guide.rec),
            opt(self.guide.pec),
            opt(self.guide.gan),
            opt(self.guide.tv),
            self.guide.total,
            opt(self.dres),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Restoration {
    /// x^g_0 in model range.
    pub image: Tensor,
    pub telemetry: Vec<StepRecord>,
    /// φ at the end of the job.
    pub tdm: Tdm,
}

fn check_finite(t: usize, what: &str, x: &Tensor) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(t, what))
    }
}

fn predict(den: &dyn Denoiser, x: &Tensor, t: usize) -> Result<Tensor> {
    let eps = den.predict_eps(x, t)?;
    if eps.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_eps",
            left: x.shape(),
            right: eps.shape(),
        });
    }
    Ok(eps)
}

/// Restores `y` (batch 1, model range).
pub fn restore(
    y: &Tensor,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &RestoreConfig,
) -> Result<Restoration> {
    restore_with(y, denoiser, sched, cfg, |_, _| {})
}

/// [`restore`], calling `observe(t, x^g_{t−1})` after every step.
pub fn restore_with(
    y: &Tensor,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &RestoreConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Restoration> {
    cfg.preset.validate()?;
    let shape = y.shape();
    if shape.batch() != 1 {
        return Err(Error::invalid(format!(
            "restore expects one image, got {shape}"
        )));
    }
    if y.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::invalid("input must lie in the model range [-1, 1]"));
    }
    let steps = sched.timesteps();
    let gcfg = cfg.guidance(steps);
    gcfg.validate()?;
    let scale = cfg.preset.scale;

    let mut rng_g = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_g.set_stream(GUIDED_STREAM);
    let mut rng_r = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_r.set_stream(REFERRED_STREAM);
    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(INIT_STREAM);

    let mut x_g = Tensor::randn(shape, &mut rng_g);
    let mut x_r =
        (cfg.k_referred > 0).then(|| Tensor::randn(shape.with_batch(cfg.k_referred), &mut rng_r));
    let mut tdg = Tdg::new(gcfg, &mut rng_init)?;
    let mut tdm = Tdm::new(cfg.tdm(), rng_init)?;
    let mut telemetry = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let x0g = estimate_x0(&x_g, &predict(denoiser, &x_g, t)?, t, sched)?;
        check_finite(t, "guided x0 estimate", &x0g)?;
        let x0r = match &x_r {
            Some(x) => {
                let e = estimate_x0(x, &predict(denoiser, x, t)?, t, sched)?;
                check_finite(t, "referred x0 estimate", &e)?;
                Some(e)
            }
            None => None,
        };

        let tdm_record = tdm.step(&x0g, x0r.as_ref(), y, t)?;

        let stage = stage_of(t - 1, &gcfg)?;
        let rule = cfg.variant.rule(stage);
        let guidance = if scale != 0.0 {
            Some(tdg.guide(rule, &x0g, x0r.as_ref(), y, tdm.phi(), tdm.features(), t)?)
        } else {
            None
        };

        let (gnorm, guide, dres) = match &guidance {
            Some(g) => {
                x_g = guided_sample_step(&x_g, &x0g, t, sched, &g.guided.grad, scale, &mut rng_g)?;
                (g.guided.grad.l2_norm(), g.guided.terms, g.dres_loss)
            }
            None => {
                x_g = sample_step(&x_g, &x0g, t, sched, &mut rng_g)?;
                (0.0, GuidanceTerms::default(), None)
            }
        };
        check_finite(t, "guided trajectory", &x_g)?;
        if let (Some(x), Some(x0)) = (&mut x_r, &x0r) {
            *x = match guidance.as_ref().and_then(|g| g.referred.as_ref()) {
                Some(rg) => guided_sample_step(x, x0, t, sched, &rg.grad, scale, &mut rng_r)?,
                None => sample_step(x, x0, t, sched, &mut rng_r)?,
            };
            check_finite(t, "referred trajectory", x)?;
        }
        observe(t, &x_g);
        telemetry.push(StepRecord {
            t,
            stage,
            rule,
            gnorm,
            tdm: tdm_record,
            guide,
            dres,
        });
    }
    Ok(Restoration {
        image: x_g.clamp(-1.0, 1.0),
        telemetry,
        tdm,
    })
}

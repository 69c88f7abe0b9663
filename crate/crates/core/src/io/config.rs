//! Run configuration shared by every command.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::kv;
use crate::degrade::{DegradationKind, DegradationSpec, Transmission};
use crate::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::error::{Error, Result};
use crate::pipeline::{preset, RestoreConfig, TaskPreset, Variant};

/// Where the ε-predictor comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserSource {
    /// Tiny denoiser parameter file.
    Tiny(PathBuf),
    /// Isotropic mixture with one component per clean image of a dataset directory.
    GmmDataset(PathBuf),
    /// Mixture stored as raw tensors: weights, then means, then variances.
    GmmFile(PathBuf),
}

impl FromStr for DenoiserSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let path = |p: &str| {
            if p.is_empty() {
                Err(Error::config("denoiser", "missing path"))
            } else {
                Ok(PathBuf::from(p))
            }
        };
        if let Some(p) = s.strip_prefix("gmm:") {
            Ok(DenoiserSource::GmmDataset(path(p)?))
        } else if let Some(p) = s.strip_prefix("gmm-file:") {
            Ok(DenoiserSource::GmmFile(path(p)?))
        } else if let Some(p) = s.strip_prefix("tiny:") {
            Ok(DenoiserSource::Tiny(path(p)?))
        } else {
            Ok(DenoiserSource::Tiny(path(s)?))
        }
    }
}

impl std::fmt::Display for DenoiserSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenoiserSource::Tiny(p) => write!(f, "tiny:{}", p.display()),
            DenoiserSource::GmmDataset(p) => write!(f, "gmm:{}", p.display()),
            DenoiserSource::GmmFile(p) => write!(f, "gmm-file:{}", p.display()),
        }
    }
}

/// Every setting a command may read. All keys have defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Restoration.
    pub task: String,
    pub lambda: Option<[f32; 3]>,
    pub gamma: Option<[f32; 5]>,
    pub scale: Option<f32>,
    pub denoiser: DenoiserSource,
    pub gmm_variance: f32,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub b1: Option<usize>,
    pub b2: Option<usize>,
    pub k_referred: usize,
    pub seed: u64,
    pub tdm_lr: f32,
    pub tdm_steps: usize,
    pub reinit_each_step: bool,
    pub refer_all_stages: bool,
    pub variant: Variant,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
    // Datasets.
    pub dataset: PathBuf,
    pub source: String,
    pub side: usize,
    pub count: usize,
    pub degradation: String,
    pub sigma: f32,
    pub airlight: f32,
    pub transmission: Transmission,
    pub gamma_d: f32,
    pub read_noise: f32,
    // Training.
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub params_out: PathBuf,
    pub loss_csv: Option<PathBuf>,
    // Harness.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub limit: usize,
    pub phi_snapshot: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "toy_denoise".into(),
            lambda: None,
            gamma: None,
            scale: None,
            denoiser: DenoiserSource::Tiny(PathBuf::from("model.zt")),
            gmm_variance: 0.01,
            timesteps: 1000,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            b1: None,
            b2: None,
            k_referred: 1,
            seed: 0,
            tdm_lr: 1e-3,
            tdm_steps: 1,
            reinit_each_step: false,
            refer_all_stages: false,
            variant: Variant::Full,
            input: None,
            output: None,
            clean: None,
            telemetry: None,
            dataset: PathBuf::from("data"),
            source: "shapes32".into(),
            side: 32,
            count: 8,
            degradation: "noise".into(),
            sigma: 30.0,
            airlight: 0.8,
            transmission: Transmission::default(),
            gamma_d: 2.0,
            read_noise: 0.01,
            train_steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            base_channels: 32,
            embed_dim: 32,
            params_out: PathBuf::from("model.zt"),
            loss_csv: None,
            workers: 1,
            out_dir: PathBuf::from("results"),
            limit: 0,
            phi_snapshot: None,
        }
    }
}

/// Recognised keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "task",
    "lambda",
    "gamma",
    "scale",
    "denoiser",
    "gmm_variance",
    "timesteps",
    "beta_start",
    "beta_end",
    "b1",
    "b2",
    "k_referred",
    "seed",
    "tdm_lr",
    "tdm_steps",
    "reinit_each_step",
    "refer_all_stages",
    "variant",
    "input",
    "output",
    "clean",
    "telemetry",
    "dataset",
    "source",
    "side",
    "count",
    "degradation",
    "sigma",
    "airlight",
    "transmission",
    "gamma_d",
    "read_noise",
    "train_steps",
    "batch_size",
    "lr",
    "base_channels",
    "embed_dim",
    "params_out",
    "loss_csv",
    "workers",
    "out_dir",
    "limit",
    "phi_snapshot",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn finite(key: &str, v: &str) -> Result<f32> {
    let x: f32 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::config(key, "must be finite"))
    }
}

fn weights<const N: usize>(key: &str, v: &str) -> Result<Option<[f32; N]>> {
    if v == "preset" {
        return Ok(None);
    }
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::config(
            key,
            format!("expected {N} comma-separated numbers"),
        ));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = finite(key, p)?;
        if *o < 0.0 {
            return Err(Error::config(key, "weights must be >= 0"));
        }
    }
    Ok(Some(out))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got `{v}`"),
        )),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn path(key: &str, v: &str) -> Result<PathBuf> {
    opt_path(v).ok_or_else(|| Error::config(key, "path must not be empty"))
}

fn auto(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    /// Parses a config file. The first problem found is reported with its key.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for e in kv::parse(text)? {
            cfg.set(&e.key, &e.value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "task" => {
                preset(v)?;
                self.task = v.to_string();
            }
            "lambda" => self.lambda = weights(key, v)?,
            "gamma" => self.gamma = weights(key, v)?,
            "scale" => {
                self.scale = if v == "preset" {
                    None
                } else {
                    Some(finite(key, v)?)
                }
            }
            "denoiser" => self.denoiser = v.parse()?,
            "gmm_variance" => self.gmm_variance = finite(key, v)?,
            "timesteps" => self.timesteps = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "b1" => self.b1 = auto(key, v)?,
            "b2" => self.b2 = auto(key, v)?,
            "k_referred" => self.k_referred = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "tdm_lr" => self.tdm_lr = finite(key, v)?,
            "tdm_steps" => self.tdm_steps = num(key, v)?,
            "reinit_each_step" => self.reinit_each_step = boolean(key, v)?,
            "refer_all_stages" => self.refer_all_stages = boolean(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "input" => self.input = opt_path(v),
            "output" => self.output = opt_path(v),
            "clean" => self.clean = opt_path(v),
            "telemetry" => self.telemetry = opt_path(v),
            "dataset" => self.dataset = path(key, v)?,
            "source" => self.source = v.to_string(),
            "side" => self.side = num(key, v)?,
            "count" => self.count = num(key, v)?,
            "degradation" => self.degradation = v.to_string(),
            "sigma" => self.sigma = finite(key, v)?,
            "airlight" => self.airlight = finite(key, v)?,
            "transmission" => {
                self.transmission = if v == "field" {
                    Transmission::default()
                } else if let Some((lo, hi)) =
                    v.strip_prefix("field:").and_then(|r| r.split_once(','))
                {
                    Transmission::SmoothField {
                        lo: finite(key, lo.trim())?,
                        hi: finite(key, hi.trim())?,
                    }
                } else {
                    Transmission::Constant(finite(key, v)?)
                }
            }
            "gamma_d" => self.gamma_d = finite(key, v)?,
            "read_noise" => self.read_noise = finite(key, v)?,
            "train_steps" => self.train_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = finite(key, v)?,
            "base_channels" => self.base_channels = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "params_out" => self.params_out = path(key, v)?,
            "loss_csv" => self.loss_csv = opt_path(v),
            "workers" => self.workers = num(key, v)?,
            "out_dir" => self.out_dir = path(key, v)?,
            "limit" => self.limit = num(key, v)?,
            "phi_snapshot" => self.phi_snapshot = opt_path(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 3 {
            return Err(Error::config("timesteps", "must be at least 3"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::config(
                "beta_start",
                "need 0 < beta_start <= beta_end < 1",
            ));
        }
        if !(self.gmm_variance > 0.0) {
            return Err(Error::config("gmm_variance", "must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.side == 0 {
            return Err(Error::config("side", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "base_channels",
                "model widths must be positive",
            ));
        }
        self.degradation_spec()?.validate()?;
        self.restore_config()?.preset.validate()?;
        self.guidance_check()
    }

    fn guidance_check(&self) -> Result<()> {
        self.restore_config()?.guidance(self.timesteps).validate()?;
        self.restore_config()?.tdm().validate()
    }

    pub fn task_preset(&self) -> Result<TaskPreset> {
        let mut p = preset(&self.task)?;
        if let Some(l) = self.lambda {
            p.lambda = l;
        }
        if let Some(g) = self.gamma {
            p.gamma = g;
        }
        if let Some(s) = self.scale {
            p.scale = s;
        }
        Ok(p)
    }

    pub fn restore_config(&self) -> Result<RestoreConfig> {
        let mut r = RestoreConfig::new(self.task_preset()?, self.seed);
        r.k_referred = self.k_referred;
        r.b1 = self.b1;
        r.b2 = self.b2;
        r.tdm_lr = self.tdm_lr;
        r.tdm_steps = self.tdm_steps;
        r.reinit_each_step = self.reinit_each_step;
        r.refer_all_stages = self.refer_all_stages;
        r.variant = self.variant;
        Ok(r)
    }

    pub fn degradation_spec(&self) -> Result<DegradationSpec> {
        let kind = match self.degradation.as_str() {
            "noise" => DegradationKind::GaussianNoise { sigma: self.sigma },
            "haze" => DegradationKind::Haze {
                airlight: self.airlight,
                transmission: self.transmission,
            },
            "lowlight" => DegradationKind::LowLight {
                gamma: self.gamma_d,
                read_noise: self.read_noise,
            },
            other => {
                return Err(Error::config(
                    "degradation",
                    format!("unknown degradation `{other}`, expected noise, haze or lowlight"),
                ))
            }
        };
        Ok(DegradationSpec::new(kind, self.seed))
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| {
            o.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let list = |v: &[f32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let au = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let transmission = match self.transmission {
            Transmission::Constant(t) => t.to_string(),
            Transmission::SmoothField { lo, hi } => format!("field:{lo},{hi}"),
        };
        let values: Vec<String> = vec![
            self.task.clone(),
            self.lambda.map_or("preset".into(), |l| list(&l)),
            self.gamma.map_or("preset".into(), |g| list(&g)),
            self.scale.map_or("preset".into(), |s| s.to_string()),
            self.denoiser.to_string(),
            self.gmm_variance.to_string(),
            self.timesteps.to_string(),
            self.beta_start.to_string(),
            self.beta_end.to_string(),
            au(self.b1),
            au(self.b2),
            self.k_referred.to_string(),
            self.seed.to_string(),
            self.tdm_lr.to_string(),
            self.tdm_steps.to_string(),
            self.reinit_each_step.to_string(),
            self.refer_all_stages.to_string(),
            self.variant.label().to_string(),
            p(&self.input),
            p(&self.output),
            p(&self.clean),
            p(&self.telemetry),
            self.dataset.display().to_string(),
            self.source.clone(),
            self.side.to_string(),
            self.count.to_string(),
            self.degradation.clone(),
            self.sigma.to_string(),
            self.airlight.to_string(),
            transmission,
            self.gamma_d.to_string(),
            self.read_noise.to_string(),
            self.train_steps.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.base_channels.to_string(),
            self.embed_dim.to_string(),
            self.params_out.display().to_string(),
            p(&self.loss_csv),
            self.workers.to_string(),
            self.out_dir.display().to_string(),
            self.limit.to_string(),
            p(&self.phi_snapshot),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

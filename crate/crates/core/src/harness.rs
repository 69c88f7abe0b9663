//! Dataset plumbing, denoiser loading, and the benchmark, ablation and
//! referred-count tables.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::degrade::{make_dataset, CleanSource, Pair};
use crate::diffusion::{
    build_linear_schedule, Denoiser, GmmDenoiser, GmmPrior, NoiseSchedule, TinyDenoiser,
};
use crate::error::{Error, Result};
use crate::io::config::{DenoiserSource, RunConfig};
use crate::io::image::{read_image, write_image};
use crate::io::manifest::{Manifest, MANIFEST_FILE};
use crate::io::rawtensor::{read_tensors, write_tensors};
use crate::metrics::{capped_psnr, MetricReport};
use crate::pipeline::{restore, RestoreConfig, Variant};
use crate::tensor::{Shape, Tensor};

/// Referred-image counts of the sweep table.
pub const REFERRED_SWEEP: [usize; 5] = [0, 1, 2, 3, 4];

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    build_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
}

/// Builds the clean source named by `cfg.source`: `shapes32`, `shapesN`, or a directory.
pub fn clean_source(cfg: &RunConfig) -> Result<CleanSource> {
    let s = cfg.source.as_str();
    if s == "shapes32" {
        return Ok(CleanSource::Shapes { side: 32 });
    }
    if s == "shapes" {
        return Ok(CleanSource::Shapes { side: cfg.side });
    }
    if let Some(n) = s.strip_prefix("shapes") {
        if let Ok(side) = n.parse::<usize>() {
            if side == 0 {
                return Err(Error::config("source", "side must be positive"));
            }
            return Ok(CleanSource::Shapes { side });
        }
    }
    let path = Path::new(s);
    if !path.is_dir() {
        return Err(Error::config(
            "source",
            format!("`{s}` is neither a shapes generator nor a directory"),
        ));
    }
    Ok(CleanSource::Dir {
        path: path.to_path_buf(),
        side: cfg.side,
    })
}

/// Generates the configured dataset and writes it with its manifest.
pub fn make_data(cfg: &RunConfig) -> Result<Manifest> {
    let spec = cfg.degradation_spec()?;
    let source = clean_source(cfg)?;
    let pairs = make_dataset(&source, &spec, cfg.count, cfg.seed)?;
    let mut meta = vec![
        ("source".to_string(), source.describe()),
        ("degradation".to_string(), spec.kind.name().to_string()),
    ];
    match spec.kind {
        crate::degrade::DegradationKind::GaussianNoise { sigma } => {
            meta.push(("sigma".into(), sigma.to_string()))
        }
        crate::degrade::DegradationKind::Haze { airlight, .. } => {
            meta.push(("airlight".into(), airlight.to_string()))
        }
        crate::degrade::DegradationKind::LowLight { gamma, read_noise } => {
            meta.push(("gamma_d".into(), gamma.to_string()));
            meta.push(("read_noise".into(), read_noise.to_string()));
        }
    }
    meta.push(("seed".into(), cfg.seed.to_string()));
    meta.push(("count".into(), cfg.count.to_string()));
    write_dataset(&cfg.dataset, &pairs, meta)
}

pub fn write_dataset(dir: &Path, pairs: &[Pair], meta: Vec<(String, String)>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        meta,
        pairs: Vec::with_capacity(pairs.len()),
    };
    for (i, p) in pairs.iter().enumerate() {
        let c = format!("clean_{i:03}.png");
        let d = format!("degraded_{i:03}.png");
        write_image(&dir.join(&c), &p.clean)?;
        write_image(&dir.join(&d), &p.degraded)?;
        manifest.pairs.push((c, d));
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`write_dataset`]; images in `[0, 1]`.
pub fn read_dataset(dir: &Path) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = Manifest::parse(&text)?;
    manifest
        .pairs
        .iter()
        .map(|(c, d)| {
            let clean = read_image(&dir.join(c))?;
            let degraded = read_image(&dir.join(d))?;
            clean.expect_shape("dataset pair", degraded.shape())?;
            Ok(Pair { clean, degraded })
        })
        .collect()
}

/// Equal-weight isotropic mixture with one component at each clean image.
pub fn gmm_from_images(images: &[Tensor], variance: f32) -> Result<GmmPrior> {
    if images.is_empty() {
        return Err(Error::invalid("no images for the mixture"));
    }
    let w = 1.0 / images.len() as f64;
    let mut weights = vec![w; images.len()];
    // Make the weights sum to one exactly.
    let rest: f64 = weights[1..].iter().sum();
    weights[0] = 1.0 - rest;
    GmmPrior::isotropic(
        weights,
        images.iter().map(|i| i.to_model_range()).collect(),
        variance,
    )
}

pub fn gmm_to_tensors(prior: &GmmPrior) -> Vec<Tensor> {
    let k = prior.components();
    let w = Tensor::from_vec(
        Shape::new(1, 1, 1, k),
        prior.weights().iter().map(|v| *v as f32).collect(),
    )
    .expect("weights shape");
    std::iter::once(w)
        .chain(prior.means().iter().cloned())
        .chain(prior.variances().iter().cloned())
        .collect()
}

pub fn gmm_from_tensors(tensors: &[Tensor]) -> Result<GmmPrior> {
    let w = tensors
        .first()
        .ok_or_else(|| Error::Decode("empty mixture file".into()))?;
    let k = w.numel();
    if tensors.len() != 1 + 2 * k || k == 0 {
        return Err(Error::Decode(format!(
            "mixture file with {k} weights needs {} tensors, found {}",
            1 + 2 * k,
            tensors.len()
        )));
    }
    // Stored as f32; renormalise so the sum-to-one check applies to the f64 copy.
    let raw: Vec<f64> = w.data().iter().map(|v| *v as f64).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() || (total - 1.0).abs() > 1e-5 {
        return Err(Error::Decode(format!("mixture weights sum to {total}")));
    }
    let weights = raw.iter().map(|v| v / total).collect();
    GmmPrior::new(weights, tensors[1..=k].to_vec(), tensors[k + 1..].to_vec())
        .map_err(|e| Error::Decode(e.to_string()))
}

pub fn load_denoiser(cfg: &RunConfig, sched: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
    Ok(match &cfg.denoiser {
        DenoiserSource::Tiny(p) => Box::new(TinyDenoiser::from_tensors(&read_tensors(p)?)?),
        DenoiserSource::GmmDataset(dir) => {
            let clean: Vec<Tensor> = read_dataset(dir)?.into_iter().map(|p| p.clean).collect();
            let prior = gmm_from_images(&clean, cfg.gmm_variance)?;
            Box::new(GmmDenoiser::new(prior, sched.clone()))
        }
        DenoiserSource::GmmFile(p) => Box::new(GmmDenoiser::new(
            gmm_from_tensors(&read_tensors(p)?)?,
            sched.clone(),
        )),
    })
}

pub fn save_gmm(path: &Path, prior: &GmmPrior) -> Result<()> {
    write_tensors(path, &gmm_to_tensors(prior))
}

/// Runs `f` over `jobs` on `workers` threads; results keep input order.
pub fn run_parallel<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(usize, &J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().enumerate().map(|(i, j)| f(i, j)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(i, &jobs[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Per-image metrics of the degraded input and of its restoration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskReport {
    pub input: MetricReport,
    pub restored: MetricReport,
}

fn restore_pair(
    pair: &Pair,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    cfg: &RestoreConfig,
) -> Result<Tensor> {
    let y = pair.degraded.to_model_range();
    Ok(restore(&y, denoiser, sched, cfg)?.image.to_unit_range())
}

/// Restores every pair; job `i` uses seed `base.seed + i`.
pub fn benchmark(
    pairs: &[Pair],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    base: &RestoreConfig,
    workers: usize,
) -> Result<(TaskReport, Vec<Tensor>)> {
    let outputs = run_parallel(pairs, workers, |i, p| {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(i as u64);
        restore_pair(p, denoiser, sched, &cfg)
    })?;
    let mut report = TaskReport::default();
    for (p, out) in pairs.iter().zip(&outputs) {
        report.input.push(&p.degraded, &p.clean)?;
        report.restored.push(out, &p.clean)?;
    }
    Ok((report, outputs))
}

/// One metric table row per label.
pub type Table<L> = Vec<(L, MetricReport)>;

/// Restores every pair under each guidance variant.
pub fn ablation(
    pairs: &[Pair],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    base: &RestoreConfig,
    workers: usize,
) -> Result<Table<Variant>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.variant = v;
            Ok((
                v,
                benchmark(pairs, denoiser, sched, &cfg, workers)?.0.restored,
            ))
        })
        .collect()
}

/// Restores every pair with `k ∈ {0, …, 4}` referred images.
pub fn referred_sweep(
    pairs: &[Pair],
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    base: &RestoreConfig,
    workers: usize,
) -> Result<Table<usize>> {
    REFERRED_SWEEP
        .iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.k_referred = k;
            Ok((
                k,
                benchmark(pairs, denoiser, sched, &cfg, workers)?.0.restored,
            ))
        })
        .collect()
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

/// Per-image rows plus a `mean` row.
pub fn task_csv(report: &TaskReport) -> String {
    let mut s = String::from("image,input_psnr,input_ssim,restored_psnr,restored_ssim\n");
    for i in 0..report.restored.len() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            f4(capped_psnr(report.input.psnr[i])),
            f4(report.input.ssim[i]),
            f4(capped_psnr(report.restored.psnr[i])),
            f4(report.restored.ssim[i]),
        );
    }
    let _ = writeln!(
        s,
        "mean,{},{},{},{}",
        f4(report.input.mean_psnr()),
        f4(report.input.mean_ssim()),
        f4(report.restored.mean_psnr()),
        f4(report.restored.mean_ssim()),
    );
    s
}

pub fn table_csv<L: std::fmt::Display>(first_column: &str, table: &[(L, MetricReport)]) -> String {
    let mut s = format!("{first_column},psnr,ssim\n");
    for (label, r) in table {
        let _ = writeln!(s, "{label},{},{}", f4(r.mean_psnr()), f4(r.mean_ssim()));
    }
    s
}

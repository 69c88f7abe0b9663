//! Experiment bodies shared by the acceptance target and the module tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use restore_core::degrade::{
    make_dataset, shapes, shapes32, CleanSource, DegradationKind, DegradationSpec, Pair,
};
use restore_core::diffusion::{
    build_linear_schedule, sample_with, train_tiny_denoiser, GmmDenoiser, GmmPrior, NoiseSchedule,
    TinyDenoiser, TrainConfig,
};
use restore_core::harness::{self, gmm_from_images, Table};
use restore_core::metrics::MetricReport;
use restore_core::pipeline::{preset, restore, restore_with, RestoreConfig, Variant};
use restore_core::tdm::{tdm_losses, Tdm, TdmConfig};
use restore_core::{Shape, Tensor};

pub fn linear(t: usize) -> NoiseSchedule {
    build_linear_schedule(t, 1e-4, 2e-2).unwrap()
}

/// Two well separated components in 16 dimensions.
pub fn two_component_prior() -> GmmPrior {
    let s = Shape::new(1, 1, 4, 4);
    let a = Tensor::from_vec(
        s,
        (0..16)
            .map(|i| if i % 2 == 0 { 0.6 } else { -0.2 })
            .collect(),
    )
    .unwrap();
    let b = Tensor::from_vec(s, (0..16).map(|i| if i < 8 { -0.5 } else { 0.3 }).collect()).unwrap();
    GmmPrior::isotropic(vec![0.3, 0.7], vec![a, b], 0.01).unwrap()
}

pub struct SamplerStats {
    pub weights: Vec<f64>,
    pub occupancy: Vec<f64>,
    /// L∞ distance between each component mean and its samples' mean.
    pub mean_err: Vec<f64>,
}

/// Unguided reverse sampling with the analytic denoiser, `n` draws.
pub fn gmm_sampler_stats(n: usize, seed: u64) -> SamplerStats {
    let prior = two_component_prior();
    let sched = linear(1000);
    let den = GmmDenoiser::new(prior.clone(), sched.clone());
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = sample_with(&den, &sched, Shape::new(n, 1, 4, 4), &mut r, |_, _| {}).unwrap();
    let k = prior.components();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0f64; 16]; k];
    for item in x.split_batch() {
        let c = prior.nearest_component(&item);
        counts[c] += 1;
        sums[c]
            .iter_mut()
            .zip(item.data())
            .for_each(|(s, v)| *s += *v as f64);
    }
    let mean_err = (0..k)
        .map(|c| {
            prior.means()[c]
                .data()
                .iter()
                .zip(&sums[c])
                .map(|(m, s)| (*m as f64 - s / counts[c].max(1) as f64).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    SamplerStats {
        weights: prior.weights().to_vec(),
        occupancy: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        mean_err,
    }
}

/// Mixture over a few 8×8 shape images, and one noisy input from the same family.
pub fn small_gmm_fixture(side: usize, t: usize) -> (GmmDenoiser, NoiseSchedule, Tensor) {
    let sched = linear(t);
    let clean = shapes(4, side, 21);
    let prior = gmm_from_images(&clean, 0.05).unwrap();
    let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 30.0 }, 3);
    let y = restore_core::degrade::apply(&spec, &clean[0])
        .unwrap()
        .to_model_range();
    (GmmDenoiser::new(prior, sched.clone()), sched, y)
}

/// Runs the pipeline and the plain sampler from the same seed; true when
/// every intermediate `x_{t−1}` and the output agree bit for bit.
pub fn null_guidance_matches(t: usize, cfg: &RestoreConfig) -> bool {
    let (den, sched, y) = small_gmm_fixture(8, t);
    let mut guided = Vec::with_capacity(t);
    let out = restore_with(&y, &den, &sched, cfg, |_, x| guided.push(x.clone())).unwrap();
    let mut plain = Vec::with_capacity(t);
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = sample_with(&den, &sched, y.shape(), &mut r, |_, x| {
        plain.push(x.clone())
    })
    .unwrap();
    guided.len() == t
        && guided.iter().zip(&plain).all(|(a, b)| bits(a) == bits(b))
        && bits(&out.image) == bits(&x.clamp(-1.0, 1.0))
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// `(initial L_φ, final L_φ)` of standalone TDM training on clean batches
/// against a gamma-0.5 brightened target.
pub fn tdm_gamma_run(steps: usize, lambda: [f32; 3]) -> (f64, f64) {
    let clean = shapes32(4, 101);
    let x = Tensor::concat_batch(&clean.iter().collect::<Vec<_>>()).unwrap();
    let y = x.map(|v| v.sqrt()).to_model_range();
    let x = x.to_model_range();
    let mut tdm = Tdm::new(TdmConfig::new(lambda), ChaCha8Rng::seed_from_u64(5)).unwrap();
    let initial = tdm_losses(&x, tdm.phi(), tdm.discriminator(), tdm.features(), lambda)
        .unwrap()
        .phi;
    for t in 0..steps {
        tdm.step(&x, None, &y, t).unwrap();
    }
    let last = tdm_losses(&x, tdm.phi(), tdm.discriminator(), tdm.features(), lambda)
        .unwrap()
        .phi;
    (initial, last)
}

/// `(initial L_rec, final L_rec)` with `λ = (1, 0, 0)` and targets equal to inputs.
pub fn tdm_identity_run(steps: usize) -> (f64, f64) {
    let clean = shapes32(2, 55);
    let x = Tensor::concat_batch(&clean.iter().collect::<Vec<_>>())
        .unwrap()
        .to_model_range();
    let lambda = [1.0, 0.0, 0.0];
    let mut tdm = Tdm::new(TdmConfig::new(lambda), ChaCha8Rng::seed_from_u64(6)).unwrap();
    let rec = |tdm: &Tdm| {
        tdm_losses(&x, tdm.phi(), tdm.discriminator(), tdm.features(), lambda)
            .unwrap()
            .rec
    };
    let initial = rec(&tdm);
    for t in 0..steps {
        tdm.step(&x, None, &x, t).unwrap();
    }
    (initial, rec(&tdm))
}

pub struct DenoiseRun {
    pub train_seconds: f64,
    pub final_loss: f32,
    pub noisy: MetricReport,
    pub restored: MetricReport,
}

/// Trains the tiny denoiser on shapes32, then restores 8 σ = 30 images.
pub fn denoise_analog(cfg: &TrainConfig, workers: usize) -> DenoiseRun {
    let sched = linear(1000);
    let train: Vec<Tensor> = shapes32(512, 1234)
        .iter()
        .map(|t| t.to_model_range())
        .collect();
    let start = std::time::Instant::now();
    let report =
        train_tiny_denoiser(&train, &sched, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let train_seconds = start.elapsed().as_secs_f64();
    let tail = report.losses.len().saturating_sub(100);
    let final_loss =
        report.losses[tail..].iter().sum::<f32>() / (report.losses.len() - tail).max(1) as f32;
    let (noisy, restored) = denoise_eval(&report.model, &sched, workers);
    DenoiseRun {
        train_seconds,
        final_loss,
        noisy,
        restored,
    }
}

pub fn denoise_pairs() -> Vec<Pair> {
    let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 30.0 }, 5);
    make_dataset(&CleanSource::Shapes { side: 32 }, &spec, 8, 777).unwrap()
}

pub fn denoise_eval(
    model: &TinyDenoiser,
    sched: &NoiseSchedule,
    workers: usize,
) -> (MetricReport, MetricReport) {
    let pairs = denoise_pairs();
    let base = RestoreConfig::new(preset("toy_denoise").unwrap(), 0);
    let (report, _) = harness::benchmark(&pairs, model, sched, &base, workers).unwrap();
    (report.input, report.restored)
}

pub struct AblationRun {
    pub ablation: Table<Variant>,
    pub sweep: Table<usize>,
}

/// Ablation and referred-count tables on 16×16 pairs with an analytic prior.
pub fn ablation_run(t: usize) -> AblationRun {
    let sched = linear(t);
    let spec = DegradationSpec::new(DegradationKind::GaussianNoise { sigma: 30.0 }, 8);
    let pairs = make_dataset(&CleanSource::Shapes { side: 16 }, &spec, 2, 31).unwrap();
    let clean: Vec<Tensor> = pairs.iter().map(|p| p.clean.clone()).collect();
    let den = GmmDenoiser::new(gmm_from_images(&clean, 0.05).unwrap(), sched.clone());
    let base = RestoreConfig::new(preset("toy_denoise").unwrap(), 3);
    AblationRun {
        ablation: harness::ablation(&pairs, &den, &sched, &base, 1).unwrap(),
        sweep: harness::referred_sweep(&pairs, &den, &sched, &base, 1).unwrap(),
    }
}

/// Restores the small fixture twice; true when both outputs and telemetry
/// match exactly.
pub fn restore_is_deterministic(t: usize) -> bool {
    let (den, sched, y) = small_gmm_fixture(8, t);
    let cfg = RestoreConfig::new(preset("toy_dehaze").unwrap(), 17);
    let a = restore(&y, &den, &sched, &cfg).unwrap();
    let b = restore(&y, &den, &sched, &cfg).unwrap();
    let text = |r: &restore_core::pipeline::Restoration| {
        r.telemetry
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    bits(&a.image) == bits(&b.image) && text(&a) == text(&b)
}

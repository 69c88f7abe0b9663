use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use restore_core::diffusion::{train_tiny_denoiser, TinyConfig, TrainConfig};
use restore_core::harness::{self, REFERRED_SWEEP};
use restore_core::io::config::RunConfig;
use restore_core::io::image::{hconcat, read_image, write_image};
use restore_core::io::rawtensor::write_tensors;
use restore_core::metrics::{capped_psnr, psnr, ssim};
use restore_core::nn::Module;
use restore_core::pipeline::restore;
use restore_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "zrestore",
    version,
    about = "Zero-shot image restoration with a diffusion prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean/degraded pairs and a manifest.
    MakeData(Common),
    /// Train the tiny denoiser on a dataset's clean images.
    TrainDenoiser(Common),
    /// Restore one image.
    Restore(Common),
    /// Task table, ablation table and referred-count sweep over a dataset.
    Benchmark(Common),
    /// Ablation table and referred-count sweep only.
    Ablate(Common),
    /// Restore, then write a [degraded | clean | φ(clean)] strip.
    TdmViz(Common),
    /// Print the effective configuration.
    ShowConfig(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.set)?;
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config {
        field: key.to_string(),
        message: "required by this command".to_string(),
    })
}

fn make_data(cfg: &RunConfig) -> Result<()> {
    let m = harness::make_data(cfg)?;
    println!("wrote {} pairs to {}", m.pairs.len(), cfg.dataset.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let sched = harness::schedule(cfg)?;
    let images: Vec<_> = harness::read_dataset(&cfg.dataset)?
        .into_iter()
        .map(|p| p.clean.to_model_range())
        .collect();
    let tc = TrainConfig {
        steps: cfg.train_steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        model: TinyConfig {
            base_channels: cfg.base_channels,
            embed_dim: cfg.embed_dim,
            image_channels: 3,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = train_tiny_denoiser(&images, &sched, &tc, &mut rng)?;
    write_tensors(&cfg.params_out, &report.model.to_tensors())?;
    let csv_path = cfg
        .loss_csv
        .clone()
        .unwrap_or_else(|| cfg.params_out.with_extension("loss.csv"));
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.4}\n"));
    }
    std::fs::write(&csv_path, csv)?;
    println!(
        "trained {} parameters for {} steps; wrote {} and {}",
        report.model.parameter_count(),
        report.losses.len(),
        cfg.params_out.display(),
        csv_path.display()
    );
    Ok(())
}

fn restore_cmd(cfg: &RunConfig) -> Result<()> {
    let input = required(&cfg.input, "input")?;
    let y = read_image(input)?;
    let sched = harness::schedule(cfg)?;
    let den = harness::load_denoiser(cfg, &sched)?;
    let r = restore(
        &y.to_model_range(),
        den.as_ref(),
        &sched,
        &cfg.restore_config()?,
    )?;
    let out = r.image.to_unit_range();
    let out_path = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("restored.png"));
    write_image(&out_path, &out)?;
    if let Some(t) = &cfg.telemetry {
        let mut s = String::new();
        for rec in &r.telemetry {
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        std::fs::write(t, s)?;
    }
    println!("wrote {}", out_path.display());
    if let Some(c) = &cfg.clean {
        let clean = read_image(c)?;
        println!("image,input_psnr,input_ssim,restored_psnr,restored_ssim");
        println!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            input.display(),
            capped_psnr(psnr(&y, &clean)?),
            ssim(&y, &clean)?,
            capped_psnr(psnr(&out, &clean)?),
            ssim(&out, &clean)?
        );
    }
    Ok(())
}

fn dataset_pairs(cfg: &RunConfig) -> Result<Vec<restore_core::degrade::Pair>> {
    let mut pairs = harness::read_dataset(&cfg.dataset)?;
    if cfg.limit > 0 {
        pairs.truncate(cfg.limit);
    }
    Ok(pairs)
}

fn benchmark(cfg: &RunConfig, with_task: bool) -> Result<()> {
    let sched = harness::schedule(cfg)?;
    let den = harness::load_denoiser(cfg, &sched)?;
    let pairs = dataset_pairs(cfg)?;
    let base = cfg.restore_config()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    if with_task {
        let (report, outputs) =
            harness::benchmark(&pairs, den.as_ref(), &sched, &base, cfg.workers)?;
        for (i, o) in outputs.iter().enumerate() {
            write_image(&cfg.out_dir.join(format!("restored_{i:03}.png")), o)?;
        }
        std::fs::write(cfg.out_dir.join("task.csv"), harness::task_csv(&report))?;
        println!(
            "{}: input {:.4} dB / {:.4}, restored {:.4} dB / {:.4}",
            base.preset.name,
            report.input.mean_psnr(),
            report.input.mean_ssim(),
            report.restored.mean_psnr(),
            report.restored.mean_ssim()
        );
    }
    let table = harness::ablation(&pairs, den.as_ref(), &sched, &base, cfg.workers)?;
    std::fs::write(
        cfg.out_dir.join("ablation.csv"),
        harness::table_csv("variant", &table),
    )?;
    let sweep = harness::referred_sweep(&pairs, den.as_ref(), &sched, &base, cfg.workers)?;
    std::fs::write(
        cfg.out_dir.join("referred.csv"),
        harness::table_csv("k", &sweep),
    )?;
    println!(
        "wrote ablation ({} rows) and referred sweep (k = {:?}) to {}",
        table.len(),
        REFERRED_SWEEP,
        cfg.out_dir.display()
    );
    Ok(())
}

fn tdm_viz(cfg: &RunConfig) -> Result<()> {
    let y = read_image(required(&cfg.input, "input")?)?;
    let clean = read_image(required(&cfg.clean, "clean")?)?;
    clean.expect_shape("tdm-viz", y.shape())?;
    let sched = harness::schedule(cfg)?;
    let den = harness::load_denoiser(cfg, &sched)?;
    let r = restore(
        &y.to_model_range(),
        den.as_ref(),
        &sched,
        &cfg.restore_config()?,
    )?;
    let phi = r.tdm.phi();
    let degraded_clean = phi.apply(&clean.to_model_range())?.to_unit_range();
    let strip = hconcat(&[&y, &clean, &degraded_clean])?;
    let out_path = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("tdm.png"));
    write_image(&out_path, &strip)?;
    if let Some(p) = &cfg.phi_snapshot {
        let params: Vec<_> = phi.parameters().into_iter().cloned().collect();
        write_tensors(p, &params)?;
    }
    println!(
        "wrote {}; psnr(phi(clean), degraded) = {:.4} dB",
        out_path.display(),
        capped_psnr(psnr(&degraded_clean, &y)?)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(c) => make_data(&load_config(&c)?),
        Command::TrainDenoiser(c) => train(&load_config(&c)?),
        Command::Restore(c) => restore_cmd(&load_config(&c)?),
        Command::Benchmark(c) => benchmark(&load_config(&c)?, true),
        Command::Ablate(c) => benchmark(&load_config(&c)?, false),
        Command::TdmViz(c) => tdm_viz(&load_config(&c)?),
        Command::ShowConfig(c) => {
            print!("{}", load_config(&c)?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_bad_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

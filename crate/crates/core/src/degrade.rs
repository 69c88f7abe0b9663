//! Synthetic degradations with known ground truth, and the toy image generator.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transmission {
    Constant(f32),
    /// Low-frequency random field mapped to `[lo, hi]`.
    SmoothField {
        lo: f32,
        hi: f32,
    },
}

impl Default for Transmission {
    fn default() -> Self {
        Transmission::SmoothField { lo: 0.3, hi: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationKind {
    /// Additive Gaussian noise, `sigma` on the 0–255 scale.
    GaussianNoise { sigma: f32 },
    /// `y = x·t + A·(1 − t)`.
    Haze {
        airlight: f32,
        transmission: Transmission,
    },
    /// `y = x^γ + σ_r·z`.
    LowLight { gamma: f32, read_noise: f32 },
}

impl DegradationKind {
    pub fn name(&self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise { .. } => "noise",
            DegradationKind::Haze { .. } => "haze",
            DegradationKind::LowLight { .. } => "lowlight",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, seed: u64) -> Self {
        DegradationSpec { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        match self.kind {
            DegradationKind::GaussianNoise { sigma } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    return bad("sigma", "must be a finite value >= 0");
                }
            }
            DegradationKind::Haze {
                airlight,
                transmission,
            } => {
                if !(0.0..=1.0).contains(&airlight) {
                    return bad("airlight", "must lie in [0, 1]");
                }
                match transmission {
                    Transmission::Constant(t) if !(t > 0.0 && t <= 1.0) => {
                        return bad("transmission", "must lie in (0, 1]");
                    }
                    Transmission::SmoothField { lo, hi }
                        if !(lo > 0.0 && lo <= hi && hi <= 1.0) =>
                    {
                        return bad("transmission", "field range must satisfy 0 < lo <= hi <= 1");
                    }
                    _ => {}
                }
            }
            DegradationKind::LowLight { gamma, read_noise } => {
                if !(gamma >= 1.0) || !gamma.is_finite() {
                    return bad("gamma", "must be a finite value >= 1");
                }
                if !(read_noise >= 0.0) || !read_noise.is_finite() {
                    return bad("read_noise", "must be a finite value >= 0");
                }
            }
        }
        Ok(())
    }
}

/// Degrades `clean` (values in `[0, 1]`) with randomness drawn from `spec.seed`.
pub fn apply(spec: &DegradationSpec, clean: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    apply_with_rng(spec, clean, &mut rng)
}

pub fn apply_with_rng<R: Rng + ?Sized>(
    spec: &DegradationSpec,
    clean: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("clean image must lie in [0, 1]"));
    }
    let mut out = match spec.kind {
        DegradationKind::GaussianNoise { sigma } => {
            let sd = sigma / 255.0;
            clean.map(|v| {
                let z: f32 = rng.sample(StandardNormal);
                v + sd * z
            })
        }
        DegradationKind::Haze {
            airlight,
            transmission,
        } => {
            let [n, c, h, w] = clean.shape().0;
            let mut out = clean.clone();
            for b in 0..n {
                let field = transmission_field(transmission, h, w, rng);
                for ch in 0..c {
                    for (i, &t) in field.iter().enumerate() {
                        let idx = clean.index(b, ch, 0, 0) + i;
                        out.data_mut()[idx] = clean.data()[idx] * t + airlight * (1.0 - t);
                    }
                }
            }
            out
        }
        DegradationKind::LowLight { gamma, read_noise } => clean.map(|v| {
            let z: f32 = rng.sample(StandardNormal);
            v.powf(gamma) + read_noise * z
        }),
    };
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn transmission_field<R: Rng + ?Sized>(
    tr: Transmission,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<f32> {
    match tr {
        Transmission::Constant(t) => vec![t; h * w],
        Transmission::SmoothField { lo, hi } => {
            const GRID: usize = 4;
            let coarse: Vec<f32> = (0..GRID * GRID).map(|_| rng.random::<f32>()).collect();
            let coarse = Tensor::from_vec(Shape::new(1, 1, GRID, GRID), coarse).expect("grid");
            let fine = resize_bilinear(&coarse, h, w);
            fine.data().iter().map(|u| lo + (hi - lo) * u).collect()
        }
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = image.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, out_h, out_w));
    let coord = |o: usize, out_len: usize, in_len: usize| {
        let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = coord(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = coord(ox, out_w, w);
                    let top = image.at(b, ch, y0, x0) * (1.0 - fx) + image.at(b, ch, y0, x1) * fx;
                    let bot = image.at(b, ch, y1, x0) * (1.0 - fx) + image.at(b, ch, y1, x1) * fx;
                    out.data_mut()[k] = top * (1.0 - fy) + bot * fy;
                    k += 1;
                }
            }
        }
    }
    out
}

/// Centred square crop along the shorter edge, then bilinear resize to `side`.
pub fn center_crop_resize(image: &Tensor, side: usize) -> Result<Tensor> {
    let [n, c, h, w] = image.shape().0;
    if side == 0 {
        return Err(Error::invalid("side must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("image has an empty spatial dimension"));
    }
    let s = h.min(w);
    let (top, left) = ((h - s) / 2, (w - s) / 2);
    let mut crop = Tensor::zeros(Shape::new(n, c, s, s));
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..s {
                let row = image.index(b, ch, top + y, left);
                crop.data_mut()[k..k + s].copy_from_slice(&image.data()[row..row + s]);
                k += s;
            }
        }
    }
    if s == side {
        return Ok(crop);
    }
    Ok(resize_bilinear(&crop, side, side))
}

/// Random toy RGB image in `[0, 1]`: a gradient background with a few
/// flat-coloured rectangles and discs.
pub fn shapes_image<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros(Shape::new(1, 3, side, side));
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random());
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random());
    let angle: f32 = rng.random::<f32>() * std::f32::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = side as f32;
    for y in 0..side {
        for x in 0..side {
            let u = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.71) / 1.42;
            for ch in 0..3 {
                let i = img.index(0, ch, y, x);
                img.data_mut()[i] = c0[ch] + (c1[ch] - c0[ch]) * u;
            }
        }
    }
    let count = rng.random_range(2..=4);
    for _ in 0..count {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random());
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(s * 0.12..s * 0.35);
        let disc = rng.random_bool(0.5);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disc {
                    px * px + py * py <= r * r
                } else {
                    px.abs() <= r && py.abs() <= r * 0.7
                };
                if inside {
                    for (ch, v) in color.iter().enumerate() {
                        let i = img.index(0, ch, y, x);
                        img.data_mut()[i] = *v;
                    }
                }
            }
        }
    }
    img.clamp(0.0, 1.0)
}

/// `n` independent toy images of size `side`.
pub fn shapes(n: usize, side: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| shapes_image(side, &mut rng)).collect()
}

/// The built-in 32×32 generator.
pub fn shapes32(n: usize, seed: u64) -> Vec<Tensor> {
    shapes(n, 32, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    /// Built-in generator at the given side length.
    Shapes { side: usize },
    /// Directory of 8-bit images, read in file-name order, centre-cropped
    /// and resized to `side`.
    Dir { path: PathBuf, side: usize },
}

impl CleanSource {
    pub fn describe(&self) -> String {
        match self {
            CleanSource::Shapes { side } if *side == 32 => "shapes32".to_string(),
            CleanSource::Shapes { side } => format!("shapes{side}"),
            CleanSource::Dir { path, .. } => path.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: Tensor,
    pub degraded: Tensor,
}

/// Builds `n` (clean, degraded) pairs; pair `i` draws its degradation from
/// stream `i` of `seed`, so the set is reproducible and prefix-stable.
pub fn make_dataset(
    source: &CleanSource,
    spec: &DegradationSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    spec.validate()?;
    let clean = match source {
        CleanSource::Shapes { side } => {
            if *side == 0 {
                return Err(Error::config("side", "must be positive"));
            }
            shapes(n, *side, seed)
        }
        CleanSource::Dir { path, side } => {
            let files = crate::io::image::list_images(path)?;
            if files.is_empty() {
                return Err(Error::config(
                    "source",
                    format!("no images found in {}", path.display()),
                ));
            }
            files
                .iter()
                .cycle()
                .take(n)
                .map(|f| center_crop_resize(&crate::io::image::read_image(f)?, *side))
                .collect::<Result<Vec<_>>>()?
        }
    };
    clean
        .into_iter()
        .enumerate()
        .map(|(i, clean)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let degraded = apply_with_rng(spec, &clean, &mut rng)?;
            Ok(Pair { clean, degraded })
        })
        .collect()
}

//! PSNR and SSIM on images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ceiling applied when a PSNR is written out; identical images have infinite PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10·log10(1 / MSE)` over all elements; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape("psnr", b.shape())?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr of empty tensors"));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    let mse = se / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// The serialised form of a PSNR value.
pub fn capped_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// ITU-R BT.601 luma planes, one `H·W` vector per batch item. One-channel
/// inputs are returned as is.
pub fn luma(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [n, c, h, w] = t.shape().0;
    let plane = h * w;
    match c {
        1 => Ok(t
            .data()
            .chunks(plane)
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect()),
        3 => Ok((0..n)
            .map(|b| {
                let base = t.index(b, 0, 0, 0);
                let d = &t.data()[base..base + 3 * plane];
                (0..plane)
                    .map(|i| {
                        0.299 * d[i] as f64
                            + 0.587 * d[plane + i] as f64
                            + 0.114 * d[2 * plane + i] as f64
                    })
                    .collect()
            })
            .collect()),
        _ => Err(Error::invalid(format!(
            "ssim expects 1 or 3 channels, got {}",
            t.shape()
        ))),
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered window positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y0 + i) * ow + x0])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two planes over all window positions fully inside the image.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::invalid("ssim plane length does not match its size"));
    }
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), `K = (0.01, 0.03)`, dynamic
/// range 1, on luma; the mean over batch items.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape("ssim", b.shape())?;
    let [n, _, h, w] = a.shape().0;
    let (la, lb) = (luma(a)?, luma(b)?);
    let mut total = 0.0;
    for i in 0..n {
        total += ssim_plane(&la[i], &lb[i], h, w)?;
    }
    Ok(total / n as f64)
}

/// Per-image PSNR and SSIM of a restored set against its references.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricReport {
    pub fn push(&mut self, restored: &Tensor, reference: &Tensor) -> Result<()> {
        self.psnr.push(psnr(restored, reference)?);
        self.ssim.push(ssim(restored, reference)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }

    /// Mean of the capped per-image PSNRs.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.psnr.iter().map(|v| capped_psnr(*v)))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.ssim.iter().copied())
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

//! Deterministic metric fixtures. The expected SSIM values were computed once
//! with scikit-image 0.25 (`structural_similarity` on BT.601 luma, Gaussian
//! weights, σ = 1.5, population covariance, data range 1) from the same
//! formulas, and are frozen here.

use restore_core::{Shape, Tensor};

fn plane(kind: &str, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf, cf) = (x as f64, y as f64, c as f64);
            let (xi, yi, ci) = (x as i64, y as i64, c as i64);
            let p = match kind {
                "const" => 0.5 + 0.1 * cf,
                "wave" => 0.5 + 0.4 * (0.3 * xf + 0.2 * yf + cf).sin(),
                "ramp" => (xf + yf + cf) / (h + w + 2) as f64,
                "rramp" => 1.0 - (xf + 2.0 * yf + cf) / (2 * h + w + 2) as f64,
                "check" => ((x / 2 + y / 2) % 2) as f64 * 0.8 + 0.1 + 0.02 * cf,
                "hash" => {
                    ((xi * 73856093) ^ (yi * 19349663) ^ (ci * 83492791)) as f64 % 1000.0 / 1000.0
                }
                "hash2" => {
                    ((xi * 19349663) ^ (yi * 83492791) ^ ((ci + 7) * 73856093)) as f64 % 1000.0
                        / 1000.0
                }
                _ => unreachable!("unknown fixture {kind}"),
            };
            v.push(p as f32);
        }
    }
    v
}

pub fn rgb(kind: &str, h: usize, w: usize) -> Tensor {
    let data = (0..3).flat_map(|c| plane(kind, c, h, w)).collect();
    Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
}

pub struct SsimCase {
    pub name: &'static str,
    pub a: Tensor,
    pub b: Tensor,
    pub expected: f64,
}

pub fn ssim_cases() -> Vec<SsimCase> {
    let konst = rgb("const", 16, 16);
    vec![
        SsimCase {
            name: "constant offset",
            b: konst.map(|v| v + 0.1),
            a: konst,
            expected: 0.987541800090,
        },
        SsimCase {
            name: "wave vs checker",
            a: rgb("wave", 20, 24),
            b: rgb("check", 20, 24),
            expected: 0.004658740322,
        },
        SsimCase {
            name: "opposed ramps",
            a: rgb("ramp", 16, 16),
            b: rgb("rramp", 16, 16),
            expected: -0.720509662644,
        },
        SsimCase {
            name: "checker vs wave, odd size",
            a: rgb("check", 17, 19),
            b: rgb("wave", 17, 19),
            expected: 0.004616076321,
        },
        SsimCase {
            name: "hashed noise",
            a: rgb("hash", 23, 18),
            b: rgb("hash2", 23, 18),
            expected: 0.123486901426,
        },
    ]
}

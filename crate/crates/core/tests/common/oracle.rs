//! Plain f64 re-implementations used as references. Nothing here calls the
//! tape; losses are written out directly so finite differences are exact to
//! f64 precision.

use restore_core::Tensor;

pub const SLOPE: f64 = 0.2;
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct A {
    pub s: [usize; 4],
    pub d: Vec<f64>,
}

impl A {
    pub fn of(t: &Tensor) -> A {
        A {
            s: t.shape().0,
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(s: [usize; 4]) -> A {
        A {
            s,
            d: vec![0.0; s.iter().product()],
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.s;
        self.d[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> A {
        A {
            s: self.s,
            d: self.d.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, o: &A, f: impl Fn(f64, f64) -> f64) -> A {
        assert_eq!(self.s, o.s);
        A {
            s: self.s,
            d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

pub fn params(ts: &[&Tensor]) -> Vec<A> {
    ts.iter().map(|t| A::of(t)).collect()
}

pub fn flatten(ps: &[A]) -> Vec<f64> {
    ps.iter().flat_map(|p| p.d.iter().copied()).collect()
}

pub fn unflatten(like: &[A], flat: &[f64]) -> Vec<A> {
    let mut off = 0;
    like.iter()
        .map(|p| {
            let n = p.d.len();
            let a = A {
                s: p.s,
                d: flat[off..off + n].to_vec(),
            };
            off += n;
            a
        })
        .collect()
}

pub fn conv(x: &A, w: &A, b: &A, stride: usize, pad: usize) -> A {
    let [n, ci, h, wd] = x.s;
    let [co, ci2, kh, kw] = w.s;
    assert_eq!(ci, ci2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = A::zeros([n, co, oh, ow]);
    let mut i = 0;
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.d[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, c, ky, kx) * x.at(bn, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.d[i] = acc;
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        SLOPE * v
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn mse(a: &A, b: &A) -> f64 {
    assert_eq!(a.s, b.s);
    a.d.iter()
        .zip(&b.d)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.d.len() as f64
}

pub fn mean_log(p: &A, one_minus: bool) -> f64 {
    p.d.iter()
        .map(|&v| {
            let v = v.clamp(EPS, 1.0 - EPS);
            if one_minus {
                (1.0 - v).ln()
            } else {
                v.ln()
            }
        })
        .sum::<f64>()
        / p.d.len() as f64
}

pub fn spatial_mean(x: &A) -> A {
    let [n, c, h, w] = x.s;
    A {
        s: [n, c, 1, 1],
        d: x.d
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect(),
    }
}

pub fn upsample2x(x: &A) -> A {
    let [n, c, h, w] = x.s;
    let mut out = A::zeros([n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.d[(p * 2 * h + y) * 2 * w + xx] = x.d[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn add_channel(x: &A, b: &A) -> A {
    let [_, _, h, w] = x.s;
    let mut out = x.clone();
    for (i, chunk) in out.d.chunks_mut(h * w).enumerate() {
        chunk.iter_mut().for_each(|v| *v += b.d[i]);
    }
    out
}

pub fn concat(a: &A, b: &A) -> A {
    let mut d = a.d.clone();
    d.extend_from_slice(&b.d);
    A {
        s: [a.s[0] + b.s[0], a.s[1], a.s[2], a.s[3]],
        d,
    }
}

/// Sum of absolute neighbour differences per plane, averaged over planes.
pub fn tv(x: &A) -> f64 {
    let [n, c, h, w] = x.s;
    let mut t = 0.0;
    for p in x.d.chunks(h * w) {
        for y in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    t += (p[y * w + xx + 1] - p[y * w + xx]).abs();
                }
                if y + 1 < h {
                    t += (p[(y + 1) * w + xx] - p[y * w + xx]).abs();
                }
            }
        }
    }
    t / (n * c) as f64
}

/// 3×3 same-padding convs with leaky ReLU between them, output in [-1, 1].
pub fn phi(p: &[A], x: &A) -> A {
    let layers = p.len() / 2;
    let mut h = x.clone();
    for i in 0..layers {
        h = conv(&h, &p[2 * i], &p[2 * i + 1], 1, 1);
        if i + 1 < layers {
            h = h.map(lrelu);
        }
    }
    h.map(|v| v.clamp(-1.0, 1.0))
}

/// Strides 2, 2, 2, 1; leaky ReLU between; global mean; sigmoid.
pub fn disc(p: &[A], x: &A) -> A {
    let strides = [2, 2, 2, 1];
    let mut h = x.clone();
    for (i, s) in strides.iter().enumerate() {
        h = conv(&h, &p[2 * i], &p[2 * i + 1], *s, 1);
        if i + 1 < strides.len() {
            h = h.map(lrelu);
        }
    }
    spatial_mean(&h).map(sigmoid)
}

/// Conv + ReLU stack.
pub fn feat(p: &[A], x: &A) -> A {
    let mut h = x.clone();
    for i in 0..p.len() / 2 {
        h = conv(&h, &p[2 * i], &p[2 * i + 1], 1, 1).map(|v| v.max(0.0));
    }
    h
}

#[derive(Clone, Copy, Debug)]
pub struct PhiTerms {
    pub rec: f64,
    pub pec: f64,
    pub gan: f64,
}

pub fn phi_terms(x: &A, pp: &[A], dp: &[A], vp: &[A]) -> PhiTerms {
    let out = phi(pp, x);
    PhiTerms {
        rec: mse(x, &out),
        pec: mse(&feat(vp, x), &feat(vp, &out)),
        gan: mean_log(&disc(dp, &out), true),
    }
}

pub fn phi_total(t: PhiTerms, lambda: [f64; 3]) -> f64 {
    lambda[0] * t.rec + lambda[1] * t.pec + lambda[2] * t.gan
}

pub fn disc_loss(dp: &[A], real: &A, fake: &A) -> f64 {
    -mean_log(&disc(dp, real), false) - mean_log(&disc(dp, fake), true)
}

/// `γ₁·‖y − φ(x)‖²` summed over batch items.
pub fn stage1(x: &A, y: &A, pp: &[A], g1: f64) -> f64 {
    let [n, c, h, w] = x.s;
    let len = c * h * w;
    (0..n)
        .map(|i| {
            let xi = A {
                s: [1, c, h, w],
                d: x.d[i * len..(i + 1) * len].to_vec(),
            };
            g1 * mse(y, &phi(pp, &xi))
        })
        .sum()
}

pub fn stage23(x: &A, y: &A, pp: &[A], vp: &[A], dp: &[A], gamma: [f64; 5], with_tv: bool) -> f64 {
    let out = phi(pp, x);
    let mut l = gamma[1] * mse(y, &out) + gamma[2] * mse(&feat(vp, y), &feat(vp, &out));
    let resid = x.zip(y, |a, b| a - b);
    l += gamma[3] * mean_log(&disc(dp, &resid), true);
    if with_tv {
        l += gamma[4] * tv(x);
    }
    l
}

/// Central differences of `f` at `x` along the coordinates `idx`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], idx: &[usize], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    idx.iter()
        .map(|&i| {
            let v = p[i];
            p[i] = v + h;
            let up = f(&p);
            p[i] = v - h;
            let dn = f(&p);
            p[i] = v;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < 1e-12 {
        0.0
    } else {
        diff / den
    }
}

/// SSIM by brute force: a full 2-D Gaussian window at every valid position,
/// luma computed per pixel.
pub fn ssim_naive(a: &Tensor, b: &Tensor) -> f64 {
    let [n, _, h, w] = a.shape().0;
    let r = 5usize;
    let mut k = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            s += *v;
        }
    }
    let luma = |t: &Tensor, b: usize, y: usize, x: usize| {
        0.299 * t.at(b, 0, y, x) as f64
            + 0.587 * t.at(b, 1, y, x) as f64
            + 0.114 * t.at(b, 2, y, x) as f64
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for bi in 0..n {
        let mut acc = 0.0;
        let mut count = 0;
        for cy in r..h - r {
            for cx in r..w - r {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = k[i][j] / s;
                        let p = luma(a, bi, cy + i - r, cx + j - r);
                        let q = luma(b, bi, cy + i - r, cx + j - r);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / n as f64
}

//! Central-difference checks of every tape op and every TDM/guidance loss
//! against the f64 oracle. Each case maps a fixture seed to the worst
//! relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use restore_core::gradtape::{Activation, Graph, LogTerm, Var};
use restore_core::nn::Module;
use restore_core::tdg::{guidance_stage1, GuidanceConfig, Stage, Tdg};
use restore_core::tdm::{
    discriminator_loss_graph, phi_loss_graph, DegradationNet, DomainDiscriminator, FeatureExtractor,
};
use restore_core::{Shape, Tensor};

use super::oracle::{self as o, A};

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;
pub const FIXTURES: u64 = 20;
/// Parameter coordinates sampled per network.
const PARAM_PROBES: usize = 48;

pub type Case = fn(u64) -> f64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6a0d ^ seed.wrapping_mul(0x9e37_79b9))
}

fn randn(s: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(Shape::new(s[0], s[1], s[2], s[3]), r)
}

fn unif(s: [usize; 4], lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(Shape::new(s[0], s[1], s[2], s[3]), lo, hi, r)
}

fn to64(ts: &[Tensor]) -> Vec<f64> {
    ts.iter()
        .flat_map(|t| t.data().iter().map(|&v| v as f64))
        .collect()
}

fn value_err(ad: f32, oracle: f64) -> f64 {
    (ad as f64 - oracle).abs() / oracle.abs().max(1.0)
}

/// All inputs are leaves; every coordinate is differenced.
fn check_op(
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    oracle: impl Fn(&[A]) -> f64,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars);
    let ad = to64(&g.backward(root).unwrap().collect(&g, &vars));
    let like: Vec<A> = inputs.iter().map(A::of).collect();
    let x0 = o::flatten(&like);
    let idx: Vec<usize> = (0..x0.len()).collect();
    let fd = o::central_diff(|p| oracle(&o::unflatten(&like, p)), &x0, &idx, H);
    o::rel_err(&ad, &fd).max(value_err(g.value(root).item(), oracle(&like)))
}

/// Probe with a fixed random target: `mse(out, r)`.
fn probe(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let rv = g.constant(r.clone());
    g.mse(out, rv).unwrap()
}

fn conv2d(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let pad = ((seed / 2) % 2) as usize;
    let k = if seed.is_multiple_of(3) { 2 } else { 3 };
    let x = randn([2, 3, 5, 6], r);
    let w = randn([4, 3, k, k], r);
    let b = randn([1, 4, 1, 1], r);
    let oh = (5 + 2 * pad - k) / stride + 1;
    let ow = (6 + 2 * pad - k) / stride + 1;
    let t = randn([2, 4, oh, ow], r);
    let ta = A::of(&t);
    check_op(
        vec![x, w, b],
        |g, v| {
            let c = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            probe(g, c, &t)
        },
        |a| o::mse(&o::conv(&a[0], &a[1], &a[2], stride, pad), &ta),
    )
}

fn activation(seed: u64, kind: Activation, f: fn(f64) -> f64) -> f64 {
    let r = &mut rng(seed);
    let x = randn([2, 3, 4, 4], r);
    let t = randn([2, 3, 4, 4], r);
    let ta = A::of(&t);
    check_op(
        vec![x],
        |g, v| {
            let y = g.activation(v[0], kind);
            probe(g, y, &t)
        },
        |a| o::mse(&a[0].map(f), &ta),
    )
}

fn relu(seed: u64) -> f64 {
    activation(seed, Activation::Relu, |v| v.max(0.0))
}

fn leaky_relu(seed: u64) -> f64 {
    activation(seed, Activation::LeakyRelu(0.2), o::lrelu)
}

fn sigmoid(seed: u64) -> f64 {
    activation(seed, Activation::Sigmoid, o::sigmoid)
}

fn tanh(seed: u64) -> f64 {
    activation(seed, Activation::Tanh, f64::tanh)
}

fn mse(seed: u64) -> f64 {
    let r = &mut rng(seed);
    check_op(
        vec![randn([2, 3, 3, 4], r), randn([2, 3, 3, 4], r)],
        |g, v| g.mse(v[0], v[1]).unwrap(),
        |a| o::mse(&a[0], &a[1]),
    )
}

fn mean_log(seed: u64, term: LogTerm) -> f64 {
    let r = &mut rng(seed);
    let one_minus = term == LogTerm::LogOneMinus;
    check_op(
        vec![unif([4, 1, 1, 1], 0.05, 0.95, r)],
        |g, v| g.mean_log(v[0], term).unwrap(),
        |a| o::mean_log(&a[0], one_minus),
    )
}

fn mean_log_d(seed: u64) -> f64 {
    mean_log(seed, LogTerm::Log)
}

fn mean_log_one_minus_d(seed: u64) -> f64 {
    mean_log(seed, LogTerm::LogOneMinus)
}

fn concat_batch(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([3, 2, 3, 3], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([1, 2, 3, 3], r), randn([2, 2, 3, 3], r)],
        |g, v| {
            let c = g.concat_batch(v[0], v[1]).unwrap();
            probe(g, c, &t)
        },
        |a| o::mse(&o::concat(&a[0], &a[1]), &ta),
    )
}

fn add(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([2, 3, 3, 3], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([2, 3, 3, 3], r), randn([2, 3, 3, 3], r)],
        |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            probe(g, s, &t)
        },
        |a| o::mse(&a[0].zip(&a[1], |x, y| x + y), &ta),
    )
}

fn sub(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([2, 3, 3, 3], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([2, 3, 3, 3], r), randn([2, 3, 3, 3], r)],
        |g, v| {
            let s = g.sub(v[0], v[1]).unwrap();
            probe(g, s, &t)
        },
        |a| o::mse(&a[0].zip(&a[1], |x, y| x - y), &ta),
    )
}

fn scale(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let k: f32 = r.random_range(-3.0..3.0);
    let t = randn([1, 3, 4, 4], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([1, 3, 4, 4], r)],
        |g, v| {
            let s = g.scale(v[0], k);
            probe(g, s, &t)
        },
        |a| o::mse(&a[0].map(|x| x * k as f64), &ta),
    )
}

fn add_channel(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([2, 3, 4, 4], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([2, 3, 4, 4], r), randn([2, 3, 1, 1], r)],
        |g, v| {
            let s = g.add_channel(v[0], v[1]).unwrap();
            probe(g, s, &t)
        },
        |a| o::mse(&o::add_channel(&a[0], &a[1]), &ta),
    )
}

fn upsample2x(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([1, 2, 6, 8], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([1, 2, 3, 4], r)],
        |g, v| {
            let s = g.upsample2x(v[0]);
            probe(g, s, &t)
        },
        |a| o::mse(&o::upsample2x(&a[0]), &ta),
    )
}

fn spatial_mean(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([2, 3, 1, 1], r);
    let ta = A::of(&t);
    check_op(
        vec![randn([2, 3, 4, 5], r)],
        |g, v| {
            let s = g.spatial_mean(v[0]);
            probe(g, s, &t)
        },
        |a| o::mse(&o::spatial_mean(&a[0]), &ta),
    )
}

fn sum(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([1, 1, 1, 1], r);
    let tv = t.item() as f64;
    check_op(
        vec![randn([2, 3, 3, 3], r)],
        |g, v| {
            let s = g.sum(v[0]);
            probe(g, s, &t)
        },
        |a| {
            let s: f64 = a[0].d.iter().sum();
            (s - tv) * (s - tv)
        },
    )
}

fn mean(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([1, 1, 1, 1], r);
    let tv = t.item() as f64;
    check_op(
        vec![randn([2, 3, 3, 3], r)],
        |g, v| {
            let s = g.mean(v[0]);
            probe(g, s, &t)
        },
        |a| {
            let m = a[0].d.iter().sum::<f64>() / a[0].d.len() as f64;
            (m - tv) * (m - tv)
        },
    )
}

fn clamp(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let t = randn([2, 3, 4, 4], r);
    let ta = A::of(&t);
    check_op(
        vec![unif([2, 3, 4, 4], -2.0, 2.0, r)],
        |g, v| {
            let s = g.clamp(v[0], -1.0, 1.0);
            probe(g, s, &t)
        },
        |a| o::mse(&a[0].map(|x| x.clamp(-1.0, 1.0)), &ta),
    )
}

fn total_variation(seed: u64) -> f64 {
    let r = &mut rng(seed);
    check_op(
        vec![randn([2, 3, 4, 5], r)],
        |g, v| g.total_variation(v[0]).unwrap(),
        |a| o::tv(&a[0]),
    )
}

const IMG: [usize; 4] = [1, 3, 6, 6];

struct Nets {
    phi: DegradationNet,
    d: DomainDiscriminator,
    v: FeatureExtractor,
}

fn nets(r: &mut ChaCha8Rng) -> Nets {
    Nets {
        phi: DegradationNet::new(r),
        d: DomainDiscriminator::new(r),
        v: FeatureExtractor::pinned(),
    }
}

fn probes(len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..PARAM_PROBES).map(|_| r.random_range(0..len)).collect()
}

/// Which φ objective to differentiate.
#[derive(Clone, Copy)]
enum PhiTerm {
    Rec,
    Pec,
    Gan,
    Total,
}

fn phi_objective(seed: u64, term: PhiTerm) -> f64 {
    let r = &mut rng(seed);
    let n = nets(r);
    let x = unif(IMG, -1.0, 1.0, r);
    let lambda: [f32; 3] = [
        r.random_range(0.1..2.0),
        r.random_range(0.1..2.0),
        r.random_range(0.1..2.0),
    ];

    let mut g = Graph::new();
    let pp = n.phi.bind(&mut g, true);
    let dp = n.d.bind(&mut g, false);
    let vp = n.v.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let vars = phi_loss_graph(&mut g, xv, &n.phi, &pp, &n.d, &dp, &n.v, &vp, lambda).unwrap();
    let root = match term {
        PhiTerm::Rec => vars.rec,
        PhiTerm::Pec => vars.pec,
        PhiTerm::Gan => vars.gan,
        PhiTerm::Total => vars.total,
    };
    let grads = g.backward(root).unwrap();
    let ad_x = to64(&[grads.get(&g, xv)]);
    let ad_p = to64(&grads.collect(&g, &pp));

    let pa = o::params(&n.phi.parameters());
    let da = o::params(&n.d.parameters());
    let va = o::params(&n.v.parameters());
    let l64 = lambda.map(|l| l as f64);
    let pick = move |t: o::PhiTerms| match term {
        PhiTerm::Rec => t.rec,
        PhiTerm::Pec => t.pec,
        PhiTerm::Gan => t.gan,
        PhiTerm::Total => o::phi_total(t, l64),
    };
    let xa = A::of(&x);
    let value = value_err(g.value(root).item(), pick(o::phi_terms(&xa, &pa, &da, &va)));

    let all: Vec<usize> = (0..xa.d.len()).collect();
    let fd_x = o::central_diff(
        |p| {
            let xs = A {
                s: xa.s,
                d: p.to_vec(),
            };
            pick(o::phi_terms(&xs, &pa, &da, &va))
        },
        &xa.d,
        &all,
        H,
    );
    let flat = o::flatten(&pa);
    let idx = probes(flat.len(), r);
    let fd_p = o::central_diff(
        |p| pick(o::phi_terms(&xa, &o::unflatten(&pa, p), &da, &va)),
        &flat,
        &idx,
        H,
    );
    let ad_ps: Vec<f64> = idx.iter().map(|&i| ad_p[i]).collect();
    o::rel_err(&ad_x, &fd_x)
        .max(o::rel_err(&ad_ps, &fd_p))
        .max(value)
}

fn phi_rec(seed: u64) -> f64 {
    phi_objective(seed, PhiTerm::Rec)
}

fn phi_pec(seed: u64) -> f64 {
    phi_objective(seed, PhiTerm::Pec)
}

fn phi_gan(seed: u64) -> f64 {
    phi_objective(seed, PhiTerm::Gan)
}

fn phi_total(seed: u64) -> f64 {
    phi_objective(seed, PhiTerm::Total)
}

/// Discriminator loss w.r.t. its parameters and both inputs.
fn disc_check(d: &DomainDiscriminator, real: &Tensor, fake: &Tensor, r: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let dp = d.bind(&mut g, true);
    let rv = g.leaf(real.clone());
    let fv = g.leaf(fake.clone());
    let loss = discriminator_loss_graph(&mut g, d, &dp, rv, fv).unwrap();
    let grads = g.backward(loss).unwrap();
    let ad_in = to64(&[grads.get(&g, rv), grads.get(&g, fv)]);
    let ad_p = to64(&grads.collect(&g, &dp));

    let da = o::params(&d.parameters());
    let (ra, fa) = (A::of(real), A::of(fake));
    let value = value_err(g.value(loss).item(), o::disc_loss(&da, &ra, &fa));
    let ins = [ra.clone(), fa.clone()];
    let flat_in = o::flatten(&ins);
    let all: Vec<usize> = (0..flat_in.len()).collect();
    let fd_in = o::central_diff(
        |p| {
            let u = o::unflatten(&ins, p);
            o::disc_loss(&da, &u[0], &u[1])
        },
        &flat_in,
        &all,
        H,
    );
    let flat = o::flatten(&da);
    let idx = probes(flat.len(), r);
    let fd_p = o::central_diff(
        |p| o::disc_loss(&o::unflatten(&da, p), &ra, &fa),
        &flat,
        &idx,
        H,
    );
    let ad_ps: Vec<f64> = idx.iter().map(|&i| ad_p[i]).collect();
    o::rel_err(&ad_in, &fd_in)
        .max(o::rel_err(&ad_ps, &fd_p))
        .max(value)
}

fn disc_loss(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let d = DomainDiscriminator::new(r);
    let real = unif([2, 3, 6, 6], -1.0, 1.0, r);
    let fake = unif([2, 3, 6, 6], -1.0, 1.0, r);
    disc_check(&d, &real, &fake, r)
}

/// Residual discriminator: real `x − φ(x)`, fake `x − y`.
fn dres_loss(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let n = nets(r);
    let x = unif([2, 3, 6, 6], -1.0, 1.0, r);
    let y = unif([1, 3, 6, 6], -1.0, 1.0, r);
    let real = x.sub(&n.phi.apply(&x).unwrap()).unwrap();
    let fake = x.split_batch()[0].sub(&y).unwrap();
    disc_check(&n.d, &real, &fake, r)
}

fn stage1(seed: u64) -> f64 {
    let r = &mut rng(seed);
    let n = nets(r);
    let x = unif([2, 3, 6, 6], -1.0, 1.0, r);
    let y = unif(IMG, -1.0, 1.0, r);
    let g1: f32 = r.random_range(0.1..3.0);
    let ad = to64(&[guidance_stage1(&x, &y, &n.phi, g1).unwrap().grad]);
    let pa = o::params(&n.phi.parameters());
    let (xa, ya) = (A::of(&x), A::of(&y));
    let all: Vec<usize> = (0..xa.d.len()).collect();
    let fd = o::central_diff(
        |p| {
            o::stage1(
                &A {
                    s: xa.s,
                    d: p.to_vec(),
                },
                &ya,
                &pa,
                g1 as f64,
            )
        },
        &xa.d,
        &all,
        H,
    );
    o::rel_err(&ad, &fd)
}

/// Stage-two/three guidance gradient through [`Tdg::guide`].
fn stage23(seed: u64, stage: Stage, mask: [bool; 5]) -> f64 {
    let r = &mut rng(seed);
    let n = nets(r);
    let x = unif(IMG, -1.0, 1.0, r);
    let y = unif(IMG, -1.0, 1.0, r);
    let mut gamma = [0f32; 5];
    for (g, on) in gamma.iter_mut().zip(mask) {
        if on {
            *g = r.random_range(0.1..2.0);
        }
    }
    let mut tdg = Tdg::new(GuidanceConfig::new(100, gamma, 1.0), r).unwrap();
    let da = o::params(&tdg.residual_discriminator().parameters());
    let guided = tdg
        .guide(stage, &x, None, &y, &n.phi, &n.v, 10)
        .unwrap()
        .guided;
    let ad = to64(&[guided.grad]);

    let pa = o::params(&n.phi.parameters());
    let va = o::params(&n.v.parameters());
    let (xa, ya) = (A::of(&x), A::of(&y));
    let g64 = gamma.map(|g| g as f64);
    let with_tv = stage == Stage::Third;
    let f = |xs: &A| o::stage23(xs, &ya, &pa, &va, &da, g64, with_tv);
    let value = value_err(guided.terms.total as f32, f(&xa));
    let all: Vec<usize> = (0..xa.d.len()).collect();
    let fd = o::central_diff(
        |p| {
            f(&A {
                s: xa.s,
                d: p.to_vec(),
            })
        },
        &xa.d,
        &all,
        H,
    );
    o::rel_err(&ad, &fd).max(value)
}

fn stage2_rec(seed: u64) -> f64 {
    stage23(seed, Stage::Second, [false, true, false, false, false])
}

fn stage2_pec(seed: u64) -> f64 {
    stage23(seed, Stage::Second, [false, false, true, false, false])
}

fn stage2_gan(seed: u64) -> f64 {
    stage23(seed, Stage::Second, [false, false, false, true, false])
}

fn stage2_total(seed: u64) -> f64 {
    stage23(seed, Stage::Second, [true; 5])
}

fn stage3_tv(seed: u64) -> f64 {
    stage23(seed, Stage::Third, [false, false, false, false, true])
}

fn stage3_total(seed: u64) -> f64 {
    stage23(seed, Stage::Third, [true; 5])
}

pub const OPS: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("relu", relu),
    ("leaky_relu", leaky_relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("mse", mse),
    ("mean_log_d", mean_log_d),
    ("mean_log_one_minus_d", mean_log_one_minus_d),
    ("concat_batch", concat_batch),
    ("add", add),
    ("sub", sub),
    ("scale", scale),
    ("add_channel", add_channel),
    ("upsample2x", upsample2x),
    ("spatial_mean", spatial_mean),
    ("sum", sum),
    ("mean", mean),
    ("clamp", clamp),
    ("total_variation", total_variation),
];

pub const LOSSES: &[(&str, Case)] = &[
    ("phi_rec", phi_rec),
    ("phi_pec", phi_pec),
    ("phi_gan", phi_gan),
    ("phi_total", phi_total),
    ("disc_loss", disc_loss),
    ("dres_loss", dres_loss),
    ("stage1", stage1),
    ("stage2_rec", stage2_rec),
    ("stage2_pec", stage2_pec),
    ("stage2_gan", stage2_gan),
    ("stage2_total", stage2_total),
    ("stage3_tv", stage3_tv),
    ("stage3_total", stage3_total),
];

/// Worst error of `case` over all fixtures.
pub fn worst(case: Case) -> f64 {
    (0..FIXTURES).map(case).fold(0.0, f64::max)
}

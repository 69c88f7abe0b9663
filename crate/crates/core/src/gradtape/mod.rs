//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and backward is a single reverse sweep.
//! Gradients are only propagated into nodes that (transitively) depend on a
//! leaf created with [`Graph::leaf`].

mod adam;
mod conv;

pub use adam::{AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use conv::ConvGeom;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Which log term [`Graph::mean_log`] averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogTerm {
    /// `log(d)`
    Log,
    /// `log(1 - d)`
    LogOneMinus,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Mse {
        a: Var,
        b: Var,
    },
    MeanLog {
        input: Var,
        term: LogTerm,
    },
    ConcatBatch {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    AddChannel {
        input: Var,
        bias: Var,
    },
    Upsample2x {
        input: Var,
    },
    SpatialMean {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Clamp {
        input: Var,
        lo: f32,
        hi: f32,
    },
    TotalVariation {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single owner, not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, left: Shape, right: Shape) -> Error {
    Error::ShapeMismatch { op, left, right }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation with a `(Co, Ci, Kh, Kw)` kernel and `(1, Co, 1, 1)` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let bs = self.shape(bias);
        let [n, ci, h, w] = xs.0;
        let [co, kci, kh, kw] = ks.0;
        if kci != ci {
            return Err(shape_err("conv2d", xs, ks));
        }
        if bs != Shape::new(1, co, 1, 1) {
            return Err(shape_err("conv2d bias", ks, bs));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d output size", xs, ks));
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: ci,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = conv::conv_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::from_vec(Shape::new(n, co, geom.out_h, geom.out_w), data)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = self.value(input).map(|x| kind.apply(x));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Activation { input, kind }, rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((sum / av.numel() as f64) as f32);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    /// Mean of `log(d)` or `log(1 - d)` over all elements, with `d` clamped
    /// to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn mean_log(&mut self, input: Var, term: LogTerm) -> Result<Var> {
        let d = self.value(input);
        if d.data().iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("mean_log: NaN probability"));
        }
        let sum: f64 = d
            .data()
            .iter()
            .map(|&p| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64;
                match term {
                    LogTerm::Log => p.ln(),
                    LogTerm::LogOneMinus => (1.0 - p).ln(),
                }
            })
            .sum();
        let value = Tensor::scalar((sum / d.numel() as f64) as f32);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MeanLog { input, term }, rg))
    }

    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::concat_batch(&[self.value(a), self.value(b)])?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatBatch { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let value = self.value(input).scale(factor);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Adds a `(N, C, 1, 1)` per-channel offset to every pixel of an `(N, C, H, W)` input.
    pub fn add_channel(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let bs = self.shape(bias);
        if bs != Shape::new(xs.batch(), xs.channels(), 1, 1) {
            return Err(shape_err("add_channel", xs, bs));
        }
        let hw = xs.height() * xs.width();
        let mut value = self.value(input).clone();
        let b = self.value(bias).data().to_vec();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[i]);
        }
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(value, Op::AddChannel { input, bias }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().0;
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in x.data().chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..2 * w {
                    out.push(row[xx / 2]);
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(n, c, 2 * h, 2 * w), out)
            .expect("upsample size is consistent");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Upsample2x { input }, rg)
    }

    /// `(N, C, H, W) -> (N, C, 1, 1)` spatial average.
    pub fn spatial_mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().0;
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
            .collect();
        let value = Tensor::from_vec(Shape::new(n, c, 1, 1), data).expect("consistent");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::SpatialMean { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum() as f32);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).mean() as f32);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Mean { input }, rg)
    }

    /// Elementwise clamp; the gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, input: Var, lo: f32, hi: f32) -> Var {
        let value = self.value(input).clamp(lo, hi);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Clamp { input, lo, hi }, rg)
    }

    /// Anisotropic total variation: summed absolute horizontal and vertical
    /// neighbour differences of each plane, averaged over the `N * C` planes.
    pub fn total_variation(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(total_variation(self.value(input))? as f32);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::TotalVariation { input }, rg))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::NonScalarRoot(rs));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rs, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(g),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let res = conv::conv_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gout.data(),
                    geom,
                    [wants(*input), wants(*kernel), wants(*bias)],
                );
                for (v, g) in [
                    (*input, res.input),
                    (*kernel, res.kernel),
                    (*bias, res.bias),
                ] {
                    if let Some(g) = g {
                        acc(
                            v,
                            Tensor::from_vec(self.shape(v), g).expect("conv grad shape"),
                        );
                    }
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let data = gout
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * kind.derivative(x[i], y[i]))
                    .collect();
                acc(*input, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * gout.item() / av.numel() as f32;
                let da = av.zip_map(bv, |x, y| k * (x - y)).expect("mse shapes");
                if wants(*b) {
                    acc(*b, da.scale(-1.0));
                }
                acc(*a, da);
            }
            Op::MeanLog { input, term } => {
                let d = self.value(*input);
                let k = gout.item() / d.numel() as f32;
                let g = d.map(|p| {
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                        return 0.0;
                    }
                    match term {
                        LogTerm::Log => k / p,
                        LogTerm::LogOneMinus => -k / (1.0 - p),
                    }
                });
                acc(*input, g);
            }
            Op::ConcatBatch { a, b } => {
                let split = self.value(*a).numel();
                let (ga, gb) = gout.data().split_at(split);
                acc(
                    *a,
                    Tensor::from_vec(self.shape(*a), ga.to_vec()).expect("shape"),
                );
                acc(
                    *b,
                    Tensor::from_vec(self.shape(*b), gb.to_vec()).expect("shape"),
                );
            }
            Op::Add { a, b } => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, gout.clone());
                acc(*b, gout.scale(-1.0));
            }
            Op::Scale { input, factor } => acc(*input, gout.scale(*factor)),
            Op::AddChannel { input, bias } => {
                acc(*input, gout.clone());
                if wants(*bias) {
                    let [_, _, h, w] = gout.shape().0;
                    let data = gout
                        .data()
                        .chunks(h * w)
                        .map(|p| p.iter().sum::<f32>())
                        .collect();
                    acc(
                        *bias,
                        Tensor::from_vec(self.shape(*bias), data).expect("shape"),
                    );
                }
            }
            Op::Upsample2x { input } => {
                let [n, c, h, w] = self.shape(*input).0;
                let mut g = vec![0.0; n * c * h * w];
                for (pi, plane) in gout.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut g[pi * h * w..(pi + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += plane[y * 2 * w + x];
                        }
                    }
                }
                acc(
                    *input,
                    Tensor::from_vec(self.shape(*input), g).expect("shape"),
                );
            }
            Op::SpatialMean { input } => {
                let s = self.shape(*input);
                let hw = s.height() * s.width();
                let mut g = Vec::with_capacity(s.numel());
                for &v in gout.data() {
                    g.extend(std::iter::repeat_n(v / hw as f32, hw));
                }
                acc(*input, Tensor::from_vec(s, g).expect("shape"));
            }
            Op::Sum { input } => acc(*input, Tensor::full(self.shape(*input), gout.item())),
            Op::Mean { input } => {
                let s = self.shape(*input);
                acc(*input, Tensor::full(s, gout.item() / s.numel() as f32));
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input);
                let g = x
                    .zip_map(gout, |v, g| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .expect("shape");
                acc(*input, g);
            }
            Op::TotalVariation { input } => {
                let x = self.value(*input);
                acc(*input, total_variation_grad(x, gout.item()));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, zero-filled when the root does not depend on it.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn collect(&self, graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.get(graph, v)).collect()
    }
}

fn sign(d: f32) -> f32 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic total variation of a tensor, see [`Graph::total_variation`].
pub fn total_variation(x: &Tensor) -> Result<f64> {
    let [n, c, h, w] = x.shape().0;
    if h * w < 2 {
        return Err(Error::invalid(format!(
            "total variation needs at least two pixels per plane, got {}",
            x.shape()
        )));
    }
    let mut total = 0.0f64;
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            for xx in 0..w {
                let v = plane[y * w + xx];
                if xx + 1 < w {
                    total += (plane[y * w + xx + 1] - v).abs() as f64;
                }
                if y + 1 < h {
                    total += (plane[(y + 1) * w + xx] - v).abs() as f64;
                }
            }
        }
    }
    Ok(total / (n * c) as f64)
}

fn total_variation_grad(x: &Tensor, upstream: f32) -> Tensor {
    let [n, c, h, w] = x.shape().0;
    let k = upstream / (n * c) as f32;
    let mut g = Tensor::zeros(x.shape());
    for (plane, gp) in x.data().chunks(h * w).zip(g.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    let s = k * sign(plane[i + 1] - plane[i]);
                    gp[i + 1] += s;
                    gp[i] -= s;
                }
                if y + 1 < h {
                    let s = k * sign(plane[i + w] - plane[i]);
                    gp[i + w] += s;
                    gp[i] -= s;
                }
            }
        }
    }
    g
}

//! Small building blocks for the convolutional networks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradtape::{Graph, Var};
use crate::tensor::{Shape, Tensor};

/// Default negative slope for leaky ReLUs.
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Uniform init with bound `gain / sqrt(fan_in)` on weights and `1 / sqrt(fan_in)` on biases.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let wb = gain / fan_in.sqrt();
        let bb = 1.0 / fan_in.sqrt();
        Conv2d {
            weight: Tensor::uniform(Shape::new(out_ch, in_ch, kernel, kernel), -wb, wb, rng),
            bias: Tensor::uniform(Shape::new(1, out_ch, 1, 1), -bb, bb, rng),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, params[0], params[1], self.stride, self.padding)
    }
}

/// Anything holding an ordered list of parameter tensors.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Registers every parameter in `g`, as trainable leaves or as constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.is_finite())
    }

    /// Overwrites parameters from tensors in [`Module::parameters`] order.
    fn load_parameters(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::Decode(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.expect_shape("load_parameters", v.shape())
                .map_err(|e| Error::Decode(e.to_string()))?;
            **p = v.clone();
        }
        Ok(())
    }
}

/// Parameter bookkeeping for a plain stack of convolutions.
pub(crate) fn conv_params(layers: &[Conv2d]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub(crate) fn conv_params_mut(layers: &mut [Conv2d]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

//! Parameterised building blocks shared by the cells and the segmentation network.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl Conv2d {
    /// He-uniform weights for layers followed by a ReLU, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = Shape::new(out_channels, in_channels, kernel.0, kernel.1);
        Conv2d {
            weight: params.add(format!("{name}.weight"), Tensor::uniform(shape, bound, rng)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_channels, 1, 1))),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn macs_per_pixel(&self) -> u64 {
        (self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1) as u64
    }
}

/// 1x1 convolution across channels.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Pointwise {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let shape = Shape::new(out_channels, in_channels, 1, 1);
        Pointwise {
            weight: params.add(format!("{name}.weight"), Tensor::uniform(shape, bound, rng)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_channels, 1, 1))),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.pointwise_conv2d(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn macs_per_pixel(&self) -> u64 {
        (self.in_channels * self.out_channels) as u64
    }
}

/// Learnable per-channel scale and shift. Stands in for batch normalisation
/// without keeping batch statistics.
#[derive(Debug, Clone)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Affine {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Affine {
            scale: params.add(format!("{name}.scale"), Tensor::full(shape, T::one())),
            shift: params.add(format!("{name}.shift"), Tensor::zeros(shape)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.channel_mul(x, p.var(self.scale))?;
        tape.channel_add(y, p.var(self.shift))
    }
}

/// conv, affine, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Affine,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(params, &format!("{name}.conv"), in_channels, out_channels, (3, 3), rng),
            norm: Affine::new(params, &format!("{name}.norm"), out_channels),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        tape.relu(y)
    }
}

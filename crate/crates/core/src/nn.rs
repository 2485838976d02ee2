//! Convolution layer bound to named entries of a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::ConvGeom;
use crate::params::{conv_bias, conv_weight, Bound, ParamStore};
use crate::tensor::Tensor;

/// Slope used by every leaky-ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
}

/// How a [`Conv`] is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(±1/√fan_in)` for weight and bias.
    FanIn,
    Zero,
    /// Identity map (1×1, equal channel counts), zero bias.
    Identity,
}

impl Conv {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, geom: ConvGeom) -> Self {
        Conv {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            in_ch,
            out_ch,
            kernel,
            geom,
        }
    }

    pub fn register(&self, store: &mut ParamStore, init: Init, rng: &mut impl Rng) -> Result<()> {
        let (w, b) = match init {
            Init::FanIn => (
                conv_weight(self.out_ch, self.in_ch, self.kernel, rng),
                conv_bias(self.out_ch, self.in_ch, self.kernel, rng),
            ),
            Init::Zero => (
                Tensor::zeros(&[self.out_ch, self.in_ch, self.kernel, self.kernel]),
                Tensor::zeros(&[self.out_ch]),
            ),
            Init::Identity => {
                assert!(self.kernel == 1 && self.in_ch == self.out_ch, "identity init needs a square 1x1 conv");
                (crate::params::identity_1x1(self.in_ch), Tensor::zeros(&[self.out_ch]))
            }
        };
        store.insert(self.weight.clone(), w)?;
        store.insert(self.bias.clone(), b)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(&self.weight), Some(p.var(&self.bias)), self.geom)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    /// Multiply-adds for an input of spatial size `h`×`w` and batch `b`.
    pub fn macs(&self, b: usize, h: usize, w: usize) -> u64 {
        let ho = self.geom.out_extent(h, self.kernel).unwrap_or(0);
        let wo = self.geom.out_extent(w, self.kernel).unwrap_or(0);
        (b * ho * wo * self.out_ch * self.in_ch * self.kernel * self.kernel) as u64
    }
}

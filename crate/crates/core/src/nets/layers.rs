use gantruth_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    /// Smooth everywhere; used where finite differences must not straddle kinks.
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, T::lit(0.2)),
            Activation::Tanh => g.tanh(x),
        }
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

fn gaussian<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), gaussian(&[out_c, in_c, kernel, kernel], std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]))?;
        Ok(Conv { weight, bias, stride, padding })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Fractionally strided convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), gaussian(&[in_c, out_c, kernel, kernel], std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]))?;
        Ok(ConvTranspose { weight, bias, stride, padding })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `x + IN(conv(act(IN(conv(x)))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(ResBlock {
            first: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, std, rng)?,
            second: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, std, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, act: Activation) -> Var {
        let h = self.first.forward(g, store, x);
        let h = g.instance_norm(h, T::lit(NORM_EPS));
        let h = act.apply(g, h);
        let h = self.second.forward(g, store, h);
        let h = g.instance_norm(h, T::lit(NORM_EPS));
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.first.params().into_iter().chain(self.second.params()).collect()
    }
}

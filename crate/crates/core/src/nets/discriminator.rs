use gantruth_tensor::{Graph, ParamId, ParamStore, Real, Var};
use rand::Rng;

use super::layers::Conv;
use super::ArchConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct PatchDiscriminator {
    layers: Vec<Conv>,
    head: Conv,
}

/// Patch discriminators applied to an image pyramid. Each scale outputs a
/// grid of probabilities that the corresponding patch is real.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleDiscriminator {
    pub name: String,
    scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn build<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        let std = arch.init_std;
        let mut scales = Vec::new();
        for s in 0..arch.disc_scales {
            let mut layers = Vec::new();
            let mut c_in = 3;
            for l in 0..arch.disc_layers {
                let c_out = arch.disc_channels << l;
                layers.push(Conv::new(store, &format!("{name}.scale{s}.conv{l}"), c_in, c_out, 4, 2, 1, std, rng)?);
                c_in = c_out;
            }
            let head = Conv::new(store, &format!("{name}.scale{s}.out"), c_in, 1, 1, 1, 0, std, rng)?;
            scales.push(PatchDiscriminator { layers, head });
        }
        Ok(MultiScaleDiscriminator { name: name.into(), scales })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Output grid size at each scale for an `h x w` input.
    pub fn grid_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let layers = self.scales.first().map_or(0, |s| s.layers.len());
        let factor = 1usize << (self.scales.len().saturating_sub(1) + layers);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "{}: input {h}x{w} must be a positive multiple of {factor}",
                self.name
            )));
        }
        Ok((0..self.scales.len()).map(|s| (h >> (s + layers), w >> (s + layers))).collect())
    }

    /// Per-scale probability grids of shape `(n, 1, gh, gw)`.
    pub fn discriminate<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("{}: expected (n, 3, h, w) input, got {shape:?}", self.name)));
        }
        self.grid_shapes(shape[2], shape[3])?;
        let mut outputs = Vec::new();
        let mut input = x;
        for (s, d) in self.scales.iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input);
            }
            let mut h = input;
            for c in &d.layers {
                h = c.forward(g, store, h);
                h = g.leaky_relu(h, T::lit(0.2));
            }
            let logits = d.head.forward(g, store, h);
            outputs.push(g.sigmoid(logits));
        }
        Ok(outputs)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.scales
            .iter()
            .flat_map(|d| d.layers.iter().chain([&d.head]).flat_map(|c| c.params()))
            .collect()
    }
}

use gantruth_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{Activation, Conv, ConvTranspose, ResBlock, NORM_EPS};
use super::ArchConfig;
use crate::error::{Error, Result};

/// Image to latent code. The trailing `shared` blocks may be tied with
/// another encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub name: String,
    stem: Conv,
    downs: Vec<Conv>,
    blocks: Vec<ResBlock>,
    shared: Vec<ResBlock>,
    activation: Activation,
    downsamplings: usize,
}

/// Latent code back to an image. The leading `shared` blocks may be tied
/// with another decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub name: String,
    shared: Vec<ResBlock>,
    blocks: Vec<ResBlock>,
    ups: Vec<ConvTranspose>,
    head: Conv,
    activation: Activation,
}

/// Mean of the latent distribution. Samples add unit-variance noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Var,
}

impl LatentCode {
    /// `mean + eps`, `eps ~ N(0, I)`.
    pub fn sample<T: Real, R: Rng>(&self, g: &mut Graph<T>, rng: &mut R) -> Var {
        let shape = g.value(self.mean).shape().to_vec();
        let eps = Tensor::from_fn(&shape, |_| T::lit(StandardNormal.sample(rng)));
        let eps = g.constant(eps);
        g.add(self.mean, eps)
    }

    /// Code used by `mode`: the mean itself, or a sample.
    pub fn realize<T: Real, R: Rng>(&self, g: &mut Graph<T>, mode: TranslationMode, rng: &mut R) -> Var {
        match mode {
            TranslationMode::Deterministic => self.mean,
            TranslationMode::Stochastic => self.sample(g, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TranslationMode {
    /// Decode the latent mean.
    Deterministic,
    /// Decode a sample drawn around the mean.
    Stochastic,
}

fn latent_channels(arch: &ArchConfig) -> usize {
    arch.base_channels << arch.downsamplings
}

fn build_blocks<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    count: usize,
    channels: usize,
    std: f64,
    rng: &mut R,
) -> Result<Vec<ResBlock>> {
    (0..count).map(|i| ResBlock::new(store, &format!("{prefix}.res{i}"), channels, std, rng)).collect()
}

impl Encoder {
    /// Build an encoder with its own layers, tied to `shared` when given
    /// (otherwise it creates its own copy of those blocks).
    pub fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &ArchConfig,
        shared: Option<&[ResBlock]>,
        rng: &mut R,
    ) -> Result<Self> {
        let std = arch.init_std;
        let c0 = arch.base_channels;
        let stem = Conv::new(store, &format!("{name}.stem"), 3, c0, 3, 1, 1, std, rng)?;
        let mut downs = Vec::new();
        for i in 0..arch.downsamplings {
            let c = c0 << i;
            downs.push(Conv::new(store, &format!("{name}.down{i}"), c, 2 * c, 4, 2, 1, std, rng)?);
        }
        let lc = latent_channels(arch);
        let own = arch.res_blocks - arch.shared_res_blocks;
        let blocks = build_blocks(store, name, own, lc, std, rng)?;
        let shared = match shared {
            Some(s) => s.to_vec(),
            None => build_blocks(store, &format!("{name}.tail"), arch.shared_res_blocks, lc, std, rng)?,
        };
        Ok(Encoder {
            name: name.into(),
            stem,
            downs,
            blocks,
            shared,
            activation: arch.activation,
            downsamplings: arch.downsamplings,
        })
    }

    pub fn shared_blocks(&self) -> &[ResBlock] {
        &self.shared
    }

    /// Encode `(n, 3, h, w)` images; `h` and `w` must be divisible by the
    /// total downsampling factor.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<LatentCode> {
        let shape = g.value(x).shape().to_vec();
        let factor = 1 << self.downsamplings;
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("{}: expected (n, 3, h, w) input, got {shape:?}", self.name)));
        }
        if shape[2] % factor != 0 || shape[3] % factor != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "{}: input {}x{} is not divisible by {factor}",
                self.name, shape[2], shape[3]
            )));
        }
        let act = self.activation;
        let mut h = self.stem.forward(g, store, x);
        h = g.instance_norm(h, T::lit(NORM_EPS));
        h = act.apply(g, h);
        for d in &self.downs {
            h = d.forward(g, store, h);
            h = g.instance_norm(h, T::lit(NORM_EPS));
            h = act.apply(g, h);
        }
        for b in self.blocks.iter().chain(&self.shared) {
            h = b.forward(g, store, h, act);
        }
        Ok(LatentCode { mean: h })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stem.params().to_vec();
        p.extend(self.downs.iter().flat_map(|c| c.params()));
        p.extend(self.blocks.iter().chain(&self.shared).flat_map(|b| b.params()));
        p
    }
}

impl Decoder {
    pub fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &ArchConfig,
        shared: Option<&[ResBlock]>,
        rng: &mut R,
    ) -> Result<Self> {
        let std = arch.init_std;
        let lc = latent_channels(arch);
        let shared = match shared {
            Some(s) => s.to_vec(),
            None => build_blocks(store, &format!("{name}.head_blocks"), arch.shared_res_blocks, lc, std, rng)?,
        };
        let own = arch.res_blocks - arch.shared_res_blocks;
        let blocks = build_blocks(store, name, own, lc, std, rng)?;
        let mut ups = Vec::new();
        for i in 0..arch.downsamplings {
            let c = lc >> i;
            ups.push(ConvTranspose::new(store, &format!("{name}.up{i}"), c, c / 2, 4, 2, 1, std, rng)?);
        }
        let head = Conv::new(store, &format!("{name}.out"), arch.base_channels, 3, 3, 1, 1, std, rng)?;
        Ok(Decoder { name: name.into(), shared, blocks, ups, head, activation: arch.activation })
    }

    pub fn shared_blocks(&self) -> &[ResBlock] {
        &self.shared
    }

    /// Decode a latent code to images in `[-1, 1]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        let act = self.activation;
        let mut h = z;
        for b in self.shared.iter().chain(&self.blocks) {
            h = b.forward(g, store, h, act);
        }
        for u in &self.ups {
            h = u.forward(g, store, h);
            h = g.instance_norm(h, T::lit(NORM_EPS));
            h = act.apply(g, h);
        }
        let h = self.head.forward(g, store, h);
        g.tanh(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.shared.iter().chain(&self.blocks).flat_map(|b| b.params()).collect();
        p.extend(self.ups.iter().flat_map(|c| c.params()));
        p.extend(self.head.params());
        p
    }
}

/// `G(E(x))`.
pub fn translate<T: Real, R: Rng>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    decoder: &Decoder,
    x: Var,
    mode: TranslationMode,
    rng: &mut R,
) -> Result<Var> {
    let code = encoder.encode(g, store, x)?;
    let z = code.realize(g, mode, rng);
    Ok(decoder.decode(g, store, z))
}

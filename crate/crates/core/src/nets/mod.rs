//! Translation networks: encoders, decoders and multi-scale discriminators.

mod discriminator;
mod generator;
mod layers;

use std::collections::BTreeMap;

use gantruth_tensor::{Graph, ParamStore, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use discriminator::MultiScaleDiscriminator;
pub use generator::{translate, Decoder, Encoder, LatentCode, TranslationMode};
pub use layers::{Activation, Conv, ConvTranspose, ResBlock};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channels after the stem; doubled by every downsampling.
    pub base_channels: usize,
    pub downsamplings: usize,
    /// Residual blocks per encoder and per decoder.
    pub res_blocks: usize,
    /// How many of those blocks are tied between the two domains.
    pub shared_res_blocks: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub disc_scales: usize,
    pub activation: Activation,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 8,
            downsamplings: 2,
            res_blocks: 3,
            shared_res_blocks: 1,
            disc_channels: 8,
            disc_layers: 4,
            disc_scales: 3,
            activation: Activation::LeakyRelu,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("arch: {m}")));
        if self.base_channels == 0 || self.disc_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.shared_res_blocks > self.res_blocks {
            return bad("shared_res_blocks exceeds res_blocks");
        }
        if self.disc_scales == 0 || self.disc_layers == 0 {
            return bad("discriminator needs at least one scale and one layer");
        }
        if self.downsamplings > 4 || self.disc_layers + self.disc_scales > 10 {
            return bad("network too deep");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Smallest image side the discriminator accepts; also the granularity
    /// of valid sizes.
    pub fn min_image_side(&self) -> usize {
        (1usize << (self.disc_scales - 1 + self.disc_layers)).max(1 << self.downsamplings)
    }
}

/// The translation networks of one model. Generator-side parameters live in
/// `gen`, discriminator parameters in `disc`, so each side can be optimized
/// (and held constant) separately.
///
/// A one-way model has only `enc_s`, `dec_t` and `disc_t`.
pub struct TranslationNets {
    pub arch: ArchConfig,
    pub gen: ParamStore<f32>,
    pub disc: ParamStore<f32>,
    pub enc_s: Encoder,
    pub enc_t: Option<Encoder>,
    pub dec_s: Option<Decoder>,
    pub dec_t: Decoder,
    pub disc_s: Option<MultiScaleDiscriminator>,
    pub disc_t: MultiScaleDiscriminator,
}

impl TranslationNets {
    /// Initialize from `seed`. `two_way` builds both domains with the
    /// shared blocks tied.
    pub fn new(arch: &ArchConfig, two_way: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        let rng = &mut rng;
        let enc_s = Encoder::build(&mut gen, "E_S", arch, None, rng)?;
        let enc_t = if two_way {
            let shared = enc_s.shared_blocks().to_vec();
            Some(Encoder::build(&mut gen, "E_T", arch, Some(&shared), rng)?)
        } else {
            None
        };
        let dec_t = Decoder::build(&mut gen, "G_T", arch, None, rng)?;
        let dec_s = if two_way {
            let shared = dec_t.shared_blocks().to_vec();
            Some(Decoder::build(&mut gen, "G_S", arch, Some(&shared), rng)?)
        } else {
            None
        };
        let disc_t = MultiScaleDiscriminator::build(&mut disc, "D_T", arch, rng)?;
        let disc_s = if two_way { Some(MultiScaleDiscriminator::build(&mut disc, "D_S", arch, rng)?) } else { None };
        Ok(TranslationNets { arch: arch.clone(), gen, disc, enc_s, enc_t, dec_s, dec_t, disc_s, disc_t })
    }

    pub fn is_two_way(&self) -> bool {
        self.enc_t.is_some()
    }

    /// Parameter count per network. Tied blocks count towards each network
    /// that uses them; `total` counts them once.
    pub fn param_report(&self) -> ParamReport {
        let count = |store: &ParamStore<f32>, ids: Vec<gantruth_tensor::ParamId>| -> usize {
            ids.iter().map(|id| store.get(*id).len()).sum()
        };
        let mut per_network = BTreeMap::new();
        per_network.insert("E_S".to_string(), count(&self.gen, self.enc_s.params()));
        per_network.insert("G_T".to_string(), count(&self.gen, self.dec_t.params()));
        per_network.insert("D_T".to_string(), count(&self.disc, self.disc_t.params()));
        if let Some(e) = &self.enc_t {
            per_network.insert("E_T".to_string(), count(&self.gen, e.params()));
        }
        if let Some(d) = &self.dec_s {
            per_network.insert("G_S".to_string(), count(&self.gen, d.params()));
        }
        if let Some(d) = &self.disc_s {
            per_network.insert("D_S".to_string(), count(&self.disc, d.params()));
        }
        ParamReport { per_network, total: self.gen.num_scalars() + self.disc.num_scalars() }
    }

    /// Source-to-target translation `G_T(E_S(x))` of a whole batch.
    pub fn translate_to_target<R: Rng>(&self, x: &ImageBatch, mode: TranslationMode, rng: &mut R) -> Result<ImageBatch> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let y = translate(&mut g, &self.gen, &self.enc_s, &self.dec_t, xv, mode, rng)?;
        let out = g.value(y).clone();
        ImageBatch::new(out)
    }

    /// Target-to-source translation `G_S(E_T(x))`; two-way models only.
    pub fn translate_to_source<R: Rng>(&self, x: &ImageBatch, mode: TranslationMode, rng: &mut R) -> Result<ImageBatch> {
        let (Some(e), Some(d)) = (&self.enc_t, &self.dec_s) else {
            return Err(Error::Input("model has no target-to-source direction".into()));
        };
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let y = translate(&mut g, &self.gen, e, d, xv, mode, rng)?;
        let out = g.value(y).clone();
        ImageBatch::new(out)
    }
}

/// Discriminator probabilities for a graph value; convenience for callers
/// outside a training step.
pub fn discriminate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    d: &MultiScaleDiscriminator,
    x: Var,
) -> Result<Vec<Var>> {
    d.discriminate(g, store, x)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub per_network: BTreeMap<String, usize>,
    pub total: usize,
}

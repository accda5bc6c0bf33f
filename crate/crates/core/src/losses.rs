//! Differentiable loss terms and the weighted objectives built from them.
//!
//! Every function adds nodes to a caller-owned [`Graph`] and returns the
//! scalar node, so the same code serves training (f32) and gradient checks
//! (f64).

use gantruth_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, LabelMapping};
use crate::nets::{Decoder, Encoder, TranslationMode};
use crate::scene::InstanceAnnotation;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gan: f64,
    pub kl: f64,
    pub ll: f64,
    pub semseg: f64,
    pub disparity: f64,
    pub instance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gan: 10.0, kl: 0.1, ll: 10.0, semseg: 40.0, disparity: 0.4, instance: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gan", self.gan),
            ("kl", self.kl),
            ("ll", self.ll),
            ("semseg", self.semseg),
            ("disparity", self.disparity),
            ("instance", self.instance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn clamped_log<T: Real>(g: &mut Graph<T>, p: Var, complement: bool) -> Var {
    let p = g.clamp(p, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS));
    let p = if complement {
        let neg = g.scale(p, T::lit(-1.0));
        g.add_scalar(neg, T::one())
    } else {
        p
    };
    g.ln(p)
}

fn mean_over_scales<T: Real>(g: &mut Graph<T>, per_scale: Vec<Var>) -> Var {
    let n = per_scale.len();
    let s = g.add_all(&per_scale);
    g.scale(s, T::lit(1.0 / n as f64))
}

/// `-1/2 E log D(x) - 1/2 E log(1 - D(fake))`, averaged over patches and then
/// uniformly over scales.
pub fn gan_loss_discriminator<T: Real>(g: &mut Graph<T>, d_real: &[Var], d_fake: &[Var]) -> Result<Var> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Input("GAN loss needs at least one scale".into()));
    }
    if d_real.len() != d_fake.len() {
        return Err(Error::Input(format!(
            "GAN loss scale count mismatch: {} real vs {} fake",
            d_real.len(),
            d_fake.len()
        )));
    }
    let mut terms = Vec::new();
    for (&r, &f) in d_real.iter().zip(d_fake) {
        if g.value(r).is_empty() || g.value(f).is_empty() {
            return Err(Error::Input("empty discriminator output".into()));
        }
        let lr = clamped_log(g, r, false);
        let lr = g.mean(lr);
        let lf = clamped_log(g, f, true);
        let lf = g.mean(lf);
        let s = g.add(lr, lf);
        terms.push(g.scale(s, T::lit(-0.5)));
    }
    Ok(mean_over_scales(g, terms))
}

/// Non-saturating generator loss `-1/2 E log D(fake)`.
pub fn gan_loss_generator<T: Real>(g: &mut Graph<T>, d_fake: &[Var]) -> Result<Var> {
    if d_fake.is_empty() {
        return Err(Error::Input("GAN loss needs at least one scale".into()));
    }
    let mut terms = Vec::new();
    for &f in d_fake {
        if g.value(f).is_empty() {
            return Err(Error::Input("empty discriminator output".into()));
        }
        let lf = clamped_log(g, f, false);
        let lf = g.mean(lf);
        terms.push(g.scale(lf, T::lit(-0.5)));
    }
    Ok(mean_over_scales(g, terms))
}

/// `KL(N(mean, I) || N(0, I)) = 1/2 sum(mean^2)`, summed over latent entries
/// and averaged over the batch.
pub fn kl_to_standard_normal<T: Real>(g: &mut Graph<T>, mean: Var) -> Result<Var> {
    let v = g.value(mean);
    if !v.all_finite() {
        return Err(Error::Input("non-finite latent mean".into()));
    }
    let batch = if v.rank() == 0 { 1 } else { v.shape()[0].max(1) };
    let sq = g.square(mean);
    let s = g.sum(sq);
    Ok(g.scale(s, T::lit(0.5 / batch as f64)))
}

/// Negative log-likelihood of `x` under a unit-scale Laplacian centred on
/// `recon`, constants dropped: the mean absolute error.
pub fn reconstruction_nll<T: Real>(g: &mut Graph<T>, recon: Var, x: Var) -> Result<Var> {
    if g.value(recon).shape() != g.value(x).shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            g.value(recon).shape(),
            g.value(x).shape()
        )));
    }
    let d = g.sub(recon, x);
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[derive(Clone, Copy, Debug)]
pub struct VaeTerms {
    pub kl: Var,
    pub nll: Var,
    pub total: Var,
}

/// `kl_w * KL + ll_w * NLL` from already computed terms.
pub fn weighted_vae<T: Real>(g: &mut Graph<T>, kl: Var, nll: Var, weights: &LossWeights) -> VaeTerms {
    let a = g.scale(kl, T::lit(weights.kl));
    let b = g.scale(nll, T::lit(weights.ll));
    let total = g.add(a, b);
    VaeTerms { kl, nll, total }
}

/// VAE loss of one domain: encode, draw a code per `mode`, decode with the
/// same domain's decoder.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &Encoder,
    decoder: &Decoder,
    x: Var,
    weights: &LossWeights,
    mode: TranslationMode,
    rng: &mut R,
) -> Result<VaeTerms> {
    let code = encoder.encode(g, store, x)?;
    let kl = kl_to_standard_normal(g, code.mean)?;
    let z = code.realize(g, mode, rng);
    let recon = decoder.decode(g, store, z);
    let nll = reconstruction_nll(g, recon, x)?;
    Ok(weighted_vae(g, kl, nll, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct CycleTerms {
    pub kl_first: Var,
    pub kl_second: Var,
    pub nll: Var,
    pub total: Var,
}

/// `kl_w * (KL_first + KL_second) + ll_w * NLL` from already computed terms.
pub fn weighted_cycle<T: Real>(g: &mut Graph<T>, kl_first: Var, kl_second: Var, nll: Var, weights: &LossWeights) -> CycleTerms {
    let k = g.add(kl_first, kl_second);
    let k = g.scale(k, T::lit(weights.kl));
    let l = g.scale(nll, T::lit(weights.ll));
    let total = g.add(k, l);
    CycleTerms { kl_first, kl_second, nll, total }
}

/// Round trip `x -> G_dst(E_src(x)) -> G_src(E_dst(.))` with a KL penalty on
/// both encodings and a reconstruction term on the result.
#[allow(clippy::too_many_arguments)]
pub fn cycle_consistency_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    enc_src: &Encoder,
    dec_src: &Decoder,
    enc_dst: &Encoder,
    dec_dst: &Decoder,
    x: Var,
    weights: &LossWeights,
    mode: TranslationMode,
    rng: &mut R,
) -> Result<CycleTerms> {
    let first = enc_src.encode(g, store, x)?;
    let kl_first = kl_to_standard_normal(g, first.mean)?;
    let z = first.realize(g, mode, rng);
    let translated = dec_dst.decode(g, store, z);
    let second = enc_dst.encode(g, store, translated)?;
    let kl_second = kl_to_standard_normal(g, second.mean)?;
    let z2 = second.realize(g, mode, rng);
    let back = dec_src.decode(g, store, z2);
    let nll = reconstruction_nll(g, back, x)?;
    Ok(weighted_cycle(g, kl_first, kl_second, nll, weights))
}

/// Cross-entropy outcome; `all_ignored` flags a batch without any labelled
/// pixel (the loss is then 0).
#[derive(Clone, Copy, Debug)]
pub struct SemsegLoss {
    pub loss: Var,
    pub all_ignored: bool,
}

/// Mean softmax cross-entropy of `(n, K, H, W)` logits against label maps
/// already expressed in the target taxonomy.
pub fn gt_semseg_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[LabelMap], ignore_index: u32) -> Result<SemsegLoss> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::Shape(format!("semseg logits {shape:?} for {} label maps", labels.len())));
    }
    let (k, h, w) = (shape[1], shape[2], shape[3]);
    let mut targets = Vec::with_capacity(labels.len() * h * w);
    for lm in labels {
        if lm.height != h || lm.width != w {
            return Err(Error::Shape(format!("label map {}x{} vs logits {h}x{w}", lm.height, lm.width)));
        }
        for &id in &lm.data {
            if id == ignore_index {
                targets.push(None);
            } else if (id as usize) < k {
                targets.push(Some(id as usize));
            } else {
                return Err(Error::Mapping(format!("label {id} outside the {k}-class taxonomy")));
            }
        }
    }
    let all_ignored = targets.iter().all(Option::is_none);
    if all_ignored {
        log::warn!("semantic loss: every pixel is ignored");
    }
    let loss = g.softmax_cross_entropy(logits, &targets);
    Ok(SemsegLoss { loss, all_ignored })
}

/// Target for the disparity loss: values plus a validity mask (sky excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityTarget {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityTarget {
    /// Pixels labelled `sky_id` in `semantic` are invalid.
    pub fn from_gt(disparity: &crate::scene::DisparityMap, semantic: &LabelMap, sky_id: u32) -> Result<Self> {
        if disparity.height != semantic.height || disparity.width != semantic.width {
            return Err(Error::Shape("disparity and semantic maps differ in size".into()));
        }
        Ok(DisparityTarget {
            height: disparity.height,
            width: disparity.width,
            values: disparity.data.clone(),
            valid: semantic.data.iter().map(|&id| id != sky_id).collect(),
        })
    }
}

/// Mean `|c * pred - gt|` over valid pixels of `(n, 1, H, W)` predictions.
/// Returns 0 when no pixel is valid.
pub fn gt_disparity_loss<T: Real>(g: &mut Graph<T>, pred: Var, targets: &[DisparityTarget], scale_const: f64) -> Result<Var> {
    if !(scale_const > 0.0 && scale_const.is_finite()) {
        return Err(Error::Input(format!("scale constant must be positive, got {scale_const}")));
    }
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[0] != targets.len() {
        return Err(Error::Shape(format!("disparity prediction {shape:?} for {} targets", targets.len())));
    }
    let mut gt = Vec::new();
    let mut mask = Vec::new();
    for t in targets {
        if t.height != shape[2] || t.width != shape[3] {
            return Err(Error::Shape(format!(
                "disparity target {}x{} vs prediction {}x{}",
                t.height, t.width, shape[2], shape[3]
            )));
        }
        gt.extend(t.values.iter().map(|&v| T::lit(v as f64)));
        mask.extend(t.valid.iter().map(|&v| if v { T::one() } else { T::zero() }));
    }
    let count = mask.iter().filter(|m| **m > T::zero()).count();
    let gt = g.constant(Tensor::new(shape.clone(), gt)?);
    let maskv = g.constant(Tensor::new(shape, mask)?);
    let scaled = g.scale(pred, T::lit(scale_const));
    let d = g.sub(scaled, gt);
    let a = g.abs(d);
    let m = g.mul(a, maskv);
    let s = g.sum(m);
    Ok(g.scale(s, T::lit(if count == 0 { 0.0 } else { 1.0 / count as f64 })))
}

/// Per-instance head outputs, predicted for one ground-truth instance.
#[derive(Clone, Copy, Debug)]
pub struct InstanceHeadOutput {
    /// `(1, K, 1, 1)` class logits.
    pub class_logits: Var,
    /// `(1, 4, 1, 1)` box `[x0, y0, x1, y1]` in image-relative units.
    pub bbox: Var,
    /// `(1, 1, H, W)` mask logits over the whole image.
    pub mask_logits: Var,
}

/// One ground-truth instance in the target taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTarget {
    /// Target class; meaningless when the instance is not kept.
    pub class: usize,
    /// `[x0, y0, x1, y1]` in pixels, exclusive upper bounds.
    pub bbox: [u32; 4],
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl InstanceTarget {
    fn relative_box(&self) -> [f64; 4] {
        let [x0, y0, x1, y1] = self.bbox;
        let (w, h) = (self.width as f64, self.height as f64);
        [x0 as f64 / w, y0 as f64 / h, x1 as f64 / w, y1 as f64 / h]
    }

    fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if x1 <= x0 || y1 <= y0 || x1 as usize > self.width || y1 as usize > self.height {
            return Err(Error::Input(format!("malformed instance box {:?}", self.bbox)));
        }
        if self.mask.len() != self.height * self.width {
            return Err(Error::Shape("instance mask size".into()));
        }
        Ok(())
    }
}

/// Convert annotations to targets plus keep flags: instances whose class
/// maps to NULL are dropped from the loss.
pub fn instance_targets(
    annotations: &[InstanceAnnotation],
    mapping: &LabelMapping,
    height: usize,
    width: usize,
) -> Result<(Vec<InstanceTarget>, Vec<bool>)> {
    let keep = crate::labels::instance_gradient_mask(annotations, mapping)?;
    let targets = annotations
        .iter()
        .map(|a| {
            Ok(InstanceTarget {
                class: mapping.map_id(a.class_id)?.unwrap_or(0) as usize,
                bbox: a.bbox,
                height,
                width,
                mask: a.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((targets, keep))
}

/// Smooth-L1 transition point for box regression in relative units.
const BOX_BETA: f64 = 0.1;

/// Sum over kept instances of class cross-entropy + box smooth-L1 + mask BCE
/// inside the ground-truth box, divided by the number of kept instances.
pub fn gt_instance_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &[InstanceHeadOutput],
    targets: &[InstanceTarget],
    keep: &[bool],
) -> Result<Var> {
    if outputs.len() != targets.len() || keep.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} head outputs, {} targets, {} keep flags",
            outputs.len(),
            targets.len(),
            keep.len()
        )));
    }
    let mut terms = Vec::new();
    for ((out, t), _) in outputs.iter().zip(targets).zip(keep).filter(|(_, k)| **k) {
        t.validate()?;
        let k = g.value(out.class_logits).shape()[1];
        if t.class >= k {
            return Err(Error::Mapping(format!("instance class {} outside {k} classes", t.class)));
        }
        let ce = g.softmax_cross_entropy(out.class_logits, &[Some(t.class)]);

        let rel = t.relative_box();
        let gt_box = g.constant(Tensor::new(vec![1, 4, 1, 1], rel.iter().map(|&v| T::lit(v)).collect())?);
        let d = g.sub(out.bbox, gt_box);
        let sl = g.smooth_l1(d, T::lit(BOX_BETA));
        let box_term = g.mean(sl);

        let mshape = g.value(out.mask_logits).shape().to_vec();
        if mshape != [1, 1, t.height, t.width] {
            return Err(Error::Shape(format!("mask logits {mshape:?} for a {}x{} image", t.height, t.width)));
        }
        let [x0, y0, x1, y1] = t.bbox;
        let mut weights = vec![T::zero(); t.height * t.width];
        for y in y0..y1 {
            for x in x0..x1 {
                weights[y as usize * t.width + x as usize] = T::one();
            }
        }
        let targets_px: Vec<T> = t.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let mask_term = g.bce_with_logits(out.mask_logits, &targets_px, &weights);

        terms.push(g.add_all(&[ce, box_term, mask_term]));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let n = terms.len();
    let s = g.add_all(&terms);
    Ok(g.scale(s, T::lit(1.0 / n as f64)))
}

/// Cross-entropy of `f_S` logits on the translated image against `f_S`'s
/// own hard labels on the untranslated image.
pub fn semantic_consistency_loss<T: Real>(g: &mut Graph<T>, source_logits: &Tensor<T>, translated_logits: Var) -> Result<Var> {
    if source_logits.shape() != g.value(translated_logits).shape() || source_logits.rank() != 4 {
        return Err(Error::Shape(format!(
            "source logits {:?} vs translated logits {:?}",
            source_logits.shape(),
            g.value(translated_logits).shape()
        )));
    }
    let targets: Vec<Option<usize>> = argmax_channels(source_logits).into_iter().map(Some).collect();
    Ok(g.softmax_cross_entropy(translated_logits, &targets))
}

/// Per-pixel argmax over the channel axis of `(n, k, h, w)`; ties go to the
/// lowest class.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let (n, k, h, w) = t.dims4();
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Ground-truth preservation terms (unweighted); absent tasks are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GtTerms {
    pub semseg: Option<Var>,
    pub disparity: Option<Var>,
    pub instance: Option<Var>,
}

/// The two sides of one adversarial game. A training phase fills only the
/// side it optimizes.
#[derive(Clone, Copy, Debug, Default)]
pub struct GanTerms {
    pub discriminator: Option<Var>,
    pub generator: Option<Var>,
}

/// Terms of one UNIT domain. The discriminator phase has no VAE or cycle
/// terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitDomainTerms {
    pub gan: GanTerms,
    pub vae: Option<VaeTerms>,
    pub cycle: Option<CycleTerms>,
}

/// A weighted objective split into its discriminator-side and generator-side
/// sums, with every unweighted term kept by name for logging.
#[derive(Clone, Debug, Default)]
pub struct Objective {
    pub discriminator: Option<Var>,
    pub generator: Option<Var>,
    pub terms: Vec<(String, Var)>,
}

impl Objective {
    /// Sum of whichever sides are present.
    pub fn total<T: Real>(&self, g: &mut Graph<T>) -> Option<Var> {
        match (self.discriminator, self.generator) {
            (Some(d), Some(gen)) => Some(g.add(d, gen)),
            (d, gen) => d.or(gen),
        }
    }

    pub fn term(&self, name: &str) -> Option<Var> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn push_generator<T: Real>(&mut self, g: &mut Graph<T>, v: Var, w: f64) {
        let wv = g.scale(v, T::lit(w));
        self.generator = Some(match self.generator {
            Some(acc) => g.add(acc, wv),
            None => wv,
        });
    }

    fn push_discriminator<T: Real>(&mut self, g: &mut Graph<T>, v: Var, w: f64) {
        let wv = g.scale(v, T::lit(w));
        self.discriminator = Some(match self.discriminator {
            Some(acc) => g.add(acc, wv),
            None => wv,
        });
    }

    fn add_gan<T: Real>(&mut self, g: &mut Graph<T>, gan: &GanTerms, suffix: &str, weight: f64) {
        if let Some(d) = gan.discriminator {
            self.terms.push((format!("gan_d_{suffix}"), d));
            self.push_discriminator(g, d, weight);
        }
        if let Some(gen) = gan.generator {
            self.terms.push((format!("gan_g_{suffix}"), gen));
            self.push_generator(g, gen, weight);
        }
    }

    fn add_gt<T: Real>(&mut self, g: &mut Graph<T>, gt: &GtTerms, w: &LossWeights) {
        for (name, term, weight) in [
            ("gt_semseg", gt.semseg, w.semseg),
            ("gt_disparity", gt.disparity, w.disparity),
            ("gt_instance", gt.instance, w.instance),
        ] {
            if let Some(v) = term {
                self.terms.push((name.into(), v));
                self.push_generator(g, v, weight);
            }
        }
    }

    fn add_unit_domain<T: Real>(&mut self, g: &mut Graph<T>, d: &UnitDomainTerms, suffix: &str, w: &LossWeights) {
        self.add_gan(g, &d.gan, suffix, w.gan);
        if let Some(vae) = d.vae {
            self.terms.push((format!("vae_kl_{suffix}"), vae.kl));
            self.terms.push((format!("vae_ll_{suffix}"), vae.nll));
            self.push_generator(g, vae.total, 1.0);
        }
        if let Some(cc) = d.cycle {
            self.terms.push((format!("cc_kl_first_{suffix}"), cc.kl_first));
            self.terms.push((format!("cc_kl_second_{suffix}"), cc.kl_second));
            self.terms.push((format!("cc_ll_{suffix}"), cc.nll));
            self.push_generator(g, cc.total, 1.0);
        }
    }
}

/// `gan_w * L_GAN(E_S, G_T, D_T) + sum of weighted GT terms`.
pub fn gantruth_objective<T: Real>(g: &mut Graph<T>, weights: &LossWeights, gan: &GanTerms, gt: &GtTerms) -> Objective {
    let mut o = Objective::default();
    o.add_gan(g, gan, "t", weights.gan);
    o.add_gt(g, gt, weights);
    o
}

/// UNIT objective: for each domain, adversarial + VAE + cycle terms.
pub fn unit_objective<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    source: &UnitDomainTerms,
    target: &UnitDomainTerms,
) -> Objective {
    let mut o = Objective::default();
    o.add_unit_domain(g, source, "s", weights);
    o.add_unit_domain(g, target, "t", weights);
    o
}

/// UNIT objective plus the weighted GT terms.
pub fn unit_gantruth_objective<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    source: &UnitDomainTerms,
    target: &UnitDomainTerms,
    gt: &GtTerms,
) -> Objective {
    let mut o = unit_objective(g, weights, source, target);
    o.add_gt(g, gt, weights);
    o
}

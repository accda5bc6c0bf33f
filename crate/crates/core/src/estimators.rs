//! Small supervised label estimators: semantic segmentation, disparity and
//! per-instance heads on a shared encoder-decoder backbone.

use std::path::Path;

use gantruth_tensor::{Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::checkpoint::Archive;
use crate::dataset::{Dataset, Domain, Sample};
use crate::error::{Error, Result};
use crate::eval::{miou, ConfusionMatrix};
use crate::labels::{remap, LabelMap, LabelMapping};
use crate::losses::{
    argmax_channels, gt_disparity_loss, gt_instance_loss, gt_semseg_loss, instance_targets, DisparityTarget,
    InstanceHeadOutput,
};
use crate::nets::{Activation, Conv, ConvTranspose};
use crate::scene::{Camera, SceneClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Semseg,
    Disparity,
    Instance,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Semseg => "semseg",
            EstimatorKind::Disparity => "disparity",
            EstimatorKind::Instance => "instance",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semseg" => Ok(EstimatorKind::Semseg),
            "disparity" => Ok(EstimatorKind::Disparity),
            "instance" => Ok(EstimatorKind::Instance),
            other => Err(Error::Config(format!("unknown estimator kind `{other}` (semseg, disparity, instance)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Backbone channels at full resolution.
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples held out from the end of the dataset for validation.
    pub val_count: usize,
    pub min_miou: f64,
    pub max_abs_rel: f64,
    pub max_mask_bce: f64,
    /// Pixels deeper than this are left out of the disparity validation.
    pub max_eval_depth_m: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            width: 12,
            steps: 1500,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
            val_count: 200,
            min_miou: 0.80,
            max_abs_rel: 0.10,
            max_mask_bce: 0.30,
            max_eval_depth_m: 80.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.batch_size == 0 {
            return Err(Error::Config("estimator width and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("estimator lr must be positive".into()));
        }
        Ok(())
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn conv<R: Rng>(store: &mut ParamStore<f32>, name: &str, i: usize, o: usize, k: usize, s: usize, p: usize, rng: &mut R) -> Result<Conv> {
    Conv::new(store, name, i, o, k, s, p, he_std(i * k * k), rng)
}

/// Two-level encoder-decoder with skip connections. Input is the image plus
/// two coordinate channels.
#[derive(Clone, Debug)]
struct Backbone {
    stem: Conv,
    enc0: Conv,
    down1: Conv,
    enc1: Conv,
    down2: Conv,
    enc2: Conv,
    up2: ConvTranspose,
    dec1: Conv,
    up1: ConvTranspose,
    dec0: Conv,
}

const ACT: Activation = Activation::LeakyRelu;
const COORD_CHANNELS: usize = 2;

impl Backbone {
    fn build<R: Rng>(store: &mut ParamStore<f32>, c: usize, rng: &mut R) -> Result<Self> {
        let i = 3 + COORD_CHANNELS;
        Ok(Backbone {
            stem: conv(store, "backbone.stem", i, c, 3, 1, 1, rng)?,
            enc0: conv(store, "backbone.enc0", c, c, 3, 1, 1, rng)?,
            down1: conv(store, "backbone.down1", c, 2 * c, 4, 2, 1, rng)?,
            enc1: conv(store, "backbone.enc1", 2 * c, 2 * c, 3, 1, 1, rng)?,
            down2: conv(store, "backbone.down2", 2 * c, 4 * c, 4, 2, 1, rng)?,
            enc2: conv(store, "backbone.enc2", 4 * c, 4 * c, 3, 1, 1, rng)?,
            up2: ConvTranspose::new(store, "backbone.up2", 4 * c, 2 * c, 4, 2, 1, he_std(4 * c * 4), rng)?,
            dec1: conv(store, "backbone.dec1", 4 * c, 2 * c, 3, 1, 1, rng)?,
            up1: ConvTranspose::new(store, "backbone.up1", 2 * c, c, 4, 2, 1, he_std(2 * c * 4), rng)?,
            dec0: conv(store, "backbone.dec0", 2 * c, c, 3, 1, 1, rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (n, _, h, w) = g.value(x).dims4();
        let coords = coordinate_planes::<T>(n, h, w);
        let coords = g.constant(coords);
        let x = g.concat_channels(x, coords);
        let cv = |g: &mut Graph<T>, c: &Conv, v: Var| {
            let y = c.forward(g, store, v);
            ACT.apply(g, y)
        };
        let f0 = cv(g, &self.stem, x);
        let f0 = cv(g, &self.enc0, f0);
        let f1 = cv(g, &self.down1, f0);
        let f1 = cv(g, &self.enc1, f1);
        let f2 = cv(g, &self.down2, f1);
        let f2 = cv(g, &self.enc2, f2);
        let u1 = self.up2.forward(g, store, f2);
        let u1 = ACT.apply(g, u1);
        let u1 = g.concat_channels(u1, f1);
        let u1 = cv(g, &self.dec1, u1);
        let u0 = self.up1.forward(g, store, u1);
        let u0 = ACT.apply(g, u0);
        let u0 = g.concat_channels(u0, f0);
        cv(g, &self.dec0, u0)
    }
}

/// Row and column position in `[-1, 1]`.
fn coordinate_planes<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, len: usize| if len > 1 { 2.0 * i as f64 / (len - 1) as f64 - 1.0 } else { 0.0 };
    Tensor::from_fn(&[n, COORD_CHANNELS, h, w], |idx| {
        let (c, y, x) = ((idx / (h * w)) % COORD_CHANNELS, (idx / w) % h, idx % w);
        T::lit(if c == 0 { lin(y, h) } else { lin(x, w) })
    })
}

#[derive(Clone, Debug)]
enum Heads {
    Semseg { logits: Conv },
    Disparity { out: Conv },
    Instance { class: Conv, bbox: Conv, mask: Conv },
}

/// How a bundle came to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub domain: Domain,
    pub steps: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Network parameters plus what they predict.
#[derive(Clone, Debug)]
pub struct EstimatorBundle {
    kind: EstimatorKind,
    width: usize,
    taxonomy: Vec<String>,
    store: ParamStore<f32>,
    backbone: Backbone,
    heads: Heads,
    provenance: Option<Provenance>,
}

/// Evaluation-mode output of [`EstimatorBundle::estimate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// `(n, K, H, W)`.
    Logits(Tensor<f32>),
    /// `(n, 1, H, W)`, non-negative.
    Disparity(Tensor<f32>),
}

impl EstimatorBundle {
    /// Fresh, trainable bundle.
    pub fn new(kind: EstimatorKind, width: usize, taxonomy: Vec<String>, seed: u64) -> Result<Self> {
        if width == 0 || taxonomy.is_empty() {
            return Err(Error::Config("estimator needs a positive width and a non-empty taxonomy".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mut store, width, rng)?;
        let k = taxonomy.len();
        let heads = match kind {
            EstimatorKind::Semseg => Heads::Semseg { logits: conv(&mut store, "head.logits", width, k, 1, 1, 0, rng)? },
            EstimatorKind::Disparity => Heads::Disparity { out: conv(&mut store, "head.disparity", width, 1, 1, 1, 0, rng)? },
            EstimatorKind::Instance => Heads::Instance {
                class: conv(&mut store, "head.class", width, k, 1, 1, 0, rng)?,
                bbox: conv(&mut store, "head.box", width, 4, 1, 1, 0, rng)?,
                mask: conv(&mut store, "head.mask", width, 1, 1, 1, 0, rng)?,
            },
        };
        Ok(EstimatorBundle { kind, width, taxonomy, store, backbone, heads, provenance: None })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn taxonomy(&self) -> &[String] {
        &self.taxonomy
    }

    pub fn num_classes(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Make the parameters immutable. Idempotent.
    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// SHA-256 over parameter names and values.
    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn expect_kind(&self, kind: EstimatorKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Input(format!("{} estimator used as {}", self.kind.name(), kind.name())));
        }
        Ok(())
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != 3 || s[2] == 0 || s[3] == 0 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!("estimator input must be (n, 3, h, w) with h, w divisible by 4, got {s:?}")));
        }
        Ok(())
    }

    fn features(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        Ok(self.backbone.forward(g, &self.store, x))
    }

    /// `(n, K, H, W)` class logits.
    pub fn semseg_logits(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        self.expect_kind(EstimatorKind::Semseg)?;
        let f = self.features(g, x)?;
        let Heads::Semseg { logits } = &self.heads else { unreachable!() };
        Ok(logits.forward(g, &self.store, f))
    }

    /// `(n, 1, H, W)` disparity in pixels.
    pub fn disparity(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        self.expect_kind(EstimatorKind::Disparity)?;
        let f = self.features(g, x)?;
        let Heads::Disparity { out } = &self.heads else { unreachable!() };
        let z = out.forward(g, &self.store, f);
        Ok(g.softplus(z))
    }

    /// Head outputs for each box of a single image (`n = 1`).
    pub fn instance_outputs(&self, g: &mut Graph<f32>, x: Var, boxes: &[[u32; 4]]) -> Result<Vec<InstanceHeadOutput>> {
        self.expect_kind(EstimatorKind::Instance)?;
        if g.value(x).shape()[0] != 1 {
            return Err(Error::Shape("instance heads take one image at a time".into()));
        }
        let f = self.features(g, x)?;
        let (_, _, h, w) = g.value(f).dims4();
        let Heads::Instance { class, bbox, mask } = &self.heads else { unreachable!() };
        let mask_logits = mask.forward(g, &self.store, f);
        let mut out = Vec::with_capacity(boxes.len());
        for b in boxes {
            let [x0, y0, x1, y1] = b.map(|v| v as usize);
            if x1 <= x0 || y1 <= y0 || x1 > w || y1 > h {
                return Err(Error::Input(format!("malformed instance box {b:?}")));
            }
            let mut m = vec![0.0f32; h * w];
            for y in y0..y1 {
                m[y * w + x0..y * w + x1].fill(1.0);
            }
            let pooled = g.masked_spatial_mean(f, &m);
            let class_logits = class.forward(g, &self.store, pooled);
            let bz = bbox.forward(g, &self.store, pooled);
            let bbox = g.sigmoid(bz);
            out.push(InstanceHeadOutput { class_logits, bbox, mask_logits });
        }
        Ok(out)
    }

    /// Deterministic prediction for a batch.
    pub fn estimate(&self, x: &ImageBatch) -> Result<Prediction> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        match self.kind {
            EstimatorKind::Semseg => {
                let y = self.semseg_logits(&mut g, xv)?;
                Ok(Prediction::Logits(g.value(y).clone()))
            }
            EstimatorKind::Disparity => {
                let y = self.disparity(&mut g, xv)?;
                Ok(Prediction::Disparity(g.value(y).clone()))
            }
            EstimatorKind::Instance => {
                Err(Error::Input("instance estimates need boxes; use instance_outputs".into()))
            }
        }
    }

    /// Per-pixel argmax labels of one batch.
    pub fn predict_labels(&self, x: &ImageBatch) -> Result<Vec<u32>> {
        match self.estimate(x)? {
            Prediction::Logits(t) => Ok(argmax_channels(&t).into_iter().map(|c| c as u32).collect()),
            Prediction::Disparity(_) => Err(Error::Input("disparity estimator has no labels".into())),
        }
    }

    fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "estimator",
            "kind": self.kind,
            "width": self.width,
            "taxonomy": self.taxonomy,
            "provenance": self.provenance,
            "frozen": self.is_frozen(),
            "checksum": self.checksum(),
        })
    }

    /// Write the archive; returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut a = Archive::new(self.manifest());
        a.add_store("", &self.store);
        a.save(path)
    }

    /// Load an archive. The stored checksum must match the parameters; a
    /// bundle saved frozen comes back frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let format: String = a.field("format")?;
        if format != "estimator" {
            return Err(Error::Checkpoint(format!("{} is a {format} archive, not an estimator", path.display())));
        }
        let kind: EstimatorKind = a.field("kind")?;
        let width: usize = a.field("width")?;
        let taxonomy: Vec<String> = a.field("taxonomy")?;
        let mut b = EstimatorBundle::new(kind, width, taxonomy, 0)?;
        a.load_store("", &mut b.store)?;
        b.provenance = a.field("provenance")?;
        let checksum: String = a.field("checksum")?;
        if checksum != b.checksum() {
            return Err(Error::Checkpoint(format!("{}: parameter checksum mismatch", path.display())));
        }
        if a.field::<bool>("frozen")? {
            b.freeze();
        }
        Ok(b)
    }
}

/// Supervised training data for one estimator kind.
pub struct TrainingData<'a> {
    pub samples: &'a [Sample],
    pub mapping: &'a LabelMapping,
    pub camera: Camera,
}

fn batch_images(samples: &[&Sample]) -> Result<ImageBatch> {
    ImageBatch::from_images(samples.iter().map(|s| &s.image))
}

fn gt_of(s: &Sample) -> Result<&crate::scene::SceneGroundTruth> {
    s.gt.as_ref().ok_or_else(|| Error::Dataset { path: s.id.clone().into(), reason: "sample has no ground truth".into() })
}

fn sky_id() -> u32 {
    SceneClass::Sky.id()
}

/// One supervised loss evaluation on `batch`.
fn supervised_loss(bundle: &EstimatorBundle, g: &mut Graph<f32>, batch: &[&Sample], data: &TrainingData) -> Result<Var> {
    let images = batch_images(batch)?;
    match bundle.kind {
        EstimatorKind::Semseg => {
            let x = g.constant(images.into_tensor());
            let logits = bundle.semseg_logits(g, x)?;
            let labels = batch
                .iter()
                .map(|s| remap(&gt_of(s)?.semantic, data.mapping))
                .collect::<Result<Vec<LabelMap>>>()?;
            Ok(gt_semseg_loss(g, logits, &labels, data.mapping.ignore_index())?.loss)
        }
        EstimatorKind::Disparity => {
            let x = g.constant(images.into_tensor());
            let pred = bundle.disparity(g, x)?;
            let targets = batch
                .iter()
                .map(|s| {
                    let gt = gt_of(s)?;
                    DisparityTarget::from_gt(&gt.disparity, &gt.semantic, sky_id())
                })
                .collect::<Result<Vec<_>>>()?;
            gt_disparity_loss(g, pred, &targets, 1.0)
        }
        EstimatorKind::Instance => {
            let mut terms = Vec::new();
            for (i, s) in batch.iter().enumerate() {
                let gt = gt_of(s)?;
                let (h, w) = (gt.semantic.height, gt.semantic.width);
                let (targets, keep) = instance_targets(&gt.instances, data.mapping, h, w)?;
                if !keep.iter().any(|k| *k) {
                    continue;
                }
                let x = g.constant(images.tensor().batch_item(i));
                let boxes: Vec<[u32; 4]> = targets.iter().map(|t| t.bbox).collect();
                let outs = bundle.instance_outputs(g, x, &boxes)?;
                terms.push(gt_instance_loss(g, &outs, &targets, &keep)?);
            }
            if terms.is_empty() {
                return Ok(g.constant(Tensor::scalar(0.0)));
            }
            let n = terms.len();
            let s = g.add_all(&terms);
            Ok(g.scale(s, 1.0 / n as f32))
        }
    }
}

/// Validation metric of `bundle` on `samples`: mIOU for semseg, depth
/// abs-rel for disparity, mask BCE for instance heads.
pub fn validation_metric(bundle: &EstimatorBundle, samples: &[Sample], data: &TrainingData, max_depth_m: f64) -> Result<f64> {
    match bundle.kind {
        EstimatorKind::Semseg => {
            let mut cm = ConfusionMatrix::new(bundle.num_classes());
            for chunk in samples.chunks(8) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let pred = bundle.predict_labels(&batch_images(&refs)?)?;
                let per = pred.len() / chunk.len();
                for (s, p) in chunk.iter().zip(pred.chunks(per)) {
                    let truth = remap(&gt_of(s)?.semantic, data.mapping)?;
                    cm.accumulate(p, &truth.data, data.mapping.ignore_index())?;
                }
            }
            miou(&cm).ok_or_else(|| Error::Input("validation set has no labelled pixels".into()))
        }
        EstimatorKind::Disparity => {
            let min_disp = data.camera.disparity(max_depth_m);
            let (mut total, mut count) = (0.0f64, 0usize);
            for chunk in samples.chunks(8) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let Prediction::Disparity(pred) = bundle.estimate(&batch_images(&refs)?)? else { unreachable!() };
                let per = pred.len() / chunk.len();
                for (s, p) in chunk.iter().zip(pred.data().chunks(per)) {
                    let gt = gt_of(s)?;
                    for ((&dp, &dg), &c) in p.iter().zip(&gt.disparity.data).zip(&gt.semantic.data) {
                        if c == sky_id() || (dg as f64) < min_disp {
                            continue;
                        }
                        // depth ratio: (fB / dp) / (fB / dg) = dg / dp
                        let err = if dp > 0.0 { (dg as f64 / dp as f64 - 1.0).abs() } else { f64::INFINITY };
                        total += err;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::Input("validation set has no valid disparity pixels".into()));
            }
            Ok(total / count as f64)
        }
        EstimatorKind::Instance => {
            let (mut total, mut count) = (0.0f64, 0usize);
            for s in samples {
                let gt = gt_of(s)?;
                let (h, w) = (gt.semantic.height, gt.semantic.width);
                let (targets, keep) = instance_targets(&gt.instances, data.mapping, h, w)?;
                let boxes: Vec<[u32; 4]> = targets.iter().map(|t| t.bbox).collect();
                if boxes.is_empty() {
                    continue;
                }
                let mut g = Graph::new();
                let x = g.constant(ImageBatch::from_images([&s.image])?.into_tensor());
                let outs = bundle.instance_outputs(&mut g, x, &boxes)?;
                for ((o, t), k) in outs.iter().zip(&targets).zip(&keep) {
                    if !k {
                        continue;
                    }
                    let mut weights = vec![0.0f32; h * w];
                    let [x0, y0, x1, y1] = t.bbox.map(|v| v as usize);
                    for y in y0..y1 {
                        weights[y * w + x0..y * w + x1].fill(1.0);
                    }
                    let tg: Vec<f32> = t.mask.iter().map(|&m| m as u8 as f32).collect();
                    let bce = g.bce_with_logits(o.mask_logits, &tg, &weights);
                    total += g.value(bce).item() as f64;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Input("validation set has no kept instances".into()));
            }
            Ok(total / count as f64)
        }
    }
}

/// Whether `value` meets the configured floor for `kind`.
fn meets_floor(kind: EstimatorKind, value: f64, cfg: &EstimatorConfig) -> (bool, f64, &'static str) {
    match kind {
        EstimatorKind::Semseg => (value >= cfg.min_miou, cfg.min_miou, "miou"),
        EstimatorKind::Disparity => (value <= cfg.max_abs_rel, cfg.max_abs_rel, "abs_rel"),
        EstimatorKind::Instance => (value <= cfg.max_mask_bce, cfg.max_mask_bce, "mask_bce"),
    }
}

/// Optimize `bundle` on `train` for `steps` Adam steps of `batch_size`
/// samples drawn epoch-wise without replacement.
pub fn fit(bundle: &mut EstimatorBundle, data: &TrainingData, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let ids: Vec<_> = bundle.store.ids().collect();
    let mut adam = Adam::new(AdamConfig { lr, beta1: 0.9, ..AdamConfig::default() }, &bundle.store, ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e571);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if order.is_empty() {
                order = (0..data.samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&data.samples[order.pop().unwrap()]);
        }
        let mut g = Graph::new();
        let loss = supervised_loss(bundle, &mut g, &batch, data)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: format!("{}_supervised", bundle.kind.name()), value: v as f64, step: step as u64 });
        }
        let grads = g.backward(loss).for_store(&bundle.store);
        adam.step(&mut bundle.store, &grads)?;
    }
    Ok(())
}

/// Train a fresh estimator of `kind` on `domain` images of `dataset`, check
/// the validation floor on held-out samples, and freeze it.
pub fn pretrain_estimator(
    kind: EstimatorKind,
    dataset: &Dataset,
    domain: Domain,
    mapping: &LabelMapping,
    config: &EstimatorConfig,
) -> Result<EstimatorBundle> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset { path: dataset.root().into(), reason: "empty dataset".into() });
    }
    let samples = dataset.load_all(domain, true)?;
    let val = config.val_count.min(samples.len() / 5).max(1).min(samples.len());
    let (train, held) = samples.split_at(samples.len() - val);
    let train = if train.is_empty() { held } else { train };
    let data = TrainingData { samples: train, mapping, camera: dataset.manifest().camera };
    let mut bundle = EstimatorBundle::new(kind, config.width, mapping.target_names(), config.seed)?;
    fit(&mut bundle, &data, config.steps, config.batch_size, config.lr, config.seed)?;
    let held_data = TrainingData { samples: held, ..data };
    let value = validation_metric(&bundle, held, &held_data, config.max_eval_depth_m)?;
    let (ok, floor, metric) = meets_floor(kind, value, config);
    if !ok {
        return Err(Error::MetricFloor { metric: metric.into(), value, floor, steps: config.steps });
    }
    bundle.provenance = Some(Provenance {
        dataset_sha256: dataset.content_hash()?,
        domain,
        steps: config.steps,
        seed: config.seed,
        metric: metric.into(),
        value,
    });
    bundle.freeze();
    Ok(bundle)
}

//! Alternating adversarial training of the translation models, checkpoints,
//! metrics logging and dataset translation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gantruth_tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::checkpoint::{file_sha256, Archive};
use crate::dataset::{Dataset, DatasetWriter, Domain, Manifest, Sample, TranslationRecord};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorBundle, EstimatorKind};
use crate::labels::{remap, LabelMap, LabelMapping};
use crate::losses::{
    gan_loss_discriminator, gan_loss_generator, gantruth_objective, gt_disparity_loss, gt_instance_loss,
    gt_semseg_loss, instance_targets, kl_to_standard_normal, reconstruction_nll, unit_gantruth_objective,
    unit_objective, weighted_cycle, weighted_vae, CycleTerms, DisparityTarget, GanTerms, GtTerms, LossWeights,
    Objective, UnitDomainTerms, VaeTerms,
};
use crate::nets::{translate, ArchConfig, Decoder, Encoder, TranslationMode, TranslationNets};
use crate::scene::SceneClass;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One-way translator trained on the adversarial loss alone.
    SimpleGan,
    /// One-way translator with ground-truth preservation.
    Gantruth,
    /// Two-way shared-latent translator.
    Unit,
    /// Two-way translator with ground-truth preservation.
    UnitGantruth,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SimpleGan => "simple_gan",
            ModelKind::Gantruth => "gantruth",
            ModelKind::Unit => "unit",
            ModelKind::UnitGantruth => "unit_gantruth",
        }
    }

    pub fn two_way(self) -> bool {
        matches!(self, ModelKind::Unit | ModelKind::UnitGantruth)
    }

    pub fn preserves_gt(self) -> bool {
        matches!(self, ModelKind::Gantruth | ModelKind::UnitGantruth)
    }

    /// One-way models translate with the latent mean; two-way models sample.
    pub fn training_mode(self) -> TranslationMode {
        if self.two_way() {
            TranslationMode::Stochastic
        } else {
            TranslationMode::Deterministic
        }
    }
}

/// Ground-truth preservation task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GtTask {
    /// Semantic segmentation.
    S,
    /// Disparity.
    D,
    /// Instance segmentation.
    I,
}

impl GtTask {
    pub fn estimator_kind(self) -> EstimatorKind {
        match self {
            GtTask::S => EstimatorKind::Semseg,
            GtTask::D => EstimatorKind::Disparity,
            GtTask::I => EstimatorKind::Instance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimizerConfig { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl From<&OptimizerConfig> for AdamConfig {
    fn from(o: &OptimizerConfig) -> Self {
        AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub model: ModelKind,
    /// Enabled preservation tasks; ignored by models without preservation.
    pub tasks: Vec<GtTask>,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Multiplier applied to predicted disparity before comparing with the
    /// source ground truth (compensates camera differences).
    pub disparity_scale: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            model: ModelKind::Gantruth,
            tasks: vec![GtTask::S, GtTask::D],
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 1,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            disparity_scale: 1.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("trainer.optimizer: need lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if !(self.disparity_scale > 0.0 && self.disparity_scale.is_finite()) {
            return Err(Error::Config("trainer.disparity_scale must be positive".into()));
        }
        if self.active_tasks().contains(&GtTask::I) && self.batch_size != 1 {
            return Err(Error::Config("the instance task needs batch_size = 1".into()));
        }
        Ok(())
    }

    /// Tasks that actually contribute, in S, D, I order.
    pub fn active_tasks(&self) -> Vec<GtTask> {
        if !self.model.preserves_gt() {
            return Vec::new();
        }
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        t
    }
}

/// Frozen estimators used by the preservation losses.
#[derive(Default)]
pub struct Estimators {
    pub semseg: Option<EstimatorBundle>,
    pub disparity: Option<EstimatorBundle>,
    pub instance: Option<EstimatorBundle>,
}

impl Estimators {
    pub fn get(&self, task: GtTask) -> Option<&EstimatorBundle> {
        match task {
            GtTask::S => self.semseg.as_ref(),
            GtTask::D => self.disparity.as_ref(),
            GtTask::I => self.instance.as_ref(),
        }
    }

    /// Every enabled task needs a frozen estimator of the right kind.
    pub fn check(&self, tasks: &[GtTask], mapping: &LabelMapping) -> Result<()> {
        for &t in tasks {
            let b = self
                .get(t)
                .ok_or_else(|| Error::MissingEstimator(format!("task {t:?} is enabled but no {} estimator was given", t.estimator_kind().name())))?;
            if b.kind() != t.estimator_kind() {
                return Err(Error::MissingEstimator(format!("task {t:?} got a {} estimator", b.kind().name())));
            }
            if !b.is_frozen() {
                return Err(Error::Input(format!("{} estimator is not frozen", b.kind().name())));
            }
            if t != GtTask::D && b.num_classes() != mapping.target_classes() {
                return Err(Error::Mapping(format!(
                    "{} estimator has {} classes, mapping `{}` targets {}",
                    b.kind().name(),
                    b.num_classes(),
                    mapping.name(),
                    mapping.target_classes()
                )));
            }
        }
        Ok(())
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        [&self.semseg, &self.disparity, &self.instance]
            .into_iter()
            .flatten()
            .map(|b| (b.kind().name().to_string(), b.checksum()))
            .collect()
    }
}

/// Unpaired training data: annotated source samples and target images.
pub struct TranslationData<'a> {
    pub source: &'a [Sample],
    pub target: &'a [Sample],
    pub mapping: &'a LabelMapping,
}

/// Values of every named term for one step.
pub type StepMetrics = BTreeMap<String, f64>;

/// Everything needed to continue a run exactly.
pub struct TrainingState {
    pub config: TrainerConfig,
    pub step: u64,
    pub nets: TranslationNets,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    rng: ChaCha8Rng,
}

fn gen_param_ids(nets: &TranslationNets) -> Vec<ParamId> {
    nets.gen.ids().collect()
}

fn disc_param_ids(nets: &TranslationNets) -> Vec<ParamId> {
    nets.disc.ids().collect()
}

fn non_finite_check(g: &Graph<f32>, terms: &[(String, Var)], step: u64) -> Result<()> {
    for (name, v) in terms {
        let value = g.value(*v).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term: name.clone(), value: value as f64, step });
        }
    }
    Ok(())
}

fn record(g: &Graph<f32>, terms: &[(String, Var)], metrics: &mut StepMetrics) {
    for (name, v) in terms {
        metrics.insert(name.clone(), g.value(*v).item() as f64);
    }
}

impl TrainingState {
    pub fn new(config: &TrainerConfig, arch: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let nets = TranslationNets::new(arch, config.model.two_way(), config.seed)?;
        let adam = AdamConfig::from(&config.optimizer);
        let gen_opt = Adam::new(adam, &nets.gen, gen_param_ids(&nets))?;
        let disc_opt = Adam::new(adam, &nets.disc, disc_param_ids(&nets))?;
        // Separate stream from the initialization stream.
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(TrainingState { config: config.clone(), step: 0, nets, gen_opt, disc_opt, rng })
    }

    /// Draw the next batch indices (source, target) from the state's RNG.
    fn draw_batch(&mut self, n_source: usize, n_target: usize) -> (Vec<usize>, Vec<usize>) {
        let b = self.config.batch_size;
        let s = (0..b).map(|_| self.rng.random_range(0..n_source)).collect();
        let t = (0..b).map(|_| self.rng.random_range(0..n_target)).collect();
        (s, t)
    }

    /// One discriminator update followed by one generator update on a batch
    /// drawn from `data`.
    pub fn train_step(&mut self, data: &TranslationData, estimators: &Estimators) -> Result<StepMetrics> {
        if data.source.is_empty() || data.target.is_empty() {
            return Err(Error::Input("training needs source and target samples".into()));
        }
        let (si, ti) = self.draw_batch(data.source.len(), data.target.len());
        let source: Vec<&Sample> = si.iter().map(|&i| &data.source[i]).collect();
        let target: Vec<&Sample> = ti.iter().map(|&i| &data.target[i]).collect();
        self.step_on(&source, &target, data.mapping, estimators)
    }

    /// Step on explicit batches.
    pub fn step_on(
        &mut self,
        source: &[&Sample],
        target: &[&Sample],
        mapping: &LabelMapping,
        estimators: &Estimators,
    ) -> Result<StepMetrics> {
        let tasks = self.config.active_tasks();
        estimators.check(&tasks, mapping)?;
        let xs = ImageBatch::from_images(source.iter().map(|s| &s.image))?.into_tensor();
        let xt = ImageBatch::from_images(target.iter().map(|s| &s.image))?.into_tensor();
        let step = self.step + 1;
        let mut metrics = StepMetrics::new();

        // Discriminator phase: generators enter as constants.
        {
            let mut g = Graph::new();
            g.detach_store(&self.nets.gen);
            let obj = self.discriminator_objective(&mut g, &xs, &xt)?;
            non_finite_check(&g, &obj.terms, step)?;
            let d = obj.discriminator.expect("discriminator side present");
            record(&g, &obj.terms, &mut metrics);
            metrics.insert("d_total".into(), g.value(d).item() as f64);
            let grads = g.backward(d).for_store(&self.nets.disc);
            self.disc_opt.step(&mut self.nets.disc, &grads)?;
        }

        // Generator phase: discriminators enter as constants.
        {
            let mut g = Graph::new();
            g.detach_store(&self.nets.disc);
            let obj = self.generator_objective(&mut g, &xs, &xt, source, mapping, estimators, &tasks)?;
            non_finite_check(&g, &obj.terms, step)?;
            let total = obj.generator.expect("generator side present");
            record(&g, &obj.terms, &mut metrics);
            let tv = g.value(total).item();
            if !tv.is_finite() {
                return Err(Error::NonFiniteLoss { term: "g_total".into(), value: tv as f64, step });
            }
            metrics.insert("g_total".into(), tv as f64);
            let grads = g.backward(total).for_store(&self.nets.gen);
            self.gen_opt.step(&mut self.nets.gen, &grads)?;
        }

        self.step = step;
        Ok(metrics)
    }

    fn discriminator_objective(&mut self, g: &mut Graph<f32>, xs: &Tensor<f32>, xt: &Tensor<f32>) -> Result<Objective> {
        let nets = &self.nets;
        let mode = self.config.model.training_mode();
        let w = &self.config.weights;
        let xs = g.constant(xs.clone());
        let xt = g.constant(xt.clone());
        let fake_t = translate(g, &nets.gen, &nets.enc_s, &nets.dec_t, xs, mode, &mut self.rng)?;
        let real = nets.disc_t.discriminate(g, &nets.disc, xt)?;
        let fake = nets.disc_t.discriminate(g, &nets.disc, fake_t)?;
        let d_t = gan_loss_discriminator(g, &real, &fake)?;
        let gan_t = GanTerms { discriminator: Some(d_t), generator: None };
        if !self.config.model.two_way() {
            return Ok(gantruth_objective(g, w, &gan_t, &GtTerms::default()));
        }
        let (enc_t, dec_s, disc_s) = two_way_parts(nets)?;
        let fake_s = translate(g, &nets.gen, enc_t, dec_s, xt, mode, &mut self.rng)?;
        let real = disc_s.discriminate(g, &nets.disc, xs)?;
        let fake = disc_s.discriminate(g, &nets.disc, fake_s)?;
        let d_s = gan_loss_discriminator(g, &real, &fake)?;
        let source = UnitDomainTerms { gan: GanTerms { discriminator: Some(d_s), generator: None }, ..Default::default() };
        let target = UnitDomainTerms { gan: gan_t, ..Default::default() };
        Ok(unit_objective(g, w, &source, &target))
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_objective(
        &mut self,
        g: &mut Graph<f32>,
        xs: &Tensor<f32>,
        xt: &Tensor<f32>,
        source: &[&Sample],
        mapping: &LabelMapping,
        estimators: &Estimators,
        tasks: &[GtTask],
    ) -> Result<Objective> {
        let model = self.config.model;
        let mode = model.training_mode();
        let w = self.config.weights.clone();
        let xs = g.constant(xs.clone());
        let xt = g.constant(xt.clone());
        let nets = &self.nets;
        if !model.two_way() {
            let fake_t = translate(g, &nets.gen, &nets.enc_s, &nets.dec_t, xs, mode, &mut self.rng)?;
            let d = nets.disc_t.discriminate(g, &nets.disc, fake_t)?;
            let gan = GanTerms { discriminator: None, generator: Some(gan_loss_generator(g, &d)?) };
            let gt = gt_terms(g, fake_t, source, mapping, estimators, tasks, self.config.disparity_scale)?;
            return Ok(gantruth_objective(g, &w, &gan, &gt));
        }
        let (enc_t, dec_s, disc_s) = two_way_parts(nets)?;
        let rng = &mut self.rng;
        let from_s = unit_pass(g, &nets.gen, (&nets.enc_s, dec_s), (enc_t, &nets.dec_t), xs, &w, mode, rng, |g, fake| {
            nets.disc_t.discriminate(g, &nets.disc, fake)
        })?;
        let from_t = unit_pass(g, &nets.gen, (enc_t, &nets.dec_t), (&nets.enc_s, dec_s), xt, &w, mode, rng, |g, fake| {
            disc_s.discriminate(g, &nets.disc, fake)
        })?;
        // Each domain's game is the one its discriminator judges: translations
        // into that domain.
        let source_terms = UnitDomainTerms {
            gan: GanTerms { discriminator: None, generator: Some(from_t.gan_generator) },
            vae: Some(from_s.vae),
            cycle: Some(from_s.cycle),
        };
        let target_terms = UnitDomainTerms {
            gan: GanTerms { discriminator: None, generator: Some(from_s.gan_generator) },
            vae: Some(from_t.vae),
            cycle: Some(from_t.cycle),
        };
        if model.preserves_gt() {
            let gt = gt_terms(g, from_s.translated, source, mapping, estimators, tasks, self.config.disparity_scale)?;
            Ok(unit_gantruth_objective(g, &w, &source_terms, &target_terms, &gt))
        } else {
            Ok(unit_objective(g, &w, &source_terms, &target_terms))
        }
    }

    /// Write a checkpoint; returns its SHA-256.
    pub fn save(&self, path: &Path, estimator_checksums: &BTreeMap<String, String>) -> Result<String> {
        let mut a = Archive::new(serde_json::json!({
            "format": "translation",
            "version": VERSION,
            "arch": self.nets.arch,
            "config": self.config,
            "step": self.step,
            "rng": self.rng,
            "gen_adam_step": self.gen_opt.step_count(),
            "disc_adam_step": self.disc_opt.step_count(),
            "estimator_checksums": estimator_checksums,
        }));
        a.add_store("gen/", &self.nets.gen);
        a.add_store("disc/", &self.nets.disc);
        add_moments(&mut a, "gen", &self.nets.gen, &self.gen_opt);
        add_moments(&mut a, "disc", &self.nets.disc, &self.disc_opt);
        a.save(path)
    }

    /// Restore a checkpoint. With `expected_arch`, a different architecture
    /// is rejected.
    pub fn load(path: &Path, expected_arch: Option<&ArchConfig>) -> Result<Self> {
        let a = Archive::load(path)?;
        let format: String = a.field("format")?;
        if format != "translation" {
            return Err(Error::Checkpoint(format!("{} is a {format} archive, not a translation checkpoint", path.display())));
        }
        let arch: ArchConfig = a.field("arch")?;
        if let Some(e) = expected_arch {
            if *e != arch {
                return Err(Error::Checkpoint(format!("{}: architecture differs from the configured one", path.display())));
            }
        }
        let config: TrainerConfig = a.field("config")?;
        let mut state = TrainingState::new(&config, &arch)?;
        a.load_store("gen/", &mut state.nets.gen)?;
        a.load_store("disc/", &mut state.nets.disc)?;
        state.step = a.field("step")?;
        state.rng = a.field("rng")?;
        restore_moments(&a, "gen", &state.nets.gen, &mut state.gen_opt, a.field("gen_adam_step")?)?;
        restore_moments(&a, "disc", &state.nets.disc, &mut state.disc_opt, a.field("disc_adam_step")?)?;
        Ok(state)
    }
}

fn two_way_parts(nets: &TranslationNets) -> Result<(&Encoder, &Decoder, &crate::nets::MultiScaleDiscriminator)> {
    match (&nets.enc_t, &nets.dec_s, &nets.disc_s) {
        (Some(e), Some(d), Some(ds)) => Ok((e, d, ds)),
        _ => Err(Error::Invariant("two-way model without target encoder, source decoder or source discriminator".into())),
    }
}

/// What one domain's images contribute to the two-way generator loss.
struct UnitPass {
    vae: VaeTerms,
    cycle: CycleTerms,
    /// Non-saturating loss of the translation into the other domain.
    gan_generator: Var,
    translated: Var,
}

/// Encode `x` with its own domain's encoder, then: reconstruct (VAE),
/// translate into the other domain (GAN), and translate back (cycle).
#[allow(clippy::too_many_arguments)]
fn unit_pass<R: Rng>(
    g: &mut Graph<f32>,
    store: &ParamStore<f32>,
    (enc, dec): (&Encoder, &Decoder),
    (enc_other, dec_other): (&Encoder, &Decoder),
    x: Var,
    w: &LossWeights,
    mode: TranslationMode,
    rng: &mut R,
    disc_other: impl Fn(&mut Graph<f32>, Var) -> Result<Vec<Var>>,
) -> Result<UnitPass> {
    let code = enc.encode(g, store, x)?;
    let kl = kl_to_standard_normal(g, code.mean)?;
    let z = code.realize(g, mode, rng);
    let recon = dec.decode(g, store, z);
    let nll = reconstruction_nll(g, recon, x)?;
    let vae = weighted_vae(g, kl, nll, w);
    let translated = dec_other.decode(g, store, z);
    let d = disc_other(g, translated)?;
    let gan_generator = gan_loss_generator(g, &d)?;
    let code2 = enc_other.encode(g, store, translated)?;
    let kl2 = kl_to_standard_normal(g, code2.mean)?;
    let z2 = code2.realize(g, mode, rng);
    let back = dec.decode(g, store, z2);
    let cc_nll = reconstruction_nll(g, back, x)?;
    let cycle = weighted_cycle(g, kl, kl2, cc_nll, w);
    Ok(UnitPass { vae, cycle, gan_generator, translated })
}

/// Preservation terms for translated images `fake` of source samples.
fn gt_terms(
    g: &mut Graph<f32>,
    fake: Var,
    source: &[&Sample],
    mapping: &LabelMapping,
    estimators: &Estimators,
    tasks: &[GtTask],
    disparity_scale: f64,
) -> Result<GtTerms> {
    let mut gt = GtTerms::default();
    let gts = source
        .iter()
        .map(|s| s.gt.as_ref().ok_or_else(|| Error::Input(format!("source sample {} has no ground truth", s.id))))
        .collect::<Result<Vec<_>>>()?;
    for &task in tasks {
        let est = estimators.get(task).expect("checked before the step");
        match task {
            GtTask::S => {
                let logits = est.semseg_logits(g, fake)?;
                let labels = gts.iter().map(|t| remap(&t.semantic, mapping)).collect::<Result<Vec<LabelMap>>>()?;
                gt.semseg = Some(gt_semseg_loss(g, logits, &labels, mapping.ignore_index())?.loss);
            }
            GtTask::D => {
                let pred = est.disparity(g, fake)?;
                let targets = gts
                    .iter()
                    .map(|t| DisparityTarget::from_gt(&t.disparity, &t.semantic, SceneClass::Sky.id()))
                    .collect::<Result<Vec<_>>>()?;
                gt.disparity = Some(gt_disparity_loss(g, pred, &targets, disparity_scale)?);
            }
            GtTask::I => {
                let t = gts[0];
                let (h, w) = (t.semantic.height, t.semantic.width);
                let (targets, keep) = instance_targets(&t.instances, mapping, h, w)?;
                let boxes: Vec<[u32; 4]> = targets.iter().map(|t| t.bbox).collect();
                let outs = if boxes.is_empty() { Vec::new() } else { est.instance_outputs(g, fake, &boxes)? };
                gt.instance = Some(gt_instance_loss(g, &outs, &targets, &keep)?);
            }
        }
    }
    Ok(gt)
}

fn add_moments(a: &mut Archive, prefix: &str, store: &ParamStore<f32>, opt: &Adam<f32>) {
    let (m, v) = opt.moments();
    for ((id, m), v) in opt.params().iter().zip(m).zip(v) {
        a.tensors.insert(format!("{prefix}_adam_m/{}", store.name(*id)), m.clone());
        a.tensors.insert(format!("{prefix}_adam_v/{}", store.name(*id)), v.clone());
    }
}

fn restore_moments(a: &Archive, prefix: &str, store: &ParamStore<f32>, opt: &mut Adam<f32>, step: u64) -> Result<()> {
    let mut m = Vec::new();
    let mut v = Vec::new();
    for id in opt.params() {
        m.push(a.tensor(&format!("{prefix}_adam_m/{}", store.name(*id)))?.clone());
        v.push(a.tensor(&format!("{prefix}_adam_v/{}", store.name(*id)))?.clone());
    }
    opt.restore(step, m, v)?;
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub terms: StepMetrics,
    pub wall_time_s: f64,
}

/// Read a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Result of [`train`].
pub struct TrainOutcome {
    pub state: TrainingState,
    pub final_checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub metrics_path: PathBuf,
}

/// Run (or continue) training until `state.config.steps`, writing periodic
/// checkpoints, the final checkpoint and the metrics log into `out_dir`.
pub fn run_training(
    mut state: TrainingState,
    data: &TranslationData,
    estimators: &Estimators,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let tasks = state.config.active_tasks();
    estimators.check(&tasks, data.mapping)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checksums = estimators.checksums();
    let metrics_path = out_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, state.step)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let started = Instant::now();
    while state.step < state.config.steps {
        let terms = state.train_step(data, estimators)?;
        let rec = MetricsRecord { step: state.step, terms, wall_time_s: started.elapsed().as_secs_f64() };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(&metrics_path, e))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if state.step % 100 == 0 {
            let get = |k: &str| rec.terms.get(k).copied().unwrap_or(f64::NAN);
            log::info!("step {} d_total {:.4} g_total {:.4}", state.step, get("d_total"), get("g_total"));
        }
        let every = state.config.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < state.config.steps {
            verify_invariants(&state, estimators, &checksums)?;
            state.save(&checkpoint_path(out_dir, state.step), &checksums)?;
        }
    }
    verify_invariants(&state, estimators, &checksums)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    let checkpoint_sha256 = state.save(&final_checkpoint, &checksums)?;
    Ok(TrainOutcome { state, final_checkpoint, checkpoint_sha256, metrics_path })
}

/// Start a fresh run.
pub fn train(
    config: &TrainerConfig,
    arch: &ArchConfig,
    data: &TranslationData,
    estimators: &Estimators,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let state = TrainingState::new(config, arch)?;
    run_training(state, data, estimators, out_dir)
}

/// Continue from a checkpoint up to `steps` total steps.
pub fn resume(
    checkpoint: &Path,
    steps: Option<u64>,
    data: &TranslationData,
    estimators: &Estimators,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut state = TrainingState::load(checkpoint, None)?;
    if let Some(s) = steps {
        state.config.steps = s;
    }
    run_training(state, data, estimators, out_dir)
}

/// Drop log lines past `step`, so a resumed run continues a clean log.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = read_metrics(path)?
        .into_iter()
        .filter(|r| r.step <= step)
        .map(|r| serde_json::to_string(&r).expect("record serializes"))
        .collect();
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tied parameters must still be shared and the estimators unchanged.
pub fn verify_invariants(state: &TrainingState, estimators: &Estimators, checksums: &BTreeMap<String, String>) -> Result<()> {
    let nets = &state.nets;
    if let (Some(e), Some(d)) = (&nets.enc_t, &nets.dec_s) {
        if e.shared_blocks() != nets.enc_s.shared_blocks() || d.shared_blocks() != nets.dec_t.shared_blocks() {
            return Err(Error::Invariant("shared encoder/decoder blocks diverged".into()));
        }
    }
    if estimators.checksums() != *checksums {
        return Err(Error::Invariant("a frozen estimator changed during training".into()));
    }
    Ok(())
}

/// Translate every source image of `source` with the checkpoint's
/// source-to-target direction (deterministic), copying ground truth verbatim.
pub fn translate_dataset(checkpoint: &Path, source: &Dataset, out: &Path) -> Result<Dataset> {
    let state = TrainingState::load(checkpoint, None)?;
    let nets = &state.nets;
    let [h, w] = source.manifest().image_size;
    let side = nets.arch.min_image_side();
    if h % side != 0 || w % side != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("images of {h}x{w} do not fit a model that needs multiples of {side}")));
    }
    if !source.has_domain(Domain::Source) {
        return Err(Error::Dataset { path: source.root().into(), reason: "no source-domain images".into() });
    }
    let writer = DatasetWriter::create(out, &[Domain::Target], true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for id in source.ids() {
        let img = source.read_image(Domain::Source, id)?;
        let x = ImageBatch::from_images([&img])?;
        let y = nets.translate_to_target(&x, TranslationMode::Deterministic, &mut rng)?;
        writer.write_image(Domain::Target, id, &y.to_image(0))?;
        writer.copy_gt_from(source, id)?;
    }
    let m = source.manifest();
    let manifest = Manifest {
        domains: vec![Domain::Target],
        translation: Some(TranslationRecord {
            checkpoint_sha256: file_sha256(checkpoint)?,
            source_dataset_sha256: source.content_hash()?,
            model: state.config.model.name().into(),
        }),
        ..m.clone()
    };
    writer.finish(&manifest)
}

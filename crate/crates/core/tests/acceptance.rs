//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! and prints one PASS/FAIL line per criterion; the full run takes about an
//! hour on one core.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gantruth_core::batch::ImageBatch;
use gantruth_core::checkpoint::{file_sha256, Archive};
use gantruth_core::dataset::{write_dataset, Dataset, Domain, Domains, Sample};
use gantruth_core::estimators::{pretrain_estimator, EstimatorBundle, EstimatorConfig, EstimatorKind};
use gantruth_core::eval::{
    adaptation_run, miou, scale_aligned_abs_rel, Alignment, ConfusionMatrix, TaskNetConfig, TrainSet,
};
use gantruth_core::grid::{render_grid, GridColumn};
use gantruth_core::labels::{remap, LabelMap, LabelMapping, TargetId};
use gantruth_core::losses::*;
use gantruth_core::nets::{Activation, ArchConfig, Decoder, Encoder, TranslationMode};
use gantruth_core::scene::{generate_scene, render_source, render_target, SceneConfig, TargetStyle};
use gantruth_core::train::*;
use gantruth_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type R<T> = Result<T, Box<dyn std::error::Error>>;

/// Pass flag plus a one-line summary of what was measured.
type Verdict = (bool, String);

fn fail<T>(msg: impl Into<String>) -> R<T> {
    Err(msg.into().into())
}

// ---------------------------------------------------------------- data

fn make_dataset(root: &Path, seeds: std::ops::Range<u64>, domains: Domains) -> R<Dataset> {
    let cfg = SceneConfig::default();
    let specs = seeds.map(|s| generate_scene(s, &cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(write_dataset(root, &specs, domains, &cfg, &TargetStyle::default())?)
}

fn in_memory(seeds: std::ops::Range<u64>, domain: Domain) -> R<Vec<Sample>> {
    let cfg = SceneConfig::default();
    let style = TargetStyle::default();
    seeds
        .map(|s| {
            let spec = generate_scene(s, &cfg)?;
            let (src, gt) = render_source(&spec);
            let image = if domain == Domain::Source { src } else { render_target(&spec, &style) };
            Ok(Sample { id: format!("{s}"), image, gt: Some(gt) })
        })
        .collect()
}

fn untrained(kind: EstimatorKind) -> R<EstimatorBundle> {
    let mut b = EstimatorBundle::new(kind, 4, LabelMapping::toy().target_names(), 1)?;
    b.freeze();
    Ok(b)
}

fn store_snapshot(store: &ParamStore<f32>) -> BTreeMap<String, Vec<f32>> {
    store.iter().map(|(_, name, t)| (name.to_string(), t.data().to_vec())).collect()
}

/// Everything the long-running criteria share: the three datasets and the
/// two pretrained estimators.
struct Experiment {
    root: PathBuf,
    source: Dataset,
    target: Dataset,
    val: Dataset,
    estimators: Estimators,
    estimator_files: Vec<PathBuf>,
    source_samples: Vec<Sample>,
    target_samples: Vec<Sample>,
    runs: BTreeMap<u64, PathBuf>,
}

impl Experiment {
    fn prepare(root: &Path) -> R<Self> {
        let t = Instant::now();
        let source = make_dataset(&root.join("source"), 0..2000, Domains::Both)?;
        let target = make_dataset(&root.join("target"), 100_000..102_000, Domains::Target)?;
        let val = make_dataset(&root.join("val"), 200_000..200_200, Domains::Target)?;
        eprintln!("  datasets written in {:.0} s", t.elapsed().as_secs_f64());
        let mapping = LabelMapping::toy();
        let mut files = Vec::new();
        let mut est = Estimators::default();
        for kind in [EstimatorKind::Semseg, EstimatorKind::Disparity] {
            let t = Instant::now();
            let b = pretrain_estimator(kind, &target, Domain::Target, &mapping, &EstimatorConfig::default())?;
            let p = b.provenance().expect("pretrained bundle has provenance");
            eprintln!("  {} estimator: {} {:.4} in {:.0} s", kind.name(), p.metric, p.value, t.elapsed().as_secs_f64());
            let path = root.join(format!("{}.est", kind.name()));
            b.save(&path)?;
            files.push(path.clone());
            let loaded = EstimatorBundle::load(&path)?;
            match kind {
                EstimatorKind::Semseg => est.semseg = Some(loaded),
                _ => est.disparity = Some(loaded),
            }
        }
        let source_samples = source.load_all(Domain::Source, true)?;
        let target_samples = target.load_all(Domain::Target, false)?;
        Ok(Experiment {
            root: root.to_path_buf(),
            source,
            target,
            val,
            estimators: est,
            estimator_files: files,
            source_samples,
            target_samples,
            runs: BTreeMap::new(),
        })
    }

    fn data<'a>(&'a self, mapping: &'a LabelMapping) -> TranslationData<'a> {
        TranslationData { source: &self.source_samples, target: &self.target_samples, mapping }
    }

    /// Train (once per seed) the S+D preservation model for 2000 steps.
    fn gantruth_run(&mut self, seed: u64) -> R<PathBuf> {
        if let Some(p) = self.runs.get(&seed) {
            return Ok(p.clone());
        }
        let mapping = LabelMapping::toy();
        let cfg = TrainerConfig { model: ModelKind::Gantruth, tasks: vec![GtTask::S, GtTask::D], steps: 2000, seed, checkpoint_every: 0, ..Default::default() };
        let t = Instant::now();
        let out = train(&cfg, &ArchConfig::default(), &self.data(&mapping), &self.estimators, &self.root.join(format!("run_{seed}")))?;
        eprintln!("  translation model seed {seed}: 2000 steps in {:.0} s", t.elapsed().as_secs_f64());
        self.runs.insert(seed, out.final_checkpoint.clone());
        Ok(out.final_checkpoint)
    }
}

// ---------------------------------------------------------------- criterion 1

fn closed_forms() -> R<Verdict> {
    let t = Instant::now();
    let mut g = Graph::<f64>::new();
    let half: Vec<Var> = [4, 2, 1].iter().map(|&s| g.constant(Tensor::full(&[2, 1, s, s], 0.5))).collect();
    let d = gan_loss_discriminator(&mut g, &half, &half)?;
    let d = g.value(d).item();
    let ones: Vec<Var> = [4, 2, 1].iter().map(|&s| g.constant(Tensor::full(&[2, 1, s, s], 1.0))).collect();
    let gl = gan_loss_generator(&mut g, &ones)?;
    let gl = g.value(gl).item();
    let zero = g.constant(Tensor::zeros(&[2, 8, 4, 4]));
    let kl0 = kl_to_standard_normal(&mut g, zero)?;
    let kl0 = g.value(kl0).item();

    let mu = [0.3, -0.7, 1.1, 0.5];
    let m = g.constant(Tensor::new(vec![1, 4, 1, 1], mu.to_vec())?);
    let kl = kl_to_standard_normal(&mut g, m)?;
    let kl = g.value(kl).item();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        for &mi in &mu {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mi + e;
            // log q(z) - log p(z) for unit-variance Gaussians.
            acc += 0.5 * z * z - 0.5 * e * e;
        }
    }
    let mc = acc / n as f64;

    let logits = g.constant(Tensor::zeros(&[2, 5, 4, 4]));
    let labels: Vec<LabelMap> = (0..2).map(|b| LabelMap::new(4, 4, (0..16).map(|i| ((i + b) % 5) as u32).collect()).unwrap()).collect();
    let ce = gt_semseg_loss(&mut g, logits, &labels, 255)?.loss;
    let ce = g.value(ce).item();
    let secs = t.elapsed().as_secs_f64();

    let ok = (d - 2f64.ln()).abs() <= 1e-6
        && gl.abs() <= 1e-6
        && kl0 == 0.0
        && (mc - kl).abs() <= 1e-2
        && (ce - 5f64.ln()).abs() <= 1e-9
        && secs < 1.0;
    Ok((
        ok,
        format!(
            "gan_d(1/2)={d:.9} gan_g(1)={gl:.1e} kl(0)={kl0} kl={kl:.5} mc={mc:.5} ce_uniform={ce:.9} (ln5={:.9}) in {secs:.2} s",
            5f64.ln()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

const FD_STEP: f64 = 1e-5;
const FD_INSTANCES: usize = 20;

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Gradient of `f` with respect to each input tensor: analytic versus
/// central differences.
fn check_inputs(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Gradient of `f` with respect to every parameter of `store`.
fn check_params(store: &mut ParamStore<f64>, f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).for_store(store);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = f(&mut g, s);
        g.value(l).item()
    };
    for id in ids {
        let n = store.get(id).len();
        match grads.get(&id) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let x = store.get(id).data()[j];
            store.get_mut(id).unwrap().data_mut()[j] = x + FD_STEP;
            let up = eval(store);
            store.get_mut(id).unwrap().data_mut()[j] = x - FD_STEP;
            let down = eval(store);
            store.get_mut(id).unwrap().data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        base_channels: 2,
        downsamplings: 1,
        res_blocks: 1,
        shared_res_blocks: 1,
        activation: Activation::Tanh,
        init_std: 0.5,
        ..Default::default()
    }
}

fn gradient_checks() -> R<Verdict> {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
    };
    let scales: [&[usize]; 3] = [&[2, 1, 4, 4], &[2, 1, 2, 2], &[2, 1, 1, 1]];

    for inst in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst as u64);

        let probs: Vec<Tensor<f64>> = (0..6).map(|i| uniform(&mut rng, scales[i % 3], 0.05, 0.95)).collect();
        record("gan_discriminator", check_inputs(&probs, &|g, v| gan_loss_discriminator(g, &v[..3], &v[3..]).unwrap()));
        record("gan_generator", check_inputs(&probs[..3], &|g, v| gan_loss_generator(g, v).unwrap()));

        let mean = uniform(&mut rng, &[2, 4, 2, 2], -2.0, 2.0);
        record("kl", check_inputs(&[mean], &|g, v| kl_to_standard_normal(g, v[0]).unwrap()));

        let rx = [uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0), uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)];
        record("reconstruction", check_inputs(&rx, &|g, v| reconstruction_nll(g, v[0], v[1]).unwrap()));

        let logits = uniform(&mut rng, &[2, 5, 4, 4], -3.0, 3.0);
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| LabelMap::new(4, 4, (0..16).map(|_| if rng.random_bool(0.15) { 255 } else { rng.random_range(0..5) }).collect()).unwrap())
            .collect();
        record("semseg", check_inputs(&[logits], &|g, v| gt_semseg_loss(g, v[0], &labels, 255).unwrap().loss));

        let pred = uniform(&mut rng, &[2, 1, 4, 4], 0.1, 3.0);
        let c = rng.random_range(0.5..5.0);
        let targets: Vec<DisparityTarget> = (0..2)
            .map(|_| DisparityTarget {
                height: 4,
                width: 4,
                values: (0..16).map(|_| rng.random_range(0.5f32..10.0)).collect(),
                valid: (0..16).map(|_| rng.random_bool(0.8)).collect(),
            })
            .collect();
        record("disparity", check_inputs(&[pred], &|g, v| gt_disparity_loss(g, v[0], &targets, c).unwrap()));

        let (h, w) = (6, 6);
        let mut inst_inputs = Vec::new();
        let mut inst_targets = Vec::new();
        for _ in 0..2 {
            let x0 = rng.random_range(0..4u32);
            let y0 = rng.random_range(0..4u32);
            let bbox = [x0, y0, rng.random_range(x0 + 1..=6), rng.random_range(y0 + 1..=6)];
            inst_targets.push(InstanceTarget {
                class: rng.random_range(0..5),
                bbox,
                height: h,
                width: w,
                mask: (0..h * w).map(|_| rng.random_bool(0.5)).collect(),
            });
            inst_inputs.push(uniform(&mut rng, &[1, 5, 1, 1], -2.0, 2.0));
            inst_inputs.push(uniform(&mut rng, &[1, 4, 1, 1], -0.3, 1.3));
            inst_inputs.push(uniform(&mut rng, &[1, 1, h, w], -3.0, 3.0));
        }
        let keep = [true, rng.random_bool(0.5)];
        record(
            "instance",
            check_inputs(&inst_inputs, &|g, v| {
                let outs: Vec<InstanceHeadOutput> =
                    v.chunks(3).map(|c| InstanceHeadOutput { class_logits: c[0], bbox: c[1], mask_logits: c[2] }).collect();
                gt_instance_loss(g, &outs, &inst_targets, &keep).unwrap()
            }),
        );

        let src_logits = uniform(&mut rng, &[2, 5, 4, 4], -3.0, 3.0);
        let tr_logits = uniform(&mut rng, &[2, 5, 4, 4], -3.0, 3.0);
        record("semantic_consistency", check_inputs(&[tr_logits], &|g, v| semantic_consistency_loss(g, &src_logits, v[0]).unwrap()));

        // VAE and cycle terms through small smooth networks.
        let arch = tiny_arch();
        let weights = LossWeights::default();
        let x = uniform(&mut rng, &[1, 3, 8, 8], -1.0, 1.0);
        let noise_seed: u64 = rng.random();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::build(&mut store, "E", &arch, None, &mut rng)?;
        let dec = Decoder::build(&mut store, "G", &arch, None, &mut rng)?;
        record(
            "vae",
            check_params(&mut store, &|g, s| {
                let xv = g.constant(x.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                vae_loss(g, s, &enc, &dec, xv, &weights, TranslationMode::Stochastic, &mut noise).unwrap().total
            }),
        );

        let mut store = ParamStore::<f64>::new();
        let enc_a = Encoder::build(&mut store, "E_S", &arch, None, &mut rng)?;
        let enc_b = Encoder::build(&mut store, "E_T", &arch, Some(enc_a.shared_blocks()), &mut rng)?;
        let dec_b = Decoder::build(&mut store, "G_T", &arch, None, &mut rng)?;
        let dec_a = Decoder::build(&mut store, "G_S", &arch, Some(dec_b.shared_blocks()), &mut rng)?;
        record(
            "cycle",
            check_params(&mut store, &|g, s| {
                let xv = g.constant(x.clone());
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                cycle_consistency_loss(g, s, &enc_a, &dec_a, &enc_b, &dec_b, xv, &weights, TranslationMode::Stochastic, &mut noise)
                    .unwrap()
                    .total
            }),
        );
    }
    let ok = worst.values().all(|&e| e < 1e-4);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((ok, format!("worst relative error over {FD_INSTANCES} instances each: {detail}")))
}

// ---------------------------------------------------------------- criterion 3

fn structure() -> R<Verdict> {
    let mapping = LabelMapping::toy();
    let source = in_memory(0..16, Domain::Source)?;
    let target = in_memory(500..516, Domain::Target)?;
    let data = TranslationData { source: &source, target: &target, mapping: &mapping };
    let arch = ArchConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;

    // A simple GAN owns exactly E_S, G_T and D_T, and a few steps move all three.
    let cfg = TrainerConfig { model: ModelKind::SimpleGan, steps: 3, seed: 3, ..Default::default() };
    let mut state = TrainingState::new(&cfg, &arch)?;
    let nets = &state.nets;
    let absent = nets.enc_t.is_none() && nets.dec_s.is_none() && nets.disc_s.is_none();
    let gen_ids: HashSet<ParamId> = nets.enc_s.params().into_iter().chain(nets.dec_t.params()).collect();
    let own_gen = nets.gen.ids().collect::<HashSet<_>>() == gen_ids;
    let own_disc = nets.disc.ids().collect::<HashSet<_>>() == nets.disc_t.params().into_iter().collect::<HashSet<_>>();
    let names_ok = nets.gen.iter().all(|(_, n, _)| n.starts_with("E_S.") || n.starts_with("G_T."))
        && nets.disc.iter().all(|(_, n, _)| n.starts_with("D_T."));
    let before = (store_snapshot(&nets.gen), store_snapshot(&nets.disc));
    let mut terms = Vec::new();
    for _ in 0..3 {
        terms = state.train_step(&data, &Estimators::default())?.into_keys().collect();
    }
    let after = (store_snapshot(&state.nets.gen), store_snapshot(&state.nets.disc));
    let moved = |prefix: &str, a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>| {
        a.iter().any(|(k, v)| k.starts_with(prefix) && b[k] != *v)
    };
    let all_moved = moved("E_S.", &before.0, &after.0) && moved("G_T.", &before.0, &after.0) && moved("D_T.", &before.1, &after.1);
    let term_set_ok = terms == ["d_total", "g_total", "gan_d_t", "gan_g_t"];
    let simple_ok = absent && own_gen && own_disc && names_ok && all_moved && term_set_ok;
    ok &= simple_ok;
    notes.push(format!("simple_gan updates only E_S/G_T/D_T: {simple_ok}"));

    // UNIT for 500 steps; its first 50 steps must match UNIT+GT with zero
    // GT weights bit for bit.
    let est = Estimators { semseg: Some(untrained(EstimatorKind::Semseg)?), disparity: Some(untrained(EstimatorKind::Disparity)?), instance: None };
    let unit_cfg = TrainerConfig { model: ModelKind::Unit, steps: 500, seed: 11, ..Default::default() };
    let zero = LossWeights { semseg: 0.0, disparity: 0.0, ..Default::default() };
    let ugt_cfg = TrainerConfig { model: ModelKind::UnitGantruth, tasks: vec![GtTask::S, GtTask::D], weights: zero, steps: 50, ..unit_cfg.clone() };
    let t = Instant::now();
    let mut unit = TrainingState::new(&unit_cfg, &arch)?;
    let mut unit_trace = Vec::new();
    let mut unit_at_50 = None;
    for step in 1..=500 {
        unit_trace.push(unit.train_step(&data, &Estimators::default())?);
        if step == 50 {
            unit_at_50 = Some((store_snapshot(&unit.nets.gen), store_snapshot(&unit.nets.disc)));
        }
    }
    eprintln!("  500 UNIT steps in {:.0} s", t.elapsed().as_secs_f64());
    let mut ugt = TrainingState::new(&ugt_cfg, &arch)?;
    let mut identical = true;
    let mut gt_logged = true;
    for reference in unit_trace.iter().take(50) {
        let m = ugt.train_step(&data, &est)?;
        gt_logged &= m.contains_key("gt_semseg") && m.contains_key("gt_disparity");
        for (k, v) in reference {
            identical &= m.get(k).map(|x| x.to_bits()) == Some(v.to_bits());
        }
    }
    identical &= unit_at_50 == Some((store_snapshot(&ugt.nets.gen), store_snapshot(&ugt.nets.disc)));
    ok &= identical && gt_logged;
    notes.push(format!("zero-weight UNIT+GT trace and weights identical to UNIT over 50 steps: {}", identical && gt_logged));

    // Tied blocks after 500 steps, in memory and after a checkpoint round trip.
    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("unit.ckpt");
    unit.save(&ckpt, &BTreeMap::new())?;
    let back = TrainingState::load(&ckpt, Some(&arch))?;
    let mut tied = verify_invariants(&unit, &Estimators::default(), &BTreeMap::new()).is_ok();
    for s in [&unit, &back] {
        let n = &s.nets;
        let (e_t, g_s) = (n.enc_t.as_ref().unwrap(), n.dec_s.as_ref().unwrap());
        for (a, b) in [(n.enc_s.shared_blocks(), e_t.shared_blocks()), (n.dec_t.shared_blocks(), g_s.shared_blocks())] {
            tied &= !a.is_empty();
            for (x, y) in a.iter().flat_map(|r| r.params()).zip(b.iter().flat_map(|r| r.params())) {
                tied &= x == y && n.gen.get(x).data() == n.gen.get(y).data();
            }
        }
    }
    tied &= store_snapshot(&unit.nets.gen) == store_snapshot(&back.nets.gen);
    ok &= tied;
    notes.push(format!("shared blocks identical after 500 steps: {tied}"));
    Ok((ok, notes.join("; ")))
}

// ---------------------------------------------------------------- criterion 4

fn frozen_estimators(exp: &mut Experiment) -> R<Verdict> {
    let checksums = exp.estimators.checksums();
    let files: Vec<String> = exp.estimator_files.iter().map(|p| file_sha256(p)).collect::<Result<_, _>>()?;
    let ckpt = exp.gantruth_run(0)?;
    let after = exp.estimators.checksums();
    let files_after: Vec<String> = exp.estimator_files.iter().map(|p| file_sha256(p)).collect::<Result<_, _>>()?;
    let recorded: BTreeMap<String, String> = Archive::load(&ckpt)?.field("estimator_checksums")?;
    let reloaded = Estimators {
        semseg: Some(EstimatorBundle::load(&exp.estimator_files[0])?),
        disparity: Some(EstimatorBundle::load(&exp.estimator_files[1])?),
        instance: None,
    };
    let ok = checksums == after && files == files_after && recorded == checksums && reloaded.checksums() == checksums && checksums.len() == 2;
    let short: Vec<String> = checksums.iter().map(|(k, v)| format!("{k} {}", &v[..12])).collect();
    Ok((ok, format!("checksums before/after 2000 steps: {}", short.join(", "))))
}

// ---------------------------------------------------------------- criterion 5

fn brute_force_miou(pred: &[u32], truth: &[u32], k: u32, ignore: u32) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..k {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| truth[i] != ignore && pred[i] == c).collect();
        let t: HashSet<usize> = (0..pred.len()).filter(|&i| truth[i] == c).collect();
        let union = p.union(&t).count();
        if union > 0 {
            ious.push(p.intersection(&t).count() as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        None
    } else {
        Some(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

fn brute_force_abs_rel(pred: &[f64], gt: &[f64]) -> f64 {
    let mut ratios: Vec<f64> = gt.iter().zip(pred).map(|(g, p)| g / p).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = ratios.len();
    let s = if n % 2 == 1 { ratios[n / 2] } else { 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]) };
    gt.iter().zip(pred).map(|(g, p)| (s * p - g).abs() / g).sum::<f64>() / n as f64
}

/// (source id, source class, cityscapes (id, class), coco (id, class)).
type MappingRow = (u32, &'static str, Option<(u32, &'static str)>, Option<(u32, &'static str)>);

const SYNTHIA_TABLE: [MappingRow; 15] = [
    (0, "void", None, None),
    (1, "sky", Some((10, "sky")), None),
    (3, "road", Some((0, "road")), None),
    (4, "sidewalk", Some((1, "sidewalk")), None),
    (5, "fence", Some((4, "fence")), None),
    (6, "vegetation", Some((8, "vegetation")), None),
    (7, "pole", Some((5, "pole")), None),
    (8, "car", Some((13, "car")), Some((3, "car"))),
    (9, "traffic sign", Some((7, "traffic sign")), Some((13, "traffic sign"))),
    (10, "pedestrian", Some((11, "person")), Some((1, "person"))),
    (11, "bicycle", Some((18, "bicycle")), Some((2, "bicycle"))),
    (12, "lane-marking", Some((0, "road")), None),
    (13, "reserved", None, None),
    (14, "reserved", None, None),
    (15, "traffic light", Some((6, "traffic light")), Some((10, "traffic light"))),
];

fn oracles() -> R<Verdict> {
    let mut notes = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut miou_ok = true;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6u32);
        let truth: Vec<u32> = (0..64).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k) }).collect();
        let pred: Vec<u32> = (0..64).map(|_| rng.random_range(0..k)).collect();
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(&pred, &truth, 255)?;
        miou_ok &= miou(&cm) == brute_force_miou(&pred, &truth, k, 255);
    }
    notes.push(format!("mIOU equals brute force on 1000 maps: {miou_ok}"));

    let mut table_ok = true;
    for (name, column) in [("synthia->cityscapes", 2usize), ("synthia->coco", 3)] {
        let m = LabelMapping::load(name)?;
        for row in SYNTHIA_TABLE {
            let expected = if column == 2 { row.2 } else { row.3 };
            let entry = m.entries().iter().find(|e| e.source_id == row.0);
            let Some(e) = entry else {
                table_ok = false;
                continue;
            };
            table_ok &= e.source_name == row.1;
            table_ok &= match expected {
                Some((id, class)) => e.target_id == TargetId::Class(id) && e.target_name == class && m.map_id(row.0)? == Some(id),
                None => e.target_id == TargetId::Null && m.map_id(row.0)?.is_none(),
            };
        }
        // Ids missing from the published table are NULL.
        table_ok &= m.map_id(2)?.is_none();
    }
    notes.push(format!("mapping tables match the published table: {table_ok}"));

    let mut rel_ok = true;
    for trial in 0..50 {
        let n = rng.random_range(2..40);
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..80.0)).collect();
        let pred: Vec<f64> = if trial % 2 == 0 {
            gt.iter().enumerate().map(|(i, g)| g * if i % 2 == 0 { 1.1 } else { 0.9 }).collect()
        } else {
            (0..n).map(|_| rng.random_range(0.5..100.0)).collect()
        };
        let valid = vec![true; n];
        let base = scale_aligned_abs_rel(&pred, &gt, &valid, Alignment::Median)?;
        let oracle = brute_force_abs_rel(&pred, &gt);
        rel_ok &= (base - oracle).abs() <= 1e-12 * oracle.max(1.0);
        for k in [0.01, 0.5, 3.0, 1000.0] {
            let scaled: Vec<f64> = pred.iter().map(|p| p * k).collect();
            let v = scale_aligned_abs_rel(&scaled, &gt, &valid, Alignment::Median)?;
            rel_ok &= (v - base).abs() <= 1e-12 * base.max(1.0);
        }
    }
    notes.push(format!("abs-rel matches brute force and is scale invariant: {rel_ok}"));
    Ok((miou_ok && table_ok && rel_ok, notes.join("; ")))
}

// ---------------------------------------------------------------- criterion 6

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn adaptation(exp: &mut Experiment) -> R<Verdict> {
    let mapping = LabelMapping::toy();
    let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3u64 {
        let ckpt = exp.gantruth_run(seed)?;
        let translated = translate_dataset(&ckpt, &exp.source, &exp.root.join(format!("translated_{seed}")))?;
        let cfg = TaskNetConfig { steps: 3000, seed, ..Default::default() };
        let sets = [
            TrainSet { name: "source-only", dataset: &exp.source, domain: Domain::Source },
            TrainSet { name: "translated", dataset: &translated, domain: Domain::Target },
            TrainSet { name: "target", dataset: &exp.target, domain: Domain::Target },
        ];
        let t = Instant::now();
        let (report, _) = adaptation_run(&sets, &exp.val, &mapping, &cfg)?;
        eprintln!("  adaptation seed {seed} in {:.0} s\n{}", t.elapsed().as_secs_f64(), report.to_text());
        for r in &report.rows {
            let m = r.report.miou.ok_or("undefined mIOU")?;
            rows.entry(match r.name.as_str() {
                "source-only" => "source-only",
                "translated" => "translated",
                _ => "target",
            })
            .or_default()
            .push(100.0 * m);
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    let (s, tr, t) = (median3(rows["source-only"].clone()), median3(rows["translated"].clone()), median3(rows["target"].clone()));
    let ok = tr >= s && s < t && tr < t;
    Ok((
        ok,
        format!(
            "median mIOU source-only {s:.2} ({}), translated {tr:.2} ({}), target {t:.2} ({})",
            fmt(&rows["source-only"]),
            fmt(&rows["translated"]),
            fmt(&rows["target"])
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

/// Mean cross-entropy of the semantic estimator on `images` against the
/// remapped source labels.
fn estimator_cross_entropy(f: &EstimatorBundle, images: &[ImageBatch], labels: &[Vec<LabelMap>]) -> R<f64> {
    let mut total = 0.0;
    for (x, l) in images.iter().zip(labels) {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let logits = f.semseg_logits(&mut g, xv)?;
        let ce = gt_semseg_loss(&mut g, logits, l, 255)?.loss;
        total += g.value(ce).item() as f64;
    }
    Ok(total / images.len() as f64)
}

fn preservation(exp: &Experiment) -> R<Verdict> {
    let mapping = LabelMapping::toy();
    let held = in_memory(300_000..300_100, Domain::Source)?;
    let mut batches = Vec::new();
    let mut labels = Vec::new();
    for chunk in held.chunks(10) {
        batches.push(ImageBatch::from_images(chunk.iter().map(|s| &s.image))?);
        labels.push(chunk.iter().map(|s| remap(&s.gt.as_ref().unwrap().semantic, &mapping)).collect::<Result<Vec<_>, _>>()?);
    }
    let f = exp.estimators.semseg.as_ref().unwrap();
    let mut ce = BTreeMap::new();
    for (name, model, tasks) in [("gantruth_s", ModelKind::Gantruth, vec![GtTask::S]), ("simple_gan", ModelKind::SimpleGan, vec![])] {
        let cfg = TrainerConfig { model, tasks, steps: 1000, seed: 0, checkpoint_every: 0, ..Default::default() };
        let t = Instant::now();
        let out = train(&cfg, &ArchConfig::default(), &exp.data(&mapping), &exp.estimators, &exp.root.join(format!("c7_{name}")))?;
        eprintln!("  {name}: 1000 steps in {:.0} s", t.elapsed().as_secs_f64());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let translated = batches
            .iter()
            .map(|b| out.state.nets.translate_to_target(b, TranslationMode::Deterministic, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        ce.insert(name, estimator_cross_entropy(f, &translated, &labels)?);
    }
    let raw = estimator_cross_entropy(f, &batches, &labels)?;
    let ok = ce["gantruth_s"] < ce["simple_gan"];
    Ok((
        ok,
        format!(
            "f_T cross-entropy on 100 held-out translated images: GT(S) {:.4}, simple GAN {:.4} (untranslated {raw:.4})",
            ce["gantruth_s"], ce["simple_gan"]
        ),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn tree_bytes(root: &Path) -> R<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn reproducibility() -> R<Verdict> {
    let mapping = LabelMapping::toy();
    let dir = tempfile::tempdir()?;
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let mut runs = Vec::new();
    for rep in 0..2 {
        let root = dir.path().join(format!("rep{rep}"));
        let src = make_dataset(&root.join("source"), 0..12, Domains::Both)?;
        let tgt = make_dataset(&root.join("target"), 50..62, Domains::Target)?;
        let short = EstimatorConfig { width: 4, steps: 20, batch_size: 2, min_miou: 0.0, max_abs_rel: f64::MAX, ..Default::default() };
        let semseg = pretrain_estimator(EstimatorKind::Semseg, &tgt, Domain::Target, &mapping, &short)?;
        let disparity = pretrain_estimator(EstimatorKind::Disparity, &tgt, Domain::Target, &mapping, &short)?;
        semseg.save(&root.join("semseg.est"))?;
        disparity.save(&root.join("disparity.est"))?;
        let est = Estimators { semseg: Some(semseg), disparity: Some(disparity), instance: None };
        let s = src.load_all(Domain::Source, true)?;
        let t = tgt.load_all(Domain::Target, false)?;
        let data = TranslationData { source: &s, target: &t, mapping: &mapping };
        let mut metrics = Vec::new();
        for model in [ModelKind::Gantruth, ModelKind::UnitGantruth] {
            let cfg = TrainerConfig { model, steps: 6, seed: 9, checkpoint_every: 3, ..Default::default() };
            let out = train(&cfg, &ArchConfig::default(), &data, &est, &root.join(format!("run_{}", model.name())))?;
            metrics.push(read_metrics(&out.metrics_path)?.into_iter().map(|r| (r.step, r.terms)).collect::<Vec<_>>());
        }
        let translated = translate_dataset(&root.join("run_gantruth/final.ckpt"), &src, &root.join("translated"))?;
        let task = TaskNetConfig { width: 4, steps: 10, ..Default::default() };
        let sets = [TrainSet { name: "translated", dataset: &translated, domain: Domain::Target }];
        let (report, _) = adaptation_run(&sets, &tgt, &mapping, &task)?;
        std::fs::write(root.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        let cols = [
            GridColumn { label: "source".into(), dataset: &src, domain: Domain::Source },
            GridColumn { label: "translated".into(), dataset: &translated, domain: Domain::Target },
        ];
        let grid = render_grid(&cols, 3, 4)?;
        runs.push((root, metrics, grid.into_raw()));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let same = |sub: &str| -> R<bool> { Ok(tree_bytes(&a.0.join(sub))? == tree_bytes(&b.0.join(sub))?) };
    checks.push(("datasets", same("source")? && same("target")?));
    checks.push(("estimators", std::fs::read(a.0.join("semseg.est"))? == std::fs::read(b.0.join("semseg.est"))?
        && std::fs::read(a.0.join("disparity.est"))? == std::fs::read(b.0.join("disparity.est"))?));
    let ckpts = ["run_gantruth/final.ckpt", "run_gantruth/step_000003.ckpt", "run_unit_gantruth/final.ckpt"];
    let mut ck = true;
    for c in ckpts {
        ck &= std::fs::read(a.0.join(c))? == std::fs::read(b.0.join(c))?;
    }
    checks.push(("checkpoints", ck));
    checks.push(("metrics", a.1 == b.1));
    checks.push(("translations", same("translated")?));
    checks.push(("reports", std::fs::read(a.0.join("report.json"))? == std::fs::read(b.0.join("report.json"))?));
    checks.push(("grids", a.2 == b.2));
    let ok = checks.iter().all(|(_, v)| *v);
    let detail = checks.iter().map(|(k, v)| format!("{k} {}", if *v { "identical" } else { "DIFFER" })).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

// ---------------------------------------------------------------- driver

struct Driver {
    only: Vec<usize>,
    results: Vec<bool>,
}

impl Driver {
    fn wants(&self, n: usize) -> bool {
        self.only.is_empty() || self.only.contains(&n)
    }

    fn run(&mut self, n: usize, title: &str, f: impl FnOnce() -> R<Verdict>) {
        if !self.wants(n) {
            return;
        }
        eprintln!("criterion {n}: {title} ...");
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panic: {}", msg.unwrap_or_default()))
            }
        };
        println!("criterion {n} {}: {title}: {detail} [{:.0} s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        self.results.push(ok);
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // Criterion numbers on the command line restrict the run to those.
    let mut d = Driver { only: args.iter().filter_map(|a| a.parse().ok()).collect(), results: Vec::new() };
    let workdir = tempfile::tempdir().expect("temporary directory");
    d.run(1, "loss closed forms", closed_forms);
    d.run(2, "finite-difference gradients", gradient_checks);
    d.run(3, "objective structure and weight sharing", structure);

    let mut exp = None;
    if [4, 6, 7].iter().any(|&n| d.wants(n)) {
        match Experiment::prepare(workdir.path()) {
            Ok(e) => exp = Some(e),
            Err(e) => eprintln!("experiment setup failed: {e}"),
        }
    }
    let missing = || -> R<Verdict> { fail("experiment setup failed") };
    match exp.as_mut() {
        Some(e) => d.run(4, "frozen estimators", || frozen_estimators(e)),
        None => d.run(4, "frozen estimators", missing),
    }
    d.run(5, "metric and mapping oracles", oracles);
    match exp.as_mut() {
        Some(e) => d.run(6, "domain adaptation ordering", || adaptation(e)),
        None => d.run(6, "domain adaptation ordering", missing),
    }
    match exp.as_ref() {
        Some(e) => d.run(7, "ground-truth preservation", || preservation(e)),
        None => d.run(7, "ground-truth preservation", missing),
    }
    d.run(8, "byte-identical reruns", reproducibility);

    let passed = d.results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", d.results.len());
    if passed != d.results.len() {
        std::process::exit(1);
    }
}

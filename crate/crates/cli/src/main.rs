//! `gantruth`: generate toy data, pretrain estimators, train translators,
//! translate, evaluate and draw comparison grids.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gantruth_core::checkpoint::file_sha256;
use gantruth_core::config::ExperimentConfig;
use gantruth_core::dataset::{write_dataset, Dataset, Domain, Domains};
use gantruth_core::estimators::{pretrain_estimator, EstimatorBundle, EstimatorKind};
use gantruth_core::eval::{
    adaptation_run, evaluate_depth, evaluate_depth_estimator, evaluate_label_maps, evaluate_segmentation, TrainSet,
};
use gantruth_core::grid::{default_domain, render_grid, save_png, GridColumn};
use gantruth_core::scene::generate_scene;
use gantruth_core::train::{self, Estimators, TranslationData, VERSION};
use gantruth_core::Error;

#[derive(Parser)]
#[command(name = "gantruth", version, about = "Image translation with ground-truth preservation on a toy driving world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment config file (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set trainer.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainsArg {
    Source,
    Target,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of procedurally generated scenes.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Seed of the first scene; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "both")]
        domains: DomainsArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and freeze a task estimator on annotated images.
    PretrainEstimator {
        #[arg(long, value_parser = parse_kind)]
        kind: EstimatorKind,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; the estimator is written as `<kind>.est`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        /// Overrides `estimators.pretrain.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `estimators.pretrain.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a translation model.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.source`.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Overrides `data.target`.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Overrides `trainer.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `trainer.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Translate the source images of a dataset into the target domain.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-class IoU and mIOU of stored label maps or of a trained network.
    EvaluateSegmentation {
        /// Dataset holding predicted label maps.
        #[arg(long, conflicts_with = "task_run", required_unless_present = "task_run")]
        pred: Option<PathBuf>,
        /// Trained segmentation network (an `.est` file).
        #[arg(long)]
        task_run: Option<PathBuf>,
        /// Dataset with the reference labels (and the images a network runs on).
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Scale-aligned depth abs-rel of stored disparity maps or of an estimator.
    EvaluateDepth {
        #[arg(long, conflicts_with = "estimator", required_unless_present = "estimator")]
        pred: Option<PathBuf>,
        #[arg(long)]
        estimator: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train task networks on raw source, translated source and target data
    /// and compare their mIOU on target validation data.
    AdaptEval {
        #[arg(long)]
        translated: PathBuf,
        #[arg(long)]
        reference_source: PathBuf,
        #[arg(long)]
        target_val: PathBuf,
        /// Annotated target-domain training data for the ceiling row;
        /// defaults to the target images of the reference source dataset.
        #[arg(long)]
        target_train: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `eval.task.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `eval.task.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compose randomly chosen samples of several datasets into one image.
    Grid {
        /// Datasets as `path` or `path:source` / `path:target`.
        #[arg(long, num_args = 1.., required = true)]
        datasets: Vec<String>,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_kind(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failures that are the caller's fault exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Mapping(_) | Error::MissingEstimator(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn quote(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

fn load_config(cfg: &ConfigArgs, flags: Vec<String>) -> Result<ExperimentConfig, Failure> {
    let mut overrides = cfg.set.clone();
    overrides.extend(flags);
    Ok(ExperimentConfig::load(cfg.config.as_deref(), &overrides)?)
}

fn open(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::open(path)?)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))
}

fn write_report(out: Option<&Path>, cfg: &ExperimentConfig, text: &str, json: String) -> CmdResult {
    print!("{text}");
    if let Some(dir) = out {
        cfg.echo_into(dir, VERSION)?;
        write_text(&dir.join("report.txt"), text)?;
        write_text(&dir.join("report.json"), &(json + "\n"))?;
    }
    Ok(())
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenerateData { out, count, seed, domains, cfg } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let domains = match domains {
                DomainsArg::Source => Domains::Source,
                DomainsArg::Target => Domains::Target,
                DomainsArg::Both => Domains::Both,
            };
            let specs = (0..count as u64)
                .map(|i| generate_scene(seed + i, &cfg.data.scene))
                .collect::<Result<Vec<_>, _>>()?;
            let ds = write_dataset(&out, &specs, domains, &cfg.data.scene, &cfg.data.style)?;
            cfg.echo_into(&out, VERSION)?;
            let m = ds.manifest();
            println!(
                "{}: {} samples, {}x{}, domains {:?}",
                out.display(),
                ds.len(),
                m.image_size[0],
                m.image_size[1],
                m.domains.iter().map(|d| d.dir()).collect::<Vec<_>>()
            );
            Ok(())
        }
        Command::PretrainEstimator { kind, data, out, domain, steps, seed, cfg } => {
            let mut flags = Vec::new();
            if let Some(s) = steps {
                flags.push(format!("estimators.pretrain.steps={s}"));
            }
            if let Some(s) = seed {
                flags.push(format!("estimators.pretrain.seed={s}"));
            }
            let cfg = load_config(&cfg, flags)?;
            let mapping = cfg.mapping()?;
            let ds = open(&data)?;
            let bundle = pretrain_estimator(kind, &ds, domain.into(), &mapping, &cfg.estimators.pretrain)?;
            cfg.echo_into(&out, VERSION)?;
            let path = out.join(format!("{}.est", kind.name()));
            let sha = bundle.save(&path)?;
            let p = bundle.provenance().expect("pretrained bundles carry provenance");
            println!("{}: {} = {:.4} after {} steps, sha256 {sha}", path.display(), p.metric, p.value, p.steps);
            Ok(())
        }
        Command::Train { out, source, target, steps, seed, resume, cfg } => {
            let mut flags = Vec::new();
            if let Some(p) = &source {
                flags.push(format!("data.source={}", quote(p)));
            }
            if let Some(p) = &target {
                flags.push(format!("data.target={}", quote(p)));
            }
            if let Some(s) = steps {
                flags.push(format!("trainer.steps={s}"));
            }
            if let Some(s) = seed {
                flags.push(format!("trainer.seed={s}"));
            }
            let cfg = load_config(&cfg, flags)?;
            run_train(&cfg, &out, resume.as_deref())
        }
        Command::Translate { checkpoint, data, out, cfg } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let src = open(&data)?;
            let ds = train::translate_dataset(&checkpoint, &src, &out)?;
            cfg.echo_into(&out, VERSION)?;
            println!("{}: {} translated samples", out.display(), ds.len());
            Ok(())
        }
        Command::EvaluateSegmentation { pred, task_run, truth, domain, out, cfg } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let mapping = cfg.mapping()?;
            let truth = open(&truth)?;
            let report = match (pred, task_run) {
                (Some(p), _) => evaluate_label_maps(&open(&p)?, &truth, &mapping)?,
                (None, Some(net)) => {
                    let bundle = EstimatorBundle::load(&net)?;
                    let mut r = evaluate_segmentation(&bundle, &truth, domain.into(), &mapping)?;
                    r.checkpoint_sha256 = Some(file_sha256(&net)?);
                    r
                }
                (None, None) => return Err(Failure::Usage("give --pred or --task-run".into())),
            };
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_report(out.as_deref(), &cfg, &report.to_text(), json)
        }
        Command::EvaluateDepth { pred, estimator, truth, domain, out, cfg } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let truth = open(&truth)?;
            let (align, cap) = (cfg.eval.alignment, cfg.eval.max_depth_m);
            let report = match (pred, estimator) {
                (Some(p), _) => evaluate_depth(&open(&p)?, &truth, align, cap)?,
                (None, Some(e)) => {
                    let bundle = EstimatorBundle::load(&e)?;
                    let mut r = evaluate_depth_estimator(&bundle, &truth, domain.into(), align, cap)?;
                    r.checkpoint_sha256 = Some(file_sha256(&e)?);
                    r
                }
                (None, None) => return Err(Failure::Usage("give --pred or --estimator".into())),
            };
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_report(out.as_deref(), &cfg, &report.to_text(), json)
        }
        Command::AdaptEval { translated, reference_source, target_val, target_train, out, steps, seed, cfg } => {
            let mut flags = Vec::new();
            if let Some(s) = steps {
                flags.push(format!("eval.task.steps={s}"));
            }
            if let Some(s) = seed {
                flags.push(format!("eval.task.seed={s}"));
            }
            let cfg = load_config(&cfg, flags)?;
            let mapping = cfg.mapping()?;
            let translated = open(&translated)?;
            let reference = open(&reference_source)?;
            let val = open(&target_val)?;
            let target = match &target_train {
                Some(p) => open(p)?,
                None => reference.clone(),
            };
            if !target.has_domain(Domain::Target) {
                return Err(Failure::Usage(format!(
                    "{} has no target-domain images for the ceiling row; pass --target-train",
                    target.root().display()
                )));
            }
            let sets = [
                TrainSet { name: "source-only", dataset: &reference, domain: Domain::Source },
                TrainSet { name: "translated", dataset: &translated, domain: Domain::Target },
                TrainSet { name: "target-ceiling", dataset: &target, domain: Domain::Target },
            ];
            let (report, nets) = adaptation_run(&sets, &val, &mapping, &cfg.eval.task)?;
            cfg.echo_into(&out, VERSION)?;
            for (row, net) in report.rows.iter().zip(&nets) {
                net.save(&out.join(format!("{}.est", row.name)))?;
            }
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_report(Some(&out), &cfg, &report.to_text(), json)
        }
        Command::Grid { datasets, rows, out, seed } => {
            let mut opened = Vec::new();
            for spec in &datasets {
                let (path, domain) = match spec.rsplit_once(':') {
                    Some((p, "source")) => (p, Some(Domain::Source)),
                    Some((p, "target")) => (p, Some(Domain::Target)),
                    _ => (spec.as_str(), None),
                };
                let ds = open(Path::new(path))?;
                let domain = domain.unwrap_or_else(|| default_domain(&ds));
                let label = Path::new(path)
                    .file_name()
                    .map_or_else(|| path.to_string(), |n| n.to_string_lossy().into_owned());
                opened.push((format!("{label}:{}", domain.dir()), ds, domain));
            }
            let columns: Vec<GridColumn> = opened
                .iter()
                .map(|(label, dataset, domain)| GridColumn { label: label.clone(), dataset, domain: *domain })
                .collect();
            let img = render_grid(&columns, rows, seed).map_err(|e| match e {
                Error::Input(m) => Failure::Usage(m),
                other => Failure::Runtime(other),
            })?;
            save_png(&img, &out)?;
            println!("{}: {}x{} grid", out.display(), img.width(), img.height());
            Ok(())
        }
    }
}

fn run_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> CmdResult {
    let mapping = cfg.mapping()?;
    let source = cfg.data.source.as_ref().ok_or_else(|| Failure::Usage("data.source is not set".into()))?;
    let target = cfg.data.target.as_ref().ok_or_else(|| Failure::Usage("data.target is not set".into()))?;
    let tasks = cfg.trainer.active_tasks();
    let paths = &cfg.estimators;
    let load = |task: train::GtTask, path: &Option<PathBuf>| -> Result<Option<EstimatorBundle>, Failure> {
        if !tasks.contains(&task) {
            return Ok(None);
        }
        let p = path.as_ref().ok_or_else(|| {
            Failure::Usage(format!("task {task:?} is enabled but estimators.{} is not set", task.estimator_kind().name()))
        })?;
        Ok(Some(EstimatorBundle::load(p)?))
    };
    // Everything is checked before the first step.
    let estimators = Estimators {
        semseg: load(train::GtTask::S, &paths.semseg)?,
        disparity: load(train::GtTask::D, &paths.disparity)?,
        instance: load(train::GtTask::I, &paths.instance)?,
    };
    estimators.check(&tasks, &mapping)?;
    let src = open(source)?;
    let tgt = open(target)?;
    let source_samples = src.load_all(Domain::Source, true)?;
    let target_samples = tgt.load_all(Domain::Target, false)?;
    let data = TranslationData { source: &source_samples, target: &target_samples, mapping: &mapping };
    cfg.echo_into(out, VERSION)?;
    let outcome = match resume {
        Some(ckpt) => train::resume(ckpt, Some(cfg.trainer.steps), &data, &estimators, out)?,
        None => train::train(&cfg.trainer, &cfg.arch, &data, &estimators, out)?,
    };
    println!(
        "{}: step {}, sha256 {}",
        outcome.final_checkpoint.display(),
        outcome.state.step,
        outcome.checkpoint_sha256
    );
    Ok(())
}

//! Segmentation and depth metrics, and the two-step adaptation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Domain, Sample};
use crate::error::{Error, Result};
use crate::estimators::{fit, EstimatorBundle, EstimatorKind, Prediction, TrainingData};
use crate::labels::{remap, LabelMapping};
use crate::scene::{SceneClass, SceneGroundTruth};

/// `K x K` pixel counts; entry `(i, j)` counts pixels of true class `i`
/// predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one label map pair. Pixels whose truth is `ignore_index` are
    /// skipped; any other id must be `< K`.
    pub fn accumulate(&mut self, pred: &[u32], truth: &[u32], ignore_index: u32) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
        }
        let k = self.classes as u32;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore_index {
                continue;
            }
            if t >= k || p >= k {
                return Err(Error::Input(format!("label id {} outside {k} classes", t.max(p))));
            }
            self.counts[(t * k + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Build a matrix from whole label maps.
pub fn accumulate_confusion(
    cm: &mut ConfusionMatrix,
    pred: &[u32],
    truth: &[u32],
    ignore_index: u32,
) -> Result<()> {
    cm.accumulate(pred, truth, ignore_index)
}

/// Mean IoU over classes present in truth or prediction; `None` when no
/// class is present at all.
pub fn miou(cm: &ConfusionMatrix) -> Option<f64> {
    let present: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// How the single global scale of a depth prediction is fitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Median of per-pixel `gt / pred`.
    #[default]
    Median,
    /// Least-squares `argmin_c sum (c * pred - gt)^2`.
    LeastSquares,
}

/// Mean of `|c * pred - gt| / gt` over valid pixels, with `c` fitted per
/// `alignment`.
pub fn scale_aligned_abs_rel(pred: &[f64], gt: &[f64], valid: &[bool], alignment: Alignment) -> Result<f64> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(Error::Shape("depth maps and mask differ in size".into()));
    }
    let mut pairs = Vec::new();
    for ((&p, &g), &v) in pred.iter().zip(gt).zip(valid) {
        if !v {
            continue;
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Input(format!("non-positive depth prediction {p} on a valid pixel")));
        }
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::Input(format!("non-positive ground-truth depth {g} on a valid pixel")));
        }
        pairs.push((p, g));
    }
    if pairs.is_empty() {
        return Err(Error::Input("empty valid mask".into()));
    }
    let c = match alignment {
        Alignment::Median => {
            let mut ratios: Vec<f64> = pairs.iter().map(|(p, g)| g / p).collect();
            median(&mut ratios)
        }
        Alignment::LeastSquares => {
            let num: f64 = pairs.iter().map(|(p, g)| p * g).sum();
            let den: f64 = pairs.iter().map(|(p, _)| p * p).sum();
            num / den
        }
    };
    Ok(pairs.iter().map(|(p, g)| (c * p - g).abs() / g).sum::<f64>() / pairs.len() as f64)
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Settings of the task network trained in an adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskNetConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaskNetConfig {
    fn default() -> Self {
        TaskNetConfig { width: 12, steps: 3000, batch_size: 2, lr: 2e-3, seed: 0 }
    }
}

/// Per-class and mean IoU of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dataset_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub classes: Vec<String>,
    pub class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Ground-truth pixels per class.
    pub pixel_counts: Vec<u64>,
    pub evaluated_pixels: u64,
}

impl SegmentationReport {
    pub fn from_confusion(cm: &ConfusionMatrix, classes: Vec<String>, dataset_sha256: String) -> Self {
        let k = cm.classes();
        SegmentationReport {
            dataset_sha256,
            checkpoint_sha256: None,
            classes,
            class_iou: cm.class_iou(),
            miou: miou(cm),
            pixel_counts: (0..k).map(|i| (0..k).map(|j| cm.get(i, j)).sum()).collect(),
            evaluated_pixels: cm.total(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset   {}", self.dataset_sha256);
        if let Some(c) = &self.checkpoint_sha256 {
            let _ = writeln!(out, "checkpoint {c}");
        }
        for ((name, iou), n) in self.classes.iter().zip(&self.class_iou).zip(&self.pixel_counts) {
            let v = iou.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{name:<12} iou {v:>8}  pixels {n}");
        }
        let m = self.miou.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "mIOU {m} over {} pixels", self.evaluated_pixels);
        out
    }
}

/// Train a fresh segmentation network on `domain` images of `dataset`.
pub fn train_task_net(dataset: &Dataset, domain: Domain, mapping: &LabelMapping, cfg: &TaskNetConfig) -> Result<EstimatorBundle> {
    if dataset.is_empty() {
        return Err(Error::Dataset { path: dataset.root().into(), reason: "empty training set".into() });
    }
    let samples = dataset.load_all(domain, true)?;
    let data = TrainingData { samples: &samples, mapping, camera: dataset.manifest().camera };
    let mut net = EstimatorBundle::new(EstimatorKind::Semseg, cfg.width, mapping.target_names(), cfg.seed)?;
    fit(&mut net, &data, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed)?;
    net.freeze();
    Ok(net)
}

/// Confusion matrix of `net` on in-memory samples.
pub fn segmentation_confusion(net: &EstimatorBundle, samples: &[Sample], mapping: &LabelMapping) -> Result<ConfusionMatrix> {
    if net.num_classes() != mapping.target_classes() {
        return Err(Error::Mapping(format!(
            "network predicts {} classes, mapping `{}` has {}",
            net.num_classes(),
            mapping.name(),
            mapping.target_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(net.num_classes());
    for chunk in samples.chunks(8) {
        let batch = crate::batch::ImageBatch::from_images(chunk.iter().map(|s| &s.image))?;
        let pred = net.predict_labels(&batch)?;
        let per = pred.len() / chunk.len();
        for (s, p) in chunk.iter().zip(pred.chunks(per)) {
            let gt = s.gt.as_ref().ok_or_else(|| Error::Input(format!("sample {} has no ground truth", s.id)))?;
            cm.accumulate(p, &remap(&gt.semantic, mapping)?.data, mapping.ignore_index())?;
        }
    }
    Ok(cm)
}

/// Evaluate `net` on `domain` images of `dataset`.
pub fn evaluate_segmentation(net: &EstimatorBundle, dataset: &Dataset, domain: Domain, mapping: &LabelMapping) -> Result<SegmentationReport> {
    let samples = dataset.load_all(domain, true)?;
    let cm = segmentation_confusion(net, &samples, mapping)?;
    Ok(SegmentationReport::from_confusion(&cm, mapping.target_names(), dataset.content_hash()?))
}

/// Compare stored label maps: the ground truth of `pred` against that of
/// `truth`, matched by sample id. Both are remapped with `mapping`.
pub fn evaluate_label_maps(pred: &Dataset, truth: &Dataset, mapping: &LabelMapping) -> Result<SegmentationReport> {
    let mut cm = ConfusionMatrix::new(mapping.target_classes());
    let missing: Vec<&str> = truth.ids().filter(|id| !pred.ids().any(|p| p == *id)).collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("predictions missing for ids: {}", missing.join(", "))));
    }
    for id in truth.ids() {
        let p = remap(&pred.read_gt(id)?.semantic, mapping)?;
        let t = remap(&truth.read_gt(id)?.semantic, mapping)?;
        let ignore = mapping.ignore_index();
        // Predicted ignore pixels count as a wrong class only where truth is labelled.
        let p: Vec<u32> = p
            .data
            .iter()
            .zip(&t.data)
            .map(|(&pv, &tv)| if pv == ignore && tv != ignore { (tv + 1) % mapping.target_classes() as u32 } else { pv })
            .collect();
        cm.accumulate(&p, &t.data, ignore)?;
    }
    Ok(SegmentationReport::from_confusion(&cm, mapping.target_names(), truth.content_hash()?))
}

/// Scale-aligned depth error of one dataset's disparity maps against another's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub dataset_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub alignment: Alignment,
    pub abs_rel: f64,
    pub evaluated_pixels: u64,
}

/// Depth abs-rel of the disparity maps stored in `pred` against `truth`.
/// Sky and pixels beyond `max_depth_m` are excluded; each image gets its own
/// scale constant and the per-image errors are averaged.
pub fn evaluate_depth(pred: &Dataset, truth: &Dataset, alignment: Alignment, max_depth_m: f64) -> Result<DepthReport> {
    let mut acc = DepthAccumulator::new(truth, alignment, max_depth_m);
    for id in truth.ids() {
        let t = truth.read_gt(id)?;
        let p = pred.read_gt(id).map_err(|_| Error::Input(format!("prediction missing for id {id}")))?;
        acc.add(id, &p.disparity.data, &t)?;
    }
    acc.finish(truth)
}

/// Depth abs-rel of a disparity estimator run on `domain` images of `truth`.
pub fn evaluate_depth_estimator(
    net: &EstimatorBundle,
    truth: &Dataset,
    domain: Domain,
    alignment: Alignment,
    max_depth_m: f64,
) -> Result<DepthReport> {
    if net.kind() != EstimatorKind::Disparity {
        return Err(Error::Input(format!("expected a disparity estimator, got {}", net.kind().name())));
    }
    let mut acc = DepthAccumulator::new(truth, alignment, max_depth_m);
    for id in truth.ids() {
        let img = truth.read_image(domain, id)?;
        let x = crate::batch::ImageBatch::from_images([&img])?;
        let Prediction::Disparity(d) = net.estimate(&x)? else { unreachable!("disparity estimator") };
        acc.add(id, d.data(), &truth.read_gt(id)?)?;
    }
    acc.finish(truth)
}

struct DepthAccumulator {
    fb: f64,
    alignment: Alignment,
    max_depth_m: f64,
    total: f64,
    images: usize,
    pixels: u64,
}

impl DepthAccumulator {
    fn new(truth: &Dataset, alignment: Alignment, max_depth_m: f64) -> Self {
        let cam = truth.manifest().camera;
        DepthAccumulator { fb: cam.focal_px * cam.baseline_m, alignment, max_depth_m, total: 0.0, images: 0, pixels: 0 }
    }

    fn add(&mut self, id: &str, pred: &[f32], t: &SceneGroundTruth) -> Result<()> {
        if pred.len() != t.disparity.data.len() {
            return Err(Error::Shape(format!("prediction for {id} differs in size from the truth")));
        }
        let mut pd = Vec::new();
        let mut gd = Vec::new();
        for ((&dp, &dg), &c) in pred.iter().zip(&t.disparity.data).zip(&t.semantic.data) {
            if c == SceneClass::Sky.id() || dg <= 0.0 {
                continue;
            }
            let depth = self.fb / dg as f64;
            if depth > self.max_depth_m {
                continue;
            }
            if dp <= 0.0 {
                return Err(Error::Input(format!("non-positive predicted disparity in {id}")));
            }
            pd.push(self.fb / dp as f64);
            gd.push(depth);
        }
        if gd.is_empty() {
            return Ok(());
        }
        let valid = vec![true; gd.len()];
        self.total += scale_aligned_abs_rel(&pd, &gd, &valid, self.alignment)?;
        self.images += 1;
        self.pixels += gd.len() as u64;
        Ok(())
    }

    fn finish(self, truth: &Dataset) -> Result<DepthReport> {
        if self.images == 0 {
            return Err(Error::Input("no valid depth pixels".into()));
        }
        Ok(DepthReport {
            dataset_sha256: truth.content_hash()?,
            checkpoint_sha256: None,
            alignment: self.alignment,
            abs_rel: self.total / self.images as f64,
            evaluated_pixels: self.pixels,
        })
    }
}

impl DepthReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("dataset   {}\n", self.dataset_sha256);
        if let Some(c) = &self.checkpoint_sha256 {
            let _ = writeln!(out, "checkpoint {c}");
        }
        let _ = writeln!(out, "alignment {:?}", self.alignment);
        let _ = writeln!(out, "abs-rel {:.4} over {} pixels", self.abs_rel, self.evaluated_pixels);
        out
    }
}

/// One row of an adaptation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRow {
    pub name: String,
    pub train_dataset_sha256: String,
    pub report: SegmentationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub task: TaskNetConfig,
    pub rows: Vec<AdaptationRow>,
}

impl AdaptationReport {
    pub fn row(&self, name: &str) -> Option<&AdaptationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>8}", "training data", "mIOU");
        for r in &self.rows {
            let m = r.report.miou.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            let _ = writeln!(out, "{:<14} {m:>8}", r.name);
        }
        out
    }
}

/// A dataset and the domain whose images a task network trains on.
pub struct TrainSet<'a> {
    pub name: &'a str,
    pub dataset: &'a Dataset,
    pub domain: Domain,
}

/// Train one fresh task network per training set and evaluate each on the
/// target-domain images of `target_val`. The trained networks are returned
/// in row order.
pub fn adaptation_run(
    train_sets: &[TrainSet],
    target_val: &Dataset,
    mapping: &LabelMapping,
    cfg: &TaskNetConfig,
) -> Result<(AdaptationReport, Vec<EstimatorBundle>)> {
    let val = target_val.load_all(Domain::Target, true)?;
    let val_hash = target_val.content_hash()?;
    let mut rows = Vec::new();
    let mut nets = Vec::new();
    for set in train_sets {
        log::info!("training task network on {} ({})", set.name, set.dataset.root().display());
        let net = train_task_net(set.dataset, set.domain, mapping, cfg)?;
        let cm = segmentation_confusion(&net, &val, mapping)?;
        let mut report = SegmentationReport::from_confusion(&cm, mapping.target_names(), val_hash.clone());
        report.checkpoint_sha256 = Some(net.checksum());
        rows.push(AdaptationRow { name: set.name.to_string(), train_dataset_sha256: set.dataset.content_hash()?, report });
        nets.push(net);
    }
    Ok((AdaptationReport { task: cfg.clone(), rows }, nets))
}

/// The standard three rows: raw source, translated source, target ceiling.
pub fn standard_adaptation(
    translated: &Dataset,
    reference_source: &Dataset,
    target_train: &Dataset,
    target_val: &Dataset,
    mapping: &LabelMapping,
    cfg: &TaskNetConfig,
) -> Result<(AdaptationReport, Vec<EstimatorBundle>)> {
    let sets = [
        TrainSet { name: "source-only", dataset: reference_source, domain: Domain::Source },
        TrainSet { name: "translated", dataset: translated, domain: Domain::Target },
        TrainSet { name: "target", dataset: target_train, domain: Domain::Target },
    ];
    adaptation_run(&sets, target_val, mapping, cfg)
}

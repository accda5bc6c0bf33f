//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/source/<id>.png            8-bit RGB
//! <root>/target/<id>.png            8-bit RGB
//! <root>/gt/<id>.semantic.png       8-bit class ids, 255 = ignore
//! <root>/gt/<id>.disparity.png      16-bit, value = disparity * 256
//! <root>/gt/<id>.instances.json     [{class_id, box, mask: RLE}]
//! ```
//!
//! A `.incomplete` marker exists for the whole duration of a write; readers
//! refuse directories that still carry it.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scene::{
    render_source, render_target, Camera, DisparityMap, InstanceAnnotation, SceneConfig, SceneGroundTruth, SceneSpec,
    TargetStyle,
};

pub const FORMAT_VERSION: u32 = 1;
pub const DISPARITY_SCALE: f32 = 256.0;
const INCOMPLETE_MARKER: &str = ".incomplete";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Which renders a dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domains {
    Source,
    Target,
    Both,
}

impl Domains {
    pub fn list(self) -> Vec<Domain> {
        match self {
            Domains::Source => vec![Domain::Source],
            Domains::Target => vec![Domain::Target],
            Domains::Both => vec![Domain::Source, Domain::Target],
        }
    }
}

impl std::str::FromStr for Domains {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domains::Source),
            "target" => Ok(Domains::Target),
            "both" => Ok(Domains::Both),
            other => Err(Error::Config(format!("unknown domains `{other}` (source, target, both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
}

/// Where a translated dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub checkpoint_sha256: String,
    pub source_dataset_sha256: String,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub camera: Camera,
    pub domains: Vec<Domain>,
    pub style: TargetStyle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<TranslationRecord>,
    pub samples: Vec<SampleEntry>,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writer holding the incomplete marker until [`DatasetWriter::finish`].
pub struct DatasetWriter {
    root: PathBuf,
}

impl DatasetWriter {
    /// `root` must not exist or be an empty directory.
    pub fn create(root: &Path, domains: &[Domain], with_gt: bool) -> Result<Self> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
            if entries.next().is_some() {
                return Err(Error::Dataset { path: root.into(), reason: "output directory is not empty".into() });
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        write_file(&root.join(INCOMPLETE_MARKER), b"write in progress\n")?;
        for d in domains {
            let p = root.join(d.dir());
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        if with_gt {
            let p = root.join("gt");
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(DatasetWriter { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_image(&self, domain: Domain, id: &str, img: &RgbImage) -> Result<()> {
        let path = self.root.join(domain.dir()).join(format!("{id}.png"));
        img.save(&path).map_err(|e| Error::format(&path, e))
    }

    pub fn write_gt(&self, id: &str, gt: &SceneGroundTruth) -> Result<()> {
        let gt_dir = self.root.join("gt");
        write_semantic_png(&gt_dir.join(format!("{id}.semantic.png")), &gt.semantic)?;
        write_disparity_png(&gt_dir.join(format!("{id}.disparity.png")), &gt.disparity)?;
        let path = gt_dir.join(format!("{id}.instances.json"));
        let records: Vec<InstanceRecord> = gt
            .instances
            .iter()
            .map(|a| InstanceRecord::from_annotation(a, gt.semantic.height, gt.semantic.width))
            .collect();
        let json = serde_json::to_vec_pretty(&records).map_err(|e| Error::format(&path, e))?;
        write_file(&path, &json)
    }

    /// Copy ground-truth files of `id` byte for byte from another dataset.
    pub fn copy_gt_from(&self, other: &Dataset, id: &str) -> Result<()> {
        for suffix in ["semantic.png", "disparity.png", "instances.json"] {
            let name = format!("{id}.{suffix}");
            let from = other.root().join("gt").join(&name);
            let to = self.root.join("gt").join(&name);
            fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        }
        Ok(())
    }

    pub fn finish(self, manifest: &Manifest) -> Result<Dataset> {
        let path = self.root.join("manifest.json");
        let mut json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::format(&path, e))?;
        json.push(b'\n');
        write_file(&path, &json)?;
        let marker = self.root.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(Dataset { root: self.root, manifest: manifest.clone() })
    }
}

/// Render `specs` and write them with ground truth.
pub fn write_dataset(
    root: &Path,
    specs: &[SceneSpec],
    domains: Domains,
    config: &SceneConfig,
    style: &TargetStyle,
) -> Result<Dataset> {
    config.validate()?;
    style.validate()?;
    let image_size = (config.image_size[0], config.image_size[1]);
    for s in specs {
        s.validate()?;
        if s.image_size != image_size || s.camera != config.camera {
            return Err(Error::Input(format!("scene {} does not match the dataset image size/camera", s.seed)));
        }
    }
    let list = domains.list();
    let writer = DatasetWriter::create(root, &list, true)?;
    let mut samples = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = sample_id(i);
        let (src, gt) = render_source(spec);
        if list.contains(&Domain::Source) {
            writer.write_image(Domain::Source, &id, &src)?;
        }
        if list.contains(&Domain::Target) {
            writer.write_image(Domain::Target, &id, &render_target(spec, style))?;
        }
        writer.write_gt(&id, &gt)?;
        samples.push(SampleEntry { id, seed: spec.seed });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        image_size: config.image_size,
        camera: config.camera,
        domains: list,
        style: style.clone(),
        translation: None,
        samples,
    };
    writer.finish(&manifest)
}

/// One image held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub gt: Option<SceneGroundTruth>,
}

/// Read handle over a complete dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if root.join(INCOMPLETE_MARKER).exists() {
            return Err(Error::Dataset { path: root.into(), reason: "incomplete write (marker present)".into() });
        }
        let path = root.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::format(&path, e))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset { path: root.into(), reason: format!("unsupported version {}", manifest.version) });
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|s| s.id.as_str())
    }

    pub fn has_domain(&self, d: Domain) -> bool {
        self.manifest.domains.contains(&d)
    }

    pub fn read_image(&self, domain: Domain, id: &str) -> Result<RgbImage> {
        if !self.has_domain(domain) {
            return Err(Error::Dataset { path: self.root.clone(), reason: format!("no {} images", domain.dir()) });
        }
        let path = self.root.join(domain.dir()).join(format!("{id}.png"));
        let img = image::open(&path).map_err(|e| Error::format(&path, e))?.to_rgb8();
        let [h, w] = self.manifest.image_size;
        if img.dimensions() != (w as u32, h as u32) {
            return Err(Error::format(&path, "image size differs from manifest"));
        }
        Ok(img)
    }

    pub fn read_gt(&self, id: &str) -> Result<SceneGroundTruth> {
        let gt_dir = self.root.join("gt");
        let semantic = read_semantic_png(&gt_dir.join(format!("{id}.semantic.png")))?;
        let disparity = read_disparity_png(&gt_dir.join(format!("{id}.disparity.png")))?;
        let path = gt_dir.join(format!("{id}.instances.json"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<InstanceRecord> = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))?;
        let instances = records
            .into_iter()
            .map(|r| r.into_annotation(semantic.height, semantic.width).map_err(|m| Error::format(&path, m)))
            .collect::<Result<_>>()?;
        Ok(SceneGroundTruth { semantic, disparity, instances })
    }

    /// Every sample of `domain` in manifest order, optionally with ground truth.
    pub fn load_all(&self, domain: Domain, with_gt: bool) -> Result<Vec<Sample>> {
        self.ids()
            .map(|id| {
                Ok(Sample {
                    id: id.to_string(),
                    image: self.read_image(domain, id)?,
                    gt: if with_gt { Some(self.read_gt(id)?) } else { None },
                })
            })
            .collect()
    }

    /// SHA-256 over the manifest and every file, in sorted relative-path order.
    pub fn content_hash(&self) -> Result<String> {
        hash_tree(&self.root)
    }
}

/// SHA-256 over relative paths and bytes of every regular file below `root`.
pub fn hash_tree(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

pub fn write_semantic_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let bytes = labels
        .data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::format(path, format!("class id {v} does not fit 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    let img = GrayImage::from_raw(labels.width as u32, labels.height as u32, bytes).expect("label buffer size");
    img.save(path).map_err(|e| Error::format(path, e))
}

pub fn read_semantic_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::format(path, "semantic map must be 8-bit single channel"));
    };
    let (w, h) = gray.dimensions();
    LabelMap::new(h as usize, w as usize, gray.into_raw().into_iter().map(u32::from).collect())
}

/// 16-bit fixed point: stored value = round(disparity * 256), saturating.
pub fn encode_disparity(d: f32) -> u16 {
    (d.max(0.0) * DISPARITY_SCALE).round().min(u16::MAX as f32) as u16
}

pub fn decode_disparity(v: u16) -> f32 {
    v as f32 / DISPARITY_SCALE
}

pub fn write_disparity_png(path: &Path, disp: &DisparityMap) -> Result<()> {
    let raw: Vec<u16> = disp.data.iter().map(|&d| encode_disparity(d)).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(disp.width as u32, disp.height as u32, raw).expect("disparity buffer size");
    img.save(path).map_err(|e| Error::format(path, e))
}

pub fn read_disparity_png(path: &Path) -> Result<DisparityMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let image::DynamicImage::ImageLuma16(gray) = img else {
        return Err(Error::format(path, "disparity map must be 16-bit single channel"));
    };
    let (w, h) = gray.dimensions();
    Ok(DisparityMap {
        height: h as usize,
        width: w as usize,
        data: gray.into_raw().into_iter().map(decode_disparity).collect(),
    })
}

/// Uncompressed run-length encoding of a row-major binary mask. Runs
/// alternate starting with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &[bool], height: usize, width: usize) -> Self {
        assert_eq!(mask.len(), height * width, "mask size");
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &m in mask {
            if m != current {
                counts.push(run);
                run = 0;
                current = m;
            }
            run += 1;
        }
        counts.push(run);
        RleMask { size: [height, width], counts }
    }

    pub fn decode(&self) -> std::result::Result<Vec<bool>, String> {
        let total = self.size[0] * self.size[1];
        let mut out = Vec::with_capacity(total);
        let mut value = false;
        for &c in &self.counts {
            out.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        if out.len() != total {
            return Err(format!("RLE covers {} pixels, expected {total}", out.len()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    class_id: u32,
    #[serde(rename = "box")]
    bbox: [u32; 4],
    mask: RleMask,
}

impl InstanceRecord {
    fn from_annotation(a: &InstanceAnnotation, height: usize, width: usize) -> Self {
        InstanceRecord { class_id: a.class_id, bbox: a.bbox, mask: RleMask::encode(&a.mask, height, width) }
    }

    fn into_annotation(self, height: usize, width: usize) -> std::result::Result<InstanceAnnotation, String> {
        if self.mask.size != [height, width] {
            return Err(format!("instance mask size {:?} differs from image {height}x{width}", self.mask.size));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if x1 <= x0 || y1 <= y0 {
            return Err(format!("malformed box {:?}", self.bbox));
        }
        Ok(InstanceAnnotation { class_id: self.class_id, bbox: self.bbox, mask: self.mask.decode()? })
    }
}

//! Procedural two-domain driving scenes with exact ground truth.
//!
//! A [`SceneSpec`] is a pure function of `(seed, SceneConfig)`. Objects are
//! camera-facing billboards standing on a flat ground plane, so semantic
//! labels, disparity and instance masks follow analytically from geometry.
//! The source domain is flat shaded; the target domain renders the same
//! geometry through a seeded [`TargetStyle`].

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Source-domain taxonomy of the toy world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneClass {
    Void = 0,
    Sky = 1,
    Road = 2,
    Building = 3,
    Car = 4,
    Pedestrian = 5,
}

impl SceneClass {
    pub const ALL: [SceneClass; 6] = [
        SceneClass::Void,
        SceneClass::Sky,
        SceneClass::Road,
        SceneClass::Building,
        SceneClass::Car,
        SceneClass::Pedestrian,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Void => "void",
            SceneClass::Sky => "sky",
            SceneClass::Road => "road",
            SceneClass::Building => "building",
            SceneClass::Car => "car",
            SceneClass::Pedestrian => "pedestrian",
        }
    }

    /// Countable classes that get instance annotations.
    pub fn is_thing(self) -> bool {
        matches!(self, SceneClass::Car | SceneClass::Pedestrian)
    }

    fn source_color(self) -> [u8; 3] {
        match self {
            SceneClass::Void => [0, 0, 0],
            SceneClass::Sky => [90, 160, 240],
            SceneClass::Road => [110, 110, 110],
            SceneClass::Building => [190, 130, 80],
            SceneClass::Car => [220, 40, 40],
            SceneClass::Pedestrian => [240, 210, 50],
        }
    }

    fn target_color(self) -> [u8; 3] {
        match self {
            SceneClass::Void => [20, 20, 20],
            SceneClass::Sky => [205, 215, 230],
            SceneClass::Road => [60, 66, 78],
            SceneClass::Building => [135, 150, 165],
            SceneClass::Car => [45, 80, 170],
            SceneClass::Pedestrian => [185, 70, 150],
        }
    }

    fn texture_gain(self) -> f64 {
        match self {
            SceneClass::Void => 0.0,
            SceneClass::Sky => 0.3,
            SceneClass::Road | SceneClass::Building => 1.0,
            SceneClass::Car | SceneClass::Pedestrian => 0.6,
        }
    }

    /// Depth range (meters) and size ranges (width, height in meters) used by the generator.
    fn sampling_ranges(self) -> ((f64, f64), (f64, f64), (f64, f64)) {
        match self {
            SceneClass::Building => ((20.0, 50.0), (8.0, 20.0), (6.0, 18.0)),
            SceneClass::Car => ((4.0, 30.0), (1.6, 2.0), (1.3, 1.6)),
            SceneClass::Pedestrian => ((4.0, 15.0), (0.5, 0.8), (1.5, 1.9)),
            _ => ((2.0, 50.0), (1.0, 1.0), (1.0, 1.0)),
        }
    }
}

/// Pinhole camera over a flat ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub focal_px: f64,
    pub baseline_m: f64,
    pub height_m: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { focal_px: 64.0, baseline_m: 0.5, height_m: 1.5 }
    }
}

impl Camera {
    pub fn disparity(&self, depth_m: f64) -> f64 {
        self.focal_px * self.baseline_m / depth_m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: SceneClass,
    /// Ground-plane position: lateral offset from the optical axis and depth, meters.
    pub lateral_m: f64,
    pub depth_m: f64,
    pub width_m: f64,
    pub height_m: f64,
}

pub const MIN_DEPTH_M: f64 = 2.0;
pub const MAX_DEPTH_M: f64 = 50.0;
pub const MAX_OBJECTS: usize = 8;
pub const HORIZON_RANGE: (f64, f64) = (0.2, 0.6);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Horizon position as a fraction of the image height.
    pub horizon_row: f64,
    pub objects: Vec<ObjectSpec>,
    pub camera: Camera,
}

/// Pixel-space rectangle `[u0, u1) x [v0, v1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Projection {
    u0: f64,
    u1: f64,
    v0: f64,
    v1: f64,
}

impl SceneSpec {
    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    fn horizon_px(&self) -> f64 {
        self.horizon_row * self.height() as f64
    }

    fn project(&self, o: &ObjectSpec) -> Projection {
        project(&self.camera, self.image_size, self.horizon_px(), o)
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Input("image size must be positive".into()));
        }
        if !(HORIZON_RANGE.0..=HORIZON_RANGE.1).contains(&self.horizon_row) {
            return Err(Error::Input(format!("horizon_row {} outside [0.2, 0.6]", self.horizon_row)));
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::Input(format!("{} objects exceed the maximum of {MAX_OBJECTS}", self.objects.len())));
        }
        let cam = &self.camera;
        if !(cam.focal_px > 0.0 && cam.baseline_m > 0.0 && cam.height_m > 0.0) {
            return Err(Error::Input("camera parameters must be positive".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(MIN_DEPTH_M..=MAX_DEPTH_M).contains(&o.depth_m) {
                return Err(Error::Input(format!("object {i} depth {} outside [2, 50] m", o.depth_m)));
            }
            if matches!(o.class, SceneClass::Sky | SceneClass::Road) {
                return Err(Error::Input(format!("object {i} has background class {}", o.class.name())));
            }
            let p = self.project(o);
            if p.u0 < 0.0 || p.v0 < 0.0 || p.u1 > w as f64 || p.v1 > h as f64 {
                return Err(Error::Input(format!("object {i} leaves the camera frustum")));
            }
        }
        Ok(())
    }
}

fn project(cam: &Camera, (_, w): (usize, usize), horizon_px: f64, o: &ObjectSpec) -> Projection {
    let f = cam.focal_px;
    let cx = w as f64 / 2.0;
    let uc = cx + f * o.lateral_m / o.depth_m;
    let half_w = f * o.width_m / o.depth_m / 2.0;
    let v1 = horizon_px + f * cam.height_m / o.depth_m;
    let v0 = v1 - f * o.height_m / o.depth_m;
    Projection { u0: uc - half_w, u1: uc + half_w, v0, v1 }
}

/// Generator settings shared by every scene of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// `[height, width]`.
    pub image_size: [usize; 2],
    /// Range the per-scene horizon fraction is drawn from.
    pub horizon_row: [f64; 2],
    pub max_objects: usize,
    pub camera: Camera,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: [64, 64],
            horizon_row: [0.35, 0.45],
            max_objects: MAX_OBJECTS,
            camera: Camera::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.horizon_row;
        if !(HORIZON_RANGE.0..=HORIZON_RANGE.1).contains(&lo) || !(HORIZON_RANGE.0..=HORIZON_RANGE.1).contains(&hi) {
            return Err(Error::Config(format!("horizon_row [{lo}, {hi}] must lie inside [0.2, 0.6]")));
        }
        if lo > hi {
            return Err(Error::Config(format!("horizon_row range [{lo}, {hi}] is reversed")));
        }
        if self.max_objects > MAX_OBJECTS {
            return Err(Error::Config(format!("max_objects {} exceeds {MAX_OBJECTS}", self.max_objects)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        let c = &self.camera;
        if !(c.focal_px > 0.0 && c.baseline_m > 0.0 && c.height_m > 0.0) {
            return Err(Error::Config("camera parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a scene layout. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = config.image_size;
    let [lo, hi] = config.horizon_row;
    let horizon_row = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let horizon_px = horizon_row * h as f64;
    let count = rng.random_range(0..=config.max_objects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let roll: f64 = rng.random();
        let class = if roll < 0.25 {
            SceneClass::Building
        } else if roll < 0.75 {
            SceneClass::Car
        } else {
            SceneClass::Pedestrian
        };
        let ((dmin, dmax), (wmin, wmax), (hmin, hmax)) = class.sampling_ranges();
        for _attempt in 0..32 {
            let depth_m = rng.random_range(dmin..dmax);
            let width_m = rng.random_range(wmin..wmax);
            let height_m = rng.random_range(hmin..hmax);
            let f = config.camera.focal_px;
            let cx = w as f64 / 2.0;
            let half_w = width_m / 2.0;
            // lateral interval keeping the billboard horizontally inside the frame
            let lat_lo = -cx * depth_m / f + half_w;
            let lat_hi = (w as f64 - cx) * depth_m / f - half_w;
            let lateral_m = rng.random_range(-1.0..1.0) * 0.5 * (lat_hi - lat_lo) + 0.5 * (lat_hi + lat_lo);
            let o = ObjectSpec { class, lateral_m, depth_m, width_m, height_m };
            let p = project(&config.camera, (h, w), horizon_px, &o);
            let fits = lat_lo < lat_hi && p.u0 >= 0.0 && p.u1 <= w as f64 && p.v0 >= 0.0 && p.v1 <= h as f64;
            if fits && p.u1 - p.u0 >= 1.0 && p.v1 - p.v0 >= 1.0 {
                objects.push(o);
                break;
            }
        }
    }
    let spec = SceneSpec { seed, image_size: (h, w), horizon_row, objects, camera: config.camera };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// Dense disparity in pixels; sky carries 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub class_id: u32,
    /// `[x0, y0, x1, y1]`, exclusive upper corner.
    pub bbox: [u32; 4],
    /// Row-major binary mask over the whole image.
    pub mask: Vec<bool>,
}

impl InstanceAnnotation {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGroundTruth {
    pub semantic: LabelMap,
    pub disparity: DisparityMap,
    pub instances: Vec<InstanceAnnotation>,
}

struct Layout {
    class: Vec<SceneClass>,
    depth: Vec<f64>,
    owner: Vec<Option<usize>>,
}

fn layout(spec: &SceneSpec) -> Layout {
    let (h, w) = spec.image_size;
    let horizon = spec.horizon_px();
    let cam = &spec.camera;
    let mut class = Vec::with_capacity(h * w);
    let mut depth = Vec::with_capacity(h * w);
    for r in 0..h {
        let v = r as f64 + 0.5;
        for _ in 0..w {
            if v <= horizon {
                class.push(SceneClass::Sky);
                depth.push(f64::INFINITY);
            } else {
                class.push(SceneClass::Road);
                depth.push(cam.focal_px * cam.height_m / (v - horizon));
            }
        }
    }
    let mut owner = vec![None; h * w];
    // painter's order: far to near, ties by index
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].depth_m.total_cmp(&spec.objects[a].depth_m).then(a.cmp(&b)));
    for idx in order {
        let o = &spec.objects[idx];
        let p = spec.project(o);
        for r in 0..h {
            let v = r as f64 + 0.5;
            if v < p.v0 || v >= p.v1 {
                continue;
            }
            for c in 0..w {
                let u = c as f64 + 0.5;
                if u >= p.u0 && u < p.u1 {
                    let i = r * w + c;
                    class[i] = o.class;
                    depth[i] = o.depth_m;
                    owner[i] = Some(idx);
                }
            }
        }
    }
    Layout { class, depth, owner }
}

fn ground_truth(spec: &SceneSpec, lay: &Layout) -> SceneGroundTruth {
    let (h, w) = spec.image_size;
    let semantic = LabelMap::new(h, w, lay.class.iter().map(|c| c.id()).collect()).expect("layout size");
    let data = lay
        .class
        .iter()
        .zip(&lay.depth)
        .map(|(c, &z)| if *c == SceneClass::Sky { 0.0 } else { spec.camera.disparity(z) as f32 })
        .collect();
    let mut instances = Vec::new();
    for (idx, o) in spec.objects.iter().enumerate() {
        if !o.class.is_thing() {
            continue;
        }
        let mask: Vec<bool> = lay.owner.iter().map(|&ow| ow == Some(idx)).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / w, i % w);
            x0 = x0.min(c);
            y0 = y0.min(r);
            x1 = x1.max(c + 1);
            y1 = y1.max(r + 1);
        }
        if x1 == 0 {
            continue; // fully occluded
        }
        instances.push(InstanceAnnotation {
            class_id: o.class.id(),
            bbox: [x0 as u32, y0 as u32, x1 as u32, y1 as u32],
            mask,
        });
    }
    SceneGroundTruth { semantic, disparity: DisparityMap { height: h, width: w, data }, instances }
}

/// Ground truth only, without rasterizing colors.
pub fn scene_ground_truth(spec: &SceneSpec) -> SceneGroundTruth {
    ground_truth(spec, &layout(spec))
}

/// Flat-shaded source-domain render with exact ground truth.
pub fn render_source(spec: &SceneSpec) -> (RgbImage, SceneGroundTruth) {
    let lay = layout(spec);
    let (h, w) = spec.image_size;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(lay.class[y as usize * w + x as usize].source_color()));
    (img, ground_truth(spec, &lay))
}

/// Appearance transform that separates the target domain from the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetStyle {
    /// Blend from source class colors (0) to the target palette (1).
    pub palette_mix: f64,
    /// Exponent applied to intensities in `[0, 1]`.
    pub gamma: f64,
    /// Amplitude of per-class luminance texture noise.
    pub texture_amplitude: f64,
    /// Darkening at the image corners.
    pub vignette: f64,
    /// Blend weight of a 3x3 box blur.
    pub edge_softening: f64,
}

impl Default for TargetStyle {
    fn default() -> Self {
        TargetStyle { palette_mix: 1.0, gamma: 1.4, texture_amplitude: 0.08, vignette: 0.35, edge_softening: 0.5 }
    }
}

impl TargetStyle {
    /// Only the gamma curve; the source/target relation is then monotone.
    pub fn gamma_only(gamma: f64) -> Self {
        TargetStyle { palette_mix: 0.0, gamma, texture_amplitude: 0.0, vignette: 0.0, edge_softening: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.palette_mix) && unit(self.vignette) && unit(self.edge_softening)) {
            return Err(Error::Config("palette_mix, vignette and edge_softening must lie in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.texture_amplitude >= 0.0) {
            return Err(Error::Config("gamma must be positive and texture_amplitude non-negative".into()));
        }
        Ok(())
    }
}

const STYLE_STREAM: u64 = 0x7a26_e7d0_5eed_0001;

/// Smooth-ish luminance noise in roughly `[-1, 1]`: bilinear value noise on a
/// 4-pixel lattice plus per-pixel grain.
fn texture_field(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STYLE_STREAM);
    const CELL: usize = 4;
    let (gh, gw) = (h / CELL + 2, w / CELL + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (fy, fx) = (r as f64 / CELL as f64, c as f64 / CELL as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            let coarse = top * (1.0 - ty) + bottom * ty;
            let grain: f64 = rng.random_range(-1.0..1.0);
            out.push(0.7 * coarse + 0.3 * grain);
        }
    }
    out
}

/// Target-domain render: same geometry, styled appearance, seeded by `spec.seed`.
pub fn render_target(spec: &SceneSpec, style: &TargetStyle) -> RgbImage {
    let lay = layout(spec);
    let (h, w) = spec.image_size;
    let noise = texture_field(spec.seed, h, w);
    let mut px: Vec<[f64; 3]> = lay
        .class
        .iter()
        .zip(&noise)
        .map(|(cls, &n)| {
            let s = cls.source_color();
            let t = cls.target_color();
            let shift = style.texture_amplitude * cls.texture_gain() * n;
            std::array::from_fn(|k| {
                let base = (1.0 - style.palette_mix) * s[k] as f64 + style.palette_mix * t[k] as f64;
                base / 255.0 + shift
            })
        })
        .collect();
    if style.edge_softening > 0.0 {
        let src = px.clone();
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for rr in r.saturating_sub(1)..(r + 2).min(h) {
                    for cc in c.saturating_sub(1)..(c + 2).min(w) {
                        let v = src[rr * w + cc];
                        (0..3).for_each(|k| acc[k] += v[k]);
                        n += 1.0;
                    }
                }
                let a = style.edge_softening;
                let p = &mut px[r * w + c];
                (0..3).for_each(|k| p[k] = (1.0 - a) * p[k] + a * acc[k] / n);
            }
        }
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = px[y as usize * w + x as usize];
        let dy = (y as f64 - cy) / cy.max(1.0);
        let dx = (x as f64 - cx) / cx.max(1.0);
        let falloff = 1.0 - style.vignette * (dx * dx + dy * dy) / 2.0;
        Rgb(std::array::from_fn(|k| {
            let v = p[k].clamp(0.0, 1.0).powf(style.gamma) * falloff;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Default lower bound on [`domain_gap`] for the shipped style.
pub const DOMAIN_GAP_FLOOR: f64 = 0.05;

/// Mean per-pixel absolute difference (intensities in `[0, 1]`) between the
/// source and target renders of `specs`.
pub fn domain_gap(specs: &[SceneSpec], style: &TargetStyle) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for spec in specs {
        let (src, _) = render_source(spec);
        let tgt = render_target(spec, style);
        for (a, b) in src.as_raw().iter().zip(tgt.as_raw()) {
            total += (*a as f64 - *b as f64).abs() / 255.0;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

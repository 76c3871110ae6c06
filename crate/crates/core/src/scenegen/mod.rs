//! Procedural multi-object scenes with exact ground truth.
//!
//! Objects are flat-colored shaded silhouettes composited front to back on
//! black. Every rendered intensity is a multiple of 1/255, so the 8-bit PNG
//! encoding of a rendered scene is lossless.

mod io;
pub mod shapes;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::ClassLabel;
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::{Image, Rgb};
use crate::mask::Mask;
use crate::seed::{stream_rng, Stream, StreamRng};

pub use io::{read_dataset, read_decoder_dataset, write_dataset, write_decoder_dataset};
pub use shapes::{ShapeClass, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub cls: ClassLabel,
    pub center: (f64, f64),
    /// Footprint half-size in pixels; see [`ShapeClass::half_extents`].
    pub scale: f64,
    /// Spin in degrees, `[0, 360)`.
    pub rotation: f64,
    /// 0 is frontmost.
    pub depth_rank: usize,
}

impl ObjectSpec {
    fn shape(&self) -> Result<ShapeClass> {
        ShapeClass::from_label(self.cls)
            .ok_or_else(|| Error::Config(format!("class {} outside 1..={NUM_CLASSES}", self.cls)))
    }

    /// Footprint half extents in pixels.
    pub fn half_extents_px(&self) -> Result<(f64, f64)> {
        let (hw, hh) = self.shape()?.half_extents(self.rotation);
        Ok((self.scale * hw, self.scale * hh))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub objects: Vec<ObjectSpec>,
    pub color: Rgb,
    pub amodal_masks: Vec<Mask>,
    pub visible_masks: Vec<Mask>,
    pub boxes: Vec<BoundingBox>,
    /// Set once the image has been resampled and can no longer be
    /// reproduced by rendering `objects`.
    pub resampled: bool,
}

impl GroundTruth {
    pub fn labels(&self) -> Vec<ClassLabel> {
        self.objects.iter().map(|o| o.cls).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub image: Image,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    /// Range of [`ObjectSpec::scale`].
    pub scale_range: (f64, f64),
    pub min_visible: usize,
    /// Minimum distance between object centers, pixels.
    pub min_separation: f64,
    /// Scene attempts before giving up.
    pub max_attempts: usize,
    /// Side of decoder training images.
    pub decoder_side: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: (200, 200),
            scale_range: (16.0, 24.0),
            min_visible: 200,
            min_separation: 0.3 * 50.0,
            max_attempts: 1000,
            decoder_side: 50,
        }
    }
}

/// Object-count composition of the validation and test sets, as
/// `(objects per scene, number of scenes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSizes {
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl Default for EvalSizes {
    fn default() -> Self {
        Self {
            validation: vec![(3, 250), (4, 250)],
            test: vec![(5, 150), (6, 150), (7, 200)],
        }
    }
}

impl EvalSizes {
    /// Scales every scene count by `factor`, rounding to nearest.
    pub fn scaled(factor: f64) -> Self {
        let f = |v: Vec<(usize, usize)>| {
            v.into_iter()
                .map(|(k, n)| (k, (n as f64 * factor).round() as usize))
                .collect()
        };
        let d = Self::default();
        Self {
            validation: f(d.validation),
            test: f(d.test),
        }
    }
}

fn to_level(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes one object: `(x, y, shade)` for every canvas pixel whose
/// center falls inside the silhouette.
fn rasterize(spec: &ObjectSpec, canvas: (usize, usize)) -> Result<Vec<(usize, usize, f64)>> {
    let shape = spec.shape()?;
    if !(spec.scale > 0.0 && spec.scale.is_finite()) || !spec.center.0.is_finite() || !spec.center.1.is_finite() {
        return Err(Error::DegeneratePlacement(format!("invalid geometry {spec:?}")));
    }
    let (hx, hy) = spec.half_extents_px()?;
    let (cx, cy) = spec.center;
    let (h, w) = canvas;
    let x_lo = (cx - hx).floor().max(0.0) as usize;
    let y_lo = (cy - hy).floor().max(0.0) as usize;
    let x_hi = ((cx + hx).ceil().max(0.0) as usize).min(w);
    let y_hi = ((cy + hy).ceil().max(0.0) as usize).min(h);
    let mut out = Vec::new();
    for y in y_lo..y_hi {
        let b = (y as f64 + 0.5 - cy) / hy;
        for x in x_lo..x_hi {
            let a = (x as f64 + 0.5 - cx) / hx;
            if let Some(s) = shape.shade(a, b) {
                out.push((x, y, s));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::DegeneratePlacement(format!(
            "class {} at ({cx:.1}, {cy:.1}) covers no canvas pixel",
            spec.cls
        )));
    }
    Ok(out)
}

/// Renders `specs` onto a black `canvas = (height, width)`.
pub fn render_scene(specs: &[ObjectSpec], color: Rgb, canvas: (usize, usize)) -> Result<(Image, GroundTruth)> {
    let (h, w) = canvas;
    let mut ranks: Vec<usize> = specs.iter().map(|s| s.depth_rank).collect();
    ranks.sort_unstable();
    if ranks.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::Config("depth ranks within a scene must be distinct".into()));
    }
    let mut amodal_masks = Vec::with_capacity(specs.len());
    let mut rasters = Vec::with_capacity(specs.len());
    for spec in specs {
        let px = rasterize(spec, canvas)?;
        let mut m = Mask::empty(h, w);
        for &(x, y, _) in &px {
            m.set(x, y, true);
        }
        amodal_masks.push(m);
        rasters.push(px);
    }
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by_key(|&i| specs[i].depth_rank);

    let mut image = Image::zeros(h, w);
    let mut painted = Mask::empty(h, w);
    let mut visible_masks = vec![Mask::empty(h, w); specs.len()];
    for i in order {
        for &(x, y, s) in &rasters[i] {
            if !painted.get(x, y) {
                painted.set(x, y, true);
                visible_masks[i].set(x, y, true);
                image.set_pixel(x, y, color.map(|c| to_level(c * s)));
            }
        }
    }
    let boxes = amodal_masks
        .iter()
        .map(|m| {
            let (x0, y0, x1, y1) = m.bounds().expect("rasterized object is non-empty");
            BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        image,
        GroundTruth {
            canvas,
            objects: specs.to_vec(),
            color,
            amodal_masks,
            visible_masks,
            boxes,
            resampled: false,
        },
    ))
}

/// Uniform on the unit cube conditioned on `r + g + b >= 1`, quantized to
/// 8-bit levels.
pub fn sample_color(rng: &mut impl Rng) -> Rgb {
    loop {
        let c: Rgb = [rng.random::<f64>(), rng.random(), rng.random()].map(to_level);
        if c.iter().sum::<f64>() >= 1.0 {
            return c;
        }
    }
}

fn sample_free_spec(rng: &mut impl Rng, cls: ClassLabel, cfg: &SceneConfig) -> Result<ObjectSpec> {
    let mut spec = ObjectSpec {
        cls,
        center: (0.0, 0.0),
        scale: rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
        rotation: rng.random_range(0.0..360.0),
        depth_rank: 0,
    };
    let (hx, hy) = spec.half_extents_px()?;
    let (h, w) = (cfg.canvas.0 as f64, cfg.canvas.1 as f64);
    if 2.0 * hx >= w || 2.0 * hy >= h {
        return Err(Error::Config(format!("objects of scale {} do not fit the canvas", spec.scale)));
    }
    spec.center = (rng.random_range(hx..w - hx), rng.random_range(hy..h - hy));
    Ok(spec)
}

fn fully_inside(spec: &ObjectSpec, canvas: (usize, usize)) -> Result<bool> {
    let (hx, hy) = spec.half_extents_px()?;
    let (cx, cy) = spec.center;
    Ok(cx - hx >= 0.0 && cy - hy >= 0.0 && cx + hx <= canvas.1 as f64 && cy + hy <= canvas.0 as f64)
}

fn separated(specs: &[ObjectSpec], min_sep: f64) -> bool {
    specs.iter().enumerate().all(|(i, a)| {
        specs[i + 1..].iter().all(|b| {
            let (dx, dy) = (a.center.0 - b.center.0, a.center.1 - b.center.1);
            dx.hypot(dy) >= min_sep
        })
    })
}

fn visible_enough(gt: &GroundTruth, min_visible: usize) -> bool {
    gt.visible_masks.iter().all(|m| m.count() >= min_visible)
}

/// Counters reported when the rejection budget runs out.
#[derive(Debug, Default)]
struct Rejections {
    placement: usize,
    separation: usize,
    overlap: usize,
    visibility: usize,
}

impl Rejections {
    fn exhausted(&self, attempts: usize, what: &str) -> Error {
        Error::RejectionBudget {
            attempts,
            detail: format!(
                "{what}: off-canvas {}, too close {}, no overlap {}, under-visible {}",
                self.placement, self.separation, self.overlap, self.visibility
            ),
        }
    }
}

fn assign_depths(specs: &mut [ObjectSpec], rng: &mut impl Rng) {
    let mut ranks: Vec<usize> = (0..specs.len()).collect();
    ranks.shuffle(rng);
    for (s, r) in specs.iter_mut().zip(ranks) {
        s.depth_rank = r;
    }
}

fn gen_pair_scene(rng: &mut StreamRng, labels: [ClassLabel; 2], cfg: &SceneConfig) -> Result<(Image, GroundTruth)> {
    let mut rej = Rejections::default();
    for _ in 0..cfg.max_attempts {
        let color = sample_color(rng);
        let first = sample_free_spec(rng, labels[0], cfg)?;
        let mut second = sample_free_spec(rng, labels[1], cfg)?;
        let (ax, ay) = first.half_extents_px()?;
        let (bx, by) = second.half_extents_px()?;
        // Offset within the sum of half extents so the footprints can touch.
        second.center = (
            first.center.0 + rng.random_range(-(ax + bx)..=ax + bx),
            first.center.1 + rng.random_range(-(ay + by)..=ay + by),
        );
        if !fully_inside(&second, cfg.canvas)? {
            rej.placement += 1;
            continue;
        }
        let mut specs = vec![first, second];
        if !separated(&specs, cfg.min_separation) {
            rej.separation += 1;
            continue;
        }
        assign_depths(&mut specs, rng);
        let (image, gt) = render_scene(&specs, color, cfg.canvas)?;
        if !gt.amodal_masks[0].intersects(&gt.amodal_masks[1]) {
            rej.overlap += 1;
            continue;
        }
        if !visible_enough(&gt, cfg.min_visible) {
            rej.visibility += 1;
            continue;
        }
        return Ok((image, gt));
    }
    Err(rej.exhausted(cfg.max_attempts, &format!("pair {labels:?}")))
}

fn gen_multi_scene(rng: &mut StreamRng, n_objects: usize, cfg: &SceneConfig) -> Result<(Image, GroundTruth)> {
    let mut rej = Rejections::default();
    for _ in 0..cfg.max_attempts {
        let color = sample_color(rng);
        let mut specs = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let cls = rng.random_range(1..=NUM_CLASSES);
            specs.push(sample_free_spec(rng, cls, cfg)?);
        }
        if !separated(&specs, cfg.min_separation) {
            rej.separation += 1;
            continue;
        }
        assign_depths(&mut specs, rng);
        let (image, gt) = render_scene(&specs, color, cfg.canvas)?;
        if !visible_enough(&gt, cfg.min_visible) {
            rej.visibility += 1;
            continue;
        }
        return Ok((image, gt));
    }
    Err(rej.exhausted(cfg.max_attempts, &format!("{n_objects}-object scene")))
}

// Dataset families draw from disjoint index ranges of the dataset stream.
const PAIRS_BASE: u64 = 0;
const VALIDATION_BASE: u64 = 1 << 40;
const TEST_BASE: u64 = 2 << 40;
const SHUFFLE_INDEX: u64 = u64::MAX;

/// Two-object scenes with each class appearing exactly `n_per_class` times.
pub fn gen_pairs_dataset(seed: u64, n_per_class: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let mut labels: Vec<ClassLabel> = (1..=NUM_CLASSES)
        .flat_map(|c| std::iter::repeat_n(c, n_per_class))
        .collect();
    labels.shuffle(&mut stream_rng(seed, Stream::Dataset, SHUFFLE_INDEX));
    labels
        .par_chunks(2)
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = stream_rng(seed, Stream::Dataset, PAIRS_BASE + i as u64);
            let (image, gt) = gen_pair_scene(&mut rng, [pair[0], pair[1]], cfg)?;
            Ok(Scene { id: i, image, gt })
        })
        .collect()
}

fn gen_multi_set(seed: u64, base: u64, sizes: &[(usize, usize)], cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let counts: Vec<usize> = sizes
        .iter()
        .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
        .collect();
    counts
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut rng = stream_rng(seed, Stream::Dataset, base + i as u64);
            let (image, gt) = gen_multi_scene(&mut rng, k, cfg)?;
            Ok(Scene { id: i, image, gt })
        })
        .collect()
}

/// Validation and test scene sets with the given object-count composition.
pub fn gen_eval_sets(seed: u64, sizes: &EvalSizes, cfg: &SceneConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok((
        gen_multi_set(seed, VALIDATION_BASE, &sizes.validation, cfg)?,
        gen_multi_set(seed, TEST_BASE, &sizes.test, cfg)?,
    ))
}

/// Renders `spec` alone, centered and isotropically rescaled so its larger
/// footprint side spans the `side x side` frame.
pub fn render_isolated(spec: &ObjectSpec, color: Rgb, side: usize) -> Result<Image> {
    let (hw, hh) = spec.shape()?.half_extents(spec.rotation);
    let half = side as f64 / 2.0;
    let centered = ObjectSpec {
        center: (half, half),
        scale: (half - 0.05) / hw.max(hh),
        depth_rank: 0,
        ..spec.clone()
    };
    Ok(render_scene(&[centered], color, (side, side))?.0)
}

/// Per-class decoder training images: every object of every scene, in
/// scene order.
pub fn gen_decoder_dataset(scenes: &[Scene], side: usize) -> Result<BTreeMap<ClassLabel, Vec<Image>>> {
    let rendered: Vec<Vec<(ClassLabel, Image)>> = scenes
        .par_iter()
        .map(|s| {
            s.gt.objects
                .iter()
                .map(|o| Ok((o.cls, render_isolated(o, s.gt.color, side)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<ClassLabel, Vec<Image>> = BTreeMap::new();
    for (cls, img) in rendered.into_iter().flatten() {
        out.entry(cls).or_default().push(img);
    }
    Ok(out)
}

/// Re-renders every scene with each object's spin advanced by `degrees`.
pub fn perturb_rotate(scenes: &[Scene], degrees: f64) -> Result<Vec<Scene>> {
    let delta = degrees.rem_euclid(360.0);
    if delta == 0.0 {
        return Ok(scenes.to_vec());
    }
    scenes
        .par_iter()
        .map(|s| {
            if s.gt.resampled {
                return Err(Error::Config(format!("scene {} was resampled and cannot be re-rendered", s.id)));
            }
            let specs: Vec<ObjectSpec> = s
                .gt
                .objects
                .iter()
                .map(|o| ObjectSpec {
                    rotation: (o.rotation + delta).rem_euclid(360.0),
                    ..o.clone()
                })
                .collect();
            let (image, gt) = render_scene(&specs, s.gt.color, s.gt.canvas)?;
            Ok(Scene { id: s.id, image, gt })
        })
        .collect()
}

/// Crops a `crop_side` square holding every object and upsamples it back to
/// the canvas size, enlarging all objects by `canvas / crop_side`.
pub fn perturb_enlarge(scenes: &[Scene], crop_side: usize) -> Result<Vec<Scene>> {
    scenes.par_iter().map(|s| enlarge_scene(s, crop_side)).collect()
}

fn enlarge_scene(scene: &Scene, crop: usize) -> Result<Scene> {
    let (h, w) = scene.gt.canvas;
    if h != w {
        return Err(Error::Config(format!("enlarging needs a square canvas, got {h}x{w}")));
    }
    if crop == 0 || crop > h {
        return Err(Error::Config(format!("crop side {crop} outside 1..={h}")));
    }
    let mut union = Mask::empty(h, w);
    for m in &scene.gt.amodal_masks {
        for (x, y) in m.iter() {
            union.set(x, y, true);
        }
    }
    let Some((x0, y0, x1, y1)) = union.bounds() else {
        return Ok(scene.clone());
    };
    if x1 - x0 > crop || y1 - y0 > crop {
        return Err(Error::DegeneratePlacement(format!(
            "scene {}: objects span {}x{}, wider than the {crop} crop",
            scene.id,
            x1 - x0,
            y1 - y0
        )));
    }
    // Window origin: as centered on the objects as the canvas allows.
    let place = |lo: usize, hi: usize| -> usize {
        let want = ((lo + hi) as f64 / 2.0 - crop as f64 / 2.0).round().max(0.0) as usize;
        want.clamp(hi.saturating_sub(crop), lo.min(h - crop))
    };
    let (ox, oy) = (place(x0, x1), place(y0, y1));
    let f = h as f64 / crop as f64;

    let image = scene.image.resample_window(ox as f64, oy as f64, crop as f64, h, w);
    let nearest = |m: &Mask| {
        Mask::from_fn(h, w, |x, y| {
            let sx = ox + ((x as f64 + 0.5) / f) as usize;
            let sy = oy + ((y as f64 + 0.5) / f) as usize;
            m.get(sx.min(w - 1), sy.min(h - 1))
        })
    };
    let origin = (ox as f64, oy as f64);
    let gt = GroundTruth {
        canvas: (h, w),
        objects: scene
            .gt
            .objects
            .iter()
            .map(|o| ObjectSpec {
                center: ((o.center.0 - origin.0) * f, (o.center.1 - origin.1) * f),
                scale: o.scale * f,
                ..o.clone()
            })
            .collect(),
        color: scene.gt.color,
        amodal_masks: scene.gt.amodal_masks.iter().map(nearest).collect(),
        visible_masks: scene.gt.visible_masks.iter().map(nearest).collect(),
        boxes: scene
            .gt
            .boxes
            .iter()
            .map(|b| b.affine(origin, f))
            .collect::<Result<_>>()?,
        resampled: crop != h,
    };
    Ok(Scene {
        id: scene.id,
        image,
        gt,
    })
}

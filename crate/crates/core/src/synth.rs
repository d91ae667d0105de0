//! Procedural false-colour scenes with ground truth.
//!
//! Each scene is a light background covered by translucent clutter strokes,
//! with one or more objects drawn on top. Every class has its own parametric
//! silhouette and palette; instances are jittered in size, rotation (up to
//! 15 degrees) and hue. An anomalous object carries one to three small dark
//! blobs placed strictly inside its silhouette. Pixels are quantised to 8 bits
//! so a scene survives a PNG round trip unchanged.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Annotation, AnomalyLabel, BoundingBox, Image, ImageRecord, ObjectClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// (height, width) in pixels.
    pub image_size: [usize; 2],
    /// Inclusive range of objects requested per scene.
    pub objects_per_image: [usize; 2],
    pub class_weights: [f64; 6],
    pub anomaly_rate: f64,
    pub clutter_density: f64,
    pub seed: u64,
    /// Range of the longer object side in pixels, before per-class scaling.
    pub object_size: [f64; 2],
    /// Largest silhouette IoU allowed between any two objects.
    pub overlap_budget: f64,
    /// Blend weight of anomaly blobs over the object colour, in (0, 1].
    pub anomaly_contrast: f64,
    /// Mean number of blob-like specks scattered in the clutter, away from
    /// every object.
    pub distractor_rate: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: [128, 128],
            objects_per_image: [1, 3],
            class_weights: [1.0; 6],
            anomaly_rate: 0.3,
            clutter_density: 0.5,
            seed: 0,
            object_size: [30.0, 52.0],
            overlap_budget: 0.3,
            anomaly_contrast: 0.85,
            distractor_rate: 1.5,
            noise: 0.015,
        }
    }
}

pub const PLACEMENT_ATTEMPTS: usize = 100;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene config: {m}")));
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return bad(format!("image_size must be at least 16x16, got {h}x{w}"));
        }
        let [lo, hi] = self.objects_per_image;
        if lo < 1 || lo > hi {
            return bad(format!("objects_per_image must satisfy 1 <= min <= max, got [{lo}, {hi}]"));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class_weights must be non-negative and not all zero".into());
        }
        for (name, v) in [
            ("anomaly_rate", self.anomaly_rate),
            ("clutter_density", self.clutter_density),
            ("overlap_budget", self.overlap_budget),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.anomaly_contrast > 0.0 && self.anomaly_contrast <= 1.0) {
            return bad(format!("anomaly_contrast must lie in (0, 1], got {}", self.anomaly_contrast));
        }
        let [slo, shi] = self.object_size;
        if !(4.0 <= slo && slo <= shi) {
            return bad(format!("object_size must satisfy 4 <= min <= max, got [{slo}, {shi}]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative".into());
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate <= 10.0) {
            return bad(format!("distractor_rate must lie in [0, 10], got {}", self.distractor_rate));
        }
        Ok(())
    }
}

/// Bookkeeping for one generated scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub requested: usize,
    pub placed: usize,
}

pub fn scene_id(index: u64) -> String {
    format!("scene_{index:05}")
}

struct Placed {
    class: ObjectClass,
    mask: Vec<bool>,
    area: usize,
    bbox: BoundingBox,
    anomalous: bool,
}

/// Object frame: centre, half extents and rotation.
#[derive(Debug, Clone, Copy)]
struct Frame {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Frame {
    /// Normalised object coordinates of the pixel centre `(x, y)`.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            (self.cos * dx + self.sin * dy) / self.a,
            (-self.sin * dx + self.cos * dy) / self.b,
        )
    }

    fn extent(&self) -> (f64, f64) {
        (
            self.a * self.cos.abs() + self.b * self.sin.abs(),
            self.a * self.sin.abs() + self.b * self.cos.abs(),
        )
    }
}

fn rounded_rect(u: f64, v: f64, cu: f64, cv: f64, hw: f64, hh: f64, r: f64) -> bool {
    let (du, dv) = ((u - cu).abs(), (v - cv).abs());
    if du > hw || dv > hh {
        return false;
    }
    let (qx, qy) = (du - (hw - r), dv - (hh - r));
    qx <= 0.0 || qy <= 0.0 || qx * qx + qy * qy <= r * r
}

/// (width / height aspect, size multiplier, base colour) per class.
fn class_style(class: ObjectClass) -> (f64, f64, [f64; 3]) {
    match class {
        ObjectClass::Bottle => (0.42, 1.0, [0.96, 0.62, 0.18]),
        ObjectClass::Hairdryer => (1.1, 1.0, [0.22, 0.66, 0.78]),
        ObjectClass::Iron => (1.5, 1.0, [0.30, 0.42, 0.90]),
        ObjectClass::Toaster => (1.3, 0.9, [0.32, 0.76, 0.38]),
        ObjectClass::Mobile => (0.52, 0.7, [0.55, 0.35, 0.80]),
        ObjectClass::Laptop => (1.45, 1.15, [0.86, 0.78, 0.30]),
    }
}

/// Silhouette membership and interior shading factor at normalised `(u, v)`.
fn motif(class: ObjectClass, u: f64, v: f64) -> Option<f64> {
    let inside = match class {
        ObjectClass::Bottle => {
            rounded_rect(u, v, 0.0, 0.25, 1.0, 0.75, 0.55)
                || rounded_rect(u, v, 0.0, -0.68, 0.36, 0.3, 0.05)
                || rounded_rect(u, v, 0.0, -0.93, 0.46, 0.07, 0.02)
        }
        ObjectClass::Hairdryer => {
            rounded_rect(u, v, 0.0, -0.5, 1.0, 0.42, 0.4) || rounded_rect(u, v, 0.28, 0.35, 0.24, 0.65, 0.2)
        }
        ObjectClass::Iron => {
            let sole = (0.05..=1.0).contains(&v) && u <= 1.0 && u >= -1.0 + 0.95 * (1.0 - v);
            let handle = rounded_rect(u, v, 0.35, -0.5, 0.6, 0.5, 0.25) && !rounded_rect(u, v, 0.35, -0.42, 0.38, 0.3, 0.1);
            sole || handle
        }
        ObjectClass::Toaster => rounded_rect(u, v, 0.0, 0.0, 1.0, 1.0, 0.35),
        ObjectClass::Mobile => rounded_rect(u, v, 0.0, 0.0, 1.0, 1.0, 0.3),
        ObjectClass::Laptop => rounded_rect(u, v, 0.0, 0.0, 1.0, 1.0, 0.08),
    };
    if !inside {
        return None;
    }
    let shade = match class {
        ObjectClass::Bottle => {
            if (0.05..0.45).contains(&v) {
                0.78
            } else {
                1.0
            }
        }
        ObjectClass::Hairdryer => {
            if u < -0.72 && v < 0.0 {
                0.7
            } else {
                1.0
            }
        }
        ObjectClass::Iron => {
            if v > 0.8 {
                0.75
            } else {
                1.0
            }
        }
        ObjectClass::Toaster => {
            let slot = (-0.82..=-0.58).contains(&v) && ((-0.75..=-0.12).contains(&u) || (0.12..=0.75).contains(&u));
            if slot {
                0.55
            } else {
                1.0
            }
        }
        ObjectClass::Mobile => {
            if u.abs() <= 0.75 && (-0.82..=0.62).contains(&v) {
                0.72
            } else {
                1.0
            }
        }
        ObjectClass::Laptop => {
            let keys = u.abs() <= 0.85
                && (-0.3..=0.45).contains(&v)
                && (((u + 1.0) * 7.0).fract() < 0.25 || ((v + 1.0) * 6.0).fract() < 0.25);
            let pad = rounded_rect(u, v, 0.0, 0.72, 0.28, 0.16, 0.05);
            if keys || pad {
                0.8
            } else {
                1.0
            }
        }
    };
    Some(shade)
}

fn blend(px: [f32; 3], rgb: [f64; 3], alpha: f64) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (px[c] as f64 * (1.0 - alpha) + rgb[c] * alpha) as f32;
    }
    out
}

const CLUTTER_PALETTE: [[f64; 3]; 5] = [
    [0.95, 0.70, 0.35],
    [0.55, 0.80, 0.45],
    [0.55, 0.70, 0.95],
    [0.60, 0.60, 0.60],
    [0.85, 0.55, 0.75],
];

fn draw_clutter(img: &mut Image, config: &SceneConfig, rng: &mut ChaCha8Rng) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let strokes = (config.clutter_density * 16.0).round() as usize;
    for _ in 0..strokes {
        let colour = CLUTTER_PALETTE[rng.gen_range(0..CLUTTER_PALETTE.len())];
        let alpha = rng.gen_range(0.10..0.28);
        let (x0, y0) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let len = rng.gen_range(0.15..0.6) * w.max(h);
        let half_thick = rng.gen_range(1.0..4.0);
        let (dx, dy) = (angle.cos(), angle.sin());
        let (x1, y1) = (x0 + dx * len, y0 + dy * len);
        let (xmin, xmax) = (x0.min(x1) - half_thick, x0.max(x1) + half_thick);
        let (ymin, ymax) = (y0.min(y1) - half_thick, y0.max(y1) + half_thick);
        for y in (ymin.max(0.0) as usize)..(ymax.min(h - 1.0).max(0.0) as usize + 1) {
            for x in (xmin.max(0.0) as usize)..(xmax.min(w - 1.0).max(0.0) as usize + 1) {
                let (px, py) = (x as f64 + 0.5 - x0, y as f64 + 0.5 - y0);
                let t = (px * dx + py * dy).clamp(0.0, len);
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= half_thick * half_thick {
                    let p = img.pixel(y, x);
                    img.set_pixel(y, x, blend(p, colour, alpha));
                }
            }
        }
    }
    let bags = (config.clutter_density * 4.0).round() as usize;
    for _ in 0..bags {
        let colour = CLUTTER_PALETTE[rng.gen_range(0..CLUTTER_PALETTE.len())];
        let alpha = rng.gen_range(0.08..0.18);
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let (rx, ry) = (rng.gen_range(0.1..0.35) * w, rng.gen_range(0.1..0.35) * h);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if u * u + v * v <= 1.0 {
                    let p = img.pixel(y, x);
                    img.set_pixel(y, x, blend(p, colour, alpha));
                }
            }
        }
    }
}

/// Tries to place one object; returns its frame and silhouette mask.
fn place(
    class: ObjectClass,
    config: &SceneConfig,
    placed: &[Placed],
    rng: &mut ChaCha8Rng,
) -> Option<(Frame, Vec<bool>, usize, BoundingBox)> {
    let [h, w] = config.image_size;
    let (aspect, mult, _) = class_style(class);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let long = rng.gen_range(config.object_size[0]..=config.object_size[1]) * mult;
        let long = long.min(0.9 * h.min(w) as f64);
        let (a, b) = if aspect >= 1.0 {
            (0.5 * long, 0.5 * long / aspect)
        } else {
            (0.5 * long * aspect, 0.5 * long)
        };
        let theta = rng.gen_range(-15.0f64..=15.0).to_radians();
        let mut frame = Frame {
            cx: 0.0,
            cy: 0.0,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let (ex, ey) = frame.extent();
        if 2.0 * ex + 2.0 >= w as f64 || 2.0 * ey + 2.0 >= h as f64 {
            continue;
        }
        frame.cx = rng.gen_range(ex + 1.0..w as f64 - ex - 1.0);
        frame.cy = rng.gen_range(ey + 1.0..h as f64 - ey - 1.0);
        let mut mask = vec![false; h * w];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        let ys = ((frame.cy - ey).floor().max(0.0) as usize)..((frame.cy + ey).ceil() as usize + 1).min(h);
        let xs = ((frame.cx - ex).floor().max(0.0) as usize)..((frame.cx + ex).ceil() as usize + 1).min(w);
        for y in ys {
            for x in xs.clone() {
                let (u, v) = frame.local(x as f64 + 0.5, y as f64 + 0.5);
                if motif(class, u, v).is_some() {
                    mask[y * w + x] = true;
                    area += 1;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if area == 0 {
            continue;
        }
        let overlaps = placed.iter().any(|p| {
            let inter = p.mask.iter().zip(&mask).filter(|(a, b)| **a && **b).count();
            let union = p.area + area - inter;
            inter as f64 / union as f64 > config.overlap_budget
        });
        if overlaps {
            continue;
        }
        let bbox = BoundingBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        };
        return Some((frame, mask, area, bbox));
    }
    None
}

/// Paints one dark disc centred in `region` whose pixels, plus a one-pixel
/// margin, all satisfy `allowed`. Returns false when no spot was found.
fn draw_blob(
    img: &mut Image,
    region: &BoundingBox,
    allowed: impl Fn(usize, usize) -> bool,
    contrast: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let w = img.width();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r: f64 = rng.gen_range(1.6..2.8);
        let cx = rng.gen_range(region.x_min..region.x_max);
        let cy = rng.gen_range(region.y_min..region.y_max);
        let reach = r + 1.0;
        let xs = ((cx - reach).floor().max(0.0) as usize)..((cx + reach).ceil() as usize + 1).min(w);
        let ys = ((cy - reach).floor().max(0.0) as usize)..((cy + reach).ceil() as usize + 1).min(img.height());
        let disc: Vec<(usize, usize, bool)> = ys
            .flat_map(|y| xs.clone().map(move |x| (y, x)))
            .filter_map(|(y, x)| {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                (d2 <= reach * reach).then_some((y, x, d2 <= r * r))
            })
            .collect();
        if disc.iter().any(|&(y, x, _)| !allowed(y, x)) || !disc.iter().any(|d| d.2) {
            continue;
        }
        for (y, x, core) in disc {
            if core {
                let p = img.pixel(y, x);
                img.set_pixel(y, x, blend(p, [0.03, 0.03, 0.06], contrast));
            }
        }
        return true;
    }
    false
}

/// Paints 1-3 blobs inside the silhouette `mask`; returns how many landed.
fn draw_blobs(img: &mut Image, mask: &[bool], bbox: &BoundingBox, contrast: f64, rng: &mut ChaCha8Rng) -> usize {
    let w = img.width();
    let count = rng.gen_range(1..=3);
    (0..count)
        .filter(|_| draw_blob(img, bbox, |y, x| mask[y * w + x], contrast, rng))
        .count()
}

/// Scatters blob-like specks over the background, keeping clear of every
/// object box grown by a fifth of its size.
fn draw_distractors(img: &mut Image, placed: &[Placed], config: &SceneConfig, rng: &mut ChaCha8Rng) {
    if config.distractor_rate <= 0.0 {
        return;
    }
    let count = Poisson::new(config.distractor_rate).expect("validated rate").sample(rng) as usize;
    let keep_out: Vec<BoundingBox> = placed
        .iter()
        .map(|p| {
            let (mx, my) = (0.2 * p.bbox.width() + 1.0, 0.2 * p.bbox.height() + 1.0);
            BoundingBox {
                x_min: p.bbox.x_min - mx,
                y_min: p.bbox.y_min - my,
                x_max: p.bbox.x_max + mx,
                y_max: p.bbox.y_max + my,
            }
        })
        .collect();
    let free = |y: usize, x: usize| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        !keep_out
            .iter()
            .any(|b| px >= b.x_min && px <= b.x_max && py >= b.y_min && py <= b.y_max)
    };
    let region = BoundingBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: img.width() as f64,
        y_max: img.height() as f64,
    };
    for _ in 0..count {
        draw_blob(img, &region, &free, config.anomaly_contrast, rng);
    }
}

/// Deterministic scene `index` of the configured family, with placement bookkeeping.
pub fn generate_scene_with_meta(config: &SceneConfig, index: u64) -> Result<(ImageRecord, SceneMeta)> {
    config.validate()?;
    let [h, w] = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let mut img = Image::filled(h, w, [0.94, 0.93, 0.88]);
    draw_clutter(&mut img, config, &mut rng);

    let requested = rng.gen_range(config.objects_per_image[0]..=config.objects_per_image[1]);
    let classes = WeightedIndex::new(config.class_weights).expect("validated weights");
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..requested {
        let class = ObjectClass::ALL[classes.sample(&mut rng)];
        let anomalous = rng.gen_bool(config.anomaly_rate);
        let Some((frame, mask, area, bbox)) = place(class, config, &placed, &mut rng) else {
            continue;
        };
        let (_, _, base) = class_style(class);
        let colour: [f64; 3] = base.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        for y in (bbox.y_min as usize)..(bbox.y_max as usize) {
            for x in (bbox.x_min as usize)..(bbox.x_max as usize) {
                if !mask[y * w + x] {
                    continue;
                }
                let (u, v) = frame.local(x as f64 + 0.5, y as f64 + 0.5);
                let shade = motif(class, u, v).unwrap_or(1.0);
                let p = img.pixel(y, x);
                img.set_pixel(y, x, blend(p, colour.map(|c| c * shade), 0.88));
            }
        }
        placed.push(Placed {
            class,
            mask,
            area,
            bbox,
            anomalous,
        });
    }

    let mut annotations = Vec::with_capacity(placed.len());
    for p in &placed {
        let anomalous = p.anomalous && draw_blobs(&mut img, &p.mask, &p.bbox, config.anomaly_contrast, &mut rng) > 0;
        annotations.push(Annotation {
            bbox: p.bbox,
            object_class: p.class,
            anomaly: AnomalyLabel::from_flag(anomalous),
        });
    }
    draw_distractors(&mut img, &placed, config, &mut rng);

    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("finite noise");
        for v in img.data_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    img.quantize();
    let id = scene_id(index);
    let meta = SceneMeta {
        id: id.clone(),
        requested,
        placed: placed.len(),
    };
    Ok((ImageRecord { id, image: img, annotations }, meta))
}

pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<ImageRecord> {
    Ok(generate_scene_with_meta(config, index)?.0)
}

/// Written beside the manifest by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub config: SceneConfig,
    pub start_index: u64,
    pub count: u64,
    /// Scenes that received fewer objects than requested.
    pub shortfalls: Vec<SceneMeta>,
}

pub const GENERATION_META_FILE: &str = "generation.json";

fn check_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Scenes `indices` written to `out` in manifest form. Returns the manifest path.
pub fn generate_dataset_range(config: &SceneConfig, indices: Range<u64>, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    check_writable(out)?;
    let mut records = Vec::with_capacity((indices.end.saturating_sub(indices.start)) as usize);
    let mut shortfalls = Vec::new();
    for i in indices.clone() {
        let (rec, meta) = generate_scene_with_meta(config, i)?;
        if meta.placed < meta.requested {
            shortfalls.push(meta);
        }
        records.push(rec);
    }
    let manifest = write_dataset(&records, out)?;
    let meta = GenerationMeta {
        config: config.clone(),
        start_index: indices.start,
        count: indices.end.saturating_sub(indices.start),
        shortfalls,
    };
    crate::io::write_json(&out.join(GENERATION_META_FILE), &meta)?;
    Ok(manifest)
}

/// `count` scenes starting at index 0.
pub fn generate_dataset(config: &SceneConfig, count: u64, out: &Path) -> Result<PathBuf> {
    generate_dataset_range(config, 0..count, out)
}

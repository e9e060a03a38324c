//! Seeded procedural scenes with a controllable photometric domain gap,
//! dataset generation, stratified subsampling, 50:50 splitting and mosaic
//! composition.
//!
//! A scene is a soft vertical-gradient background with 1..max_objects
//! colored shape objects; each class has a fixed shape template and palette
//! hue, standing in for visually distinct object categories. Scene layout is
//! drawn from one RNG substream and the photometric pass (brightness shift
//! plus Gaussian noise) from another, so two profiles rendered from the same
//! seed contain identical geometry and annotations and differ only
//! photometrically. Noise deviates are drawn even when sigma is zero to keep
//! the substreams aligned across profiles.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{self, Manifest, ManifestEntry};
use crate::geometry::BBox;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_CLASSES: usize = 7;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_MAX_OBJECTS: usize = 4;

/// Class labels for the default 7-class setup (protective-equipment roles).
pub const CLASS_NAMES: [&str; 7] = [
    "head",
    "helmet",
    "ear-protection",
    "welding-mask",
    "bare-chest",
    "vest",
    "person",
];

pub fn class_name(classes: usize, idx: usize) -> String {
    if classes == CLASS_NAMES.len() {
        CLASS_NAMES[idx].to_string()
    } else {
        format!("class{idx}")
    }
}

/// Relative instance frequencies. The default 7-class set is deliberately
/// imbalanced (helmet most frequent, ear protection least); other class
/// counts taper linearly.
pub fn class_weights(classes: usize) -> Vec<f64> {
    match classes {
        7 => vec![1.5, 3.0, 0.4, 0.8, 1.0, 1.8, 2.2],
        1 => vec![1.0],
        k => (0..k)
            .map(|i| 2.0 - 1.5 * i as f64 / (k - 1) as f64)
            .collect(),
    }
}

/// Photometric rendering profile; the knob that creates the domain gap.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProfile {
    pub name: String,
    /// Mean luminance offset in [-0.5, 0.5].
    pub brightness: f64,
    /// Additive Gaussian noise sigma in [0, 0.2].
    pub noise_sigma: f64,
    /// Palette hue rotation in degrees.
    pub palette_shift: f64,
}

impl DomainProfile {
    pub fn virtual_default() -> Self {
        DomainProfile {
            name: "virtual".into(),
            brightness: -0.25,
            noise_sigma: 0.05,
            palette_shift: 0.0,
        }
    }

    pub fn real_default() -> Self {
        DomainProfile {
            name: "real".into(),
            brightness: 0.0,
            noise_sigma: 0.1,
            palette_shift: 0.0,
        }
    }

    /// Flat profile for auxiliary pretraining data.
    pub fn neutral() -> Self {
        DomainProfile {
            name: "neutral".into(),
            brightness: 0.0,
            noise_sigma: 0.0,
            palette_shift: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "virtual" => Ok(Self::virtual_default()),
            "real" => Ok(Self::real_default()),
            "neutral" => Ok(Self::neutral()),
            other => Err(Error::config(format!(
                "unknown profile {other:?} (expected virtual, real or neutral)"
            ))),
        }
    }

    pub fn with_brightness(mut self, brightness: f64) -> Self {
        self.brightness = brightness;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(-0.5..=0.5).contains(&self.brightness) {
            return Err(Error::config(format!(
                "brightness {} outside [-0.5, 0.5]",
                self.brightness
            )));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(Error::config(format!(
                "noise sigma {} outside [0, 0.2]",
                self.noise_sigma
            )));
        }
        if !self.palette_shift.is_finite() {
            return Err(Error::config("palette shift must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// H x W x 3, values in [0,1].
    pub image: Tensor,
    pub annotations: Vec<(usize, BBox)>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Diamond,
    Cross,
    Bar,
}

const SHAPES: [Shape; 7] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Ring,
    Shape::Diamond,
    Shape::Cross,
    Shape::Bar,
];

impl Shape {
    /// Membership test in local box coordinates u, v in [-1, 1].
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => true,
            Shape::Triangle => u.abs() <= (v + 1.0) / 2.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Bar => v.abs() <= 0.45,
        }
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Palette hue per class: golden-angle spacing keeps any class count spread
/// around the wheel. Saturation/value are chosen so every RGB channel stays
/// well inside [0,1], which keeps brightness shifts nearly clip-free.
fn class_color(class: usize, palette_shift: f64, value_jitter: f64) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_749_895).fract() * 360.0 + palette_shift;
    hsv_to_rgb(hue, 0.65, 0.75 + value_jitter)
}

struct ObjectDraw {
    class: usize,
    bbox: BBox,
    value_jitter: f64,
}

/// Generate one labeled scene. Identical (seed, profile, arguments) give
/// bit-identical output.
pub fn generate_scene(
    seed: u64,
    profile: &DomainProfile,
    classes: usize,
    max_objects: usize,
    size: usize,
) -> Result<Scene> {
    generate_scene_with(seed, profile, classes, max_objects, size, 0)
}

/// As [`generate_scene`], but class `i` is drawn with the glyph normally used
/// for class `i + shape_offset`. A nonzero offset yields a related task with
/// disjoint shape/label pairing, useful for generic pretraining.
pub fn generate_scene_with(
    seed: u64,
    profile: &DomainProfile,
    classes: usize,
    max_objects: usize,
    size: usize,
    shape_offset: usize,
) -> Result<Scene> {
    if classes == 0 || max_objects == 0 || size == 0 {
        return Err(Error::config(
            "classes, max_objects and size must be positive",
        ));
    }
    profile.validate()?;

    // Substream 0: scene layout. Draw order is part of the format; never
    // reorder without bumping every golden expectation.
    let mut layout = Rng::new(derive_seed(seed, 0));
    let base = 0.40 + 0.18 * layout.uniform();
    let tint = [
        0.05 * (2.0 * layout.uniform() - 1.0),
        0.05 * (2.0 * layout.uniform() - 1.0),
        0.05 * (2.0 * layout.uniform() - 1.0),
    ];
    let grad_strength = 0.05 + 0.10 * layout.uniform();
    let n_objects = 1 + layout.below(max_objects as u64) as usize;
    let weights = class_weights(classes);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = layout.weighted_index(&weights);
        let cx = layout.uniform_range(0.15, 0.85);
        let cy = layout.uniform_range(0.15, 0.85);
        let w = layout.uniform_range(0.18, 0.45);
        let h = layout.uniform_range(0.18, 0.45);
        let value_jitter = layout.uniform_range(-0.04, 0.04);
        objects.push(ObjectDraw {
            class,
            bbox: BBox { cx, cy, w, h },
            value_jitter,
        });
    }

    // Paint background, then objects in draw order (later occludes earlier).
    let mut image = Tensor::zeros(&[size, size, 3]);
    for y in 0..size {
        let fade = 1.0 - grad_strength * y as f64 / (size - 1).max(1) as f64;
        for x in 0..size {
            for c in 0..3 {
                let at = image.idx3(y, x, c);
                image.data[at] = ((base + tint[c]) * fade) as f32;
            }
        }
    }
    for obj in &objects {
        let shape = SHAPES[(obj.class + shape_offset) % SHAPES.len()];
        let color = class_color(obj.class, profile.palette_shift, obj.value_jitter);
        let b = &obj.bbox;
        let y_lo = ((b.y1().max(0.0)) * size as f64).floor() as usize;
        let y_hi = (((b.y2().min(1.0)) * size as f64).ceil() as usize).min(size);
        let x_lo = ((b.x1().max(0.0)) * size as f64).floor() as usize;
        let x_hi = (((b.x2().min(1.0)) * size as f64).ceil() as usize).min(size);
        for y in y_lo..y_hi {
            let py = (y as f64 + 0.5) / size as f64;
            let v = (py - b.cy) / (b.h / 2.0);
            for x in x_lo..x_hi {
                let px = (x as f64 + 0.5) / size as f64;
                let u = (px - b.cx) / (b.w / 2.0);
                if u.abs() <= 1.0 && v.abs() <= 1.0 && shape.contains(u, v) {
                    for c in 0..3 {
                        let at = image.idx3(y, x, c);
                        image.data[at] = color[c] as f32;
                    }
                }
            }
        }
    }

    // Substream 1: photometric pass, applied last so it can never disturb
    // layout or annotations.
    let mut photo = Rng::new(derive_seed(seed, 1));
    for v in image.data.iter_mut() {
        let noise = profile.noise_sigma * photo.normal();
        *v = ((*v as f64 + profile.brightness + noise).clamp(0.0, 1.0)) as f32;
    }

    // Annotations: the object boxes clipped to the image.
    let mut annotations = Vec::with_capacity(objects.len());
    for obj in &objects {
        let b = &obj.bbox;
        let x1 = b.x1().max(0.0);
        let x2 = b.x2().min(1.0);
        let y1 = b.y1().max(0.0);
        let y2 = b.y2().min(1.0);
        annotations.push((
            obj.class,
            BBox {
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: x2 - x1,
                h: y2 - y1,
            },
        ));
    }

    Ok(Scene {
        image,
        annotations,
        seed,
    })
}

/// Generate `n` scenes into `out_dir` (PPM plus annotation file each) and
/// write `manifest.csv` there. Per-scene seeds are derived from the master
/// seed by index, so any single scene can be regenerated in isolation.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    seed: u64,
    n: usize,
    profile: &DomainProfile,
    out_dir: &Path,
    classes: usize,
    max_objects: usize,
    size: usize,
) -> Result<Manifest> {
    generate_dataset_with(seed, n, profile, out_dir, classes, max_objects, size, 0)
}

/// As [`generate_dataset`], with a shape offset (see [`generate_scene_with`]).
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset_with(
    seed: u64,
    n: usize,
    profile: &DomainProfile,
    out_dir: &Path,
    classes: usize,
    max_objects: usize,
    size: usize,
    shape_offset: usize,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = derive_seed(seed, i as u64);
        let scene = generate_scene_with(
            scene_seed,
            profile,
            classes,
            max_objects,
            size,
            shape_offset,
        )?;
        let image_name = format!("img_{i:05}.ppm");
        let ann_name = format!("img_{i:05}.txt");
        formats::write_ppm(&out_dir.join(&image_name), &scene.image)?;
        formats::write_annotations(&out_dir.join(&ann_name), &scene.annotations)?;
        let mut class_counts = vec![0usize; classes];
        for &(class, _) in &scene.annotations {
            class_counts[class] += 1;
        }
        entries.push(ManifestEntry {
            image: image_name.into(),
            annotation: ann_name.into(),
            num_objects: scene.annotations.len(),
            class_counts,
        });
    }
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn share_deviation(sub: &[usize], parent_share: &[f64]) -> f64 {
    let total: usize = sub.iter().sum();
    if total == 0 {
        return 100.0;
    }
    sub.iter()
        .zip(parent_share)
        .map(|(&c, &p)| (c as f64 / total as f64 - p).abs() * 100.0)
        .fold(0.0, f64::max)
}

/// Uniform random subset of `n` images, then a bounded greedy swap
/// refinement pulling each class's instance share to within 2 percentage
/// points of the parent dataset where feasible.
pub fn sample_subset(parent: &Manifest, n: usize, seed: u64) -> Result<Manifest> {
    if n == 0 || n > parent.len() {
        return Err(Error::invalid(format!(
            "subset size {n} invalid for dataset of {}",
            parent.len()
        )));
    }
    let classes = parent.classes();
    let totals = parent.total_class_counts();
    let total_inst: usize = totals.iter().sum();
    let parent_share: Vec<f64> = totals
        .iter()
        .map(|&c| {
            if total_inst == 0 {
                0.0
            } else {
                c as f64 / total_inst as f64
            }
        })
        .collect();

    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..parent.len()).collect();
    rng.shuffle(&mut order);
    let mut selected = vec![false; parent.len()];
    for &i in order.iter().take(n) {
        selected[i] = true;
    }

    let counts_of = |idx: usize| -> Vec<usize> {
        let mut c = parent.entries[idx].class_counts.clone();
        c.resize(classes, 0);
        c
    };
    let mut sub_counts = vec![0usize; classes];
    for (i, &sel) in selected.iter().enumerate() {
        if sel {
            for (c, &k) in counts_of(i).iter().enumerate() {
                sub_counts[c] += k;
            }
        }
    }

    // Greedy best-improvement swaps, deterministic scan order, bounded.
    for _ in 0..200 {
        let current = share_deviation(&sub_counts, &parent_share);
        if current <= 2.0 {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for s in 0..parent.len() {
            if !selected[s] {
                continue;
            }
            let s_counts = counts_of(s);
            for u in 0..parent.len() {
                if selected[u] {
                    continue;
                }
                let u_counts = counts_of(u);
                let mut trial = sub_counts.clone();
                for c in 0..classes {
                    trial[c] = trial[c] + u_counts[c] - s_counts[c];
                }
                let dev = share_deviation(&trial, &parent_share);
                if dev + 1e-12 < best.map_or(current, |(_, _, d)| d) {
                    best = Some((s, u, dev));
                }
            }
        }
        match best {
            Some((s, u, _)) => {
                selected[s] = false;
                selected[u] = true;
                let (s_counts, u_counts) = (counts_of(s), counts_of(u));
                for c in 0..classes {
                    sub_counts[c] = sub_counts[c] + u_counts[c] - s_counts[c];
                }
            }
            None => break,
        }
    }

    let entries: Vec<ManifestEntry> = selected
        .iter()
        .enumerate()
        .filter(|(_, &sel)| sel)
        .map(|(i, _)| parent.entries[i].clone())
        .collect();
    Ok(Manifest {
        dir: parent.dir.clone(),
        entries,
    })
}

/// Disjoint shuffled halves of sizes ceil(n/2) and floor(n/2), each kept in
/// original dataset order.
pub fn split_half(parent: &Manifest, seed: u64) -> Result<(Manifest, Manifest)> {
    let n = parent.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split a dataset of {n}")));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let take = n.div_ceil(2);
    let mut first: Vec<usize> = order[..take].to_vec();
    let mut second: Vec<usize> = order[take..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    let pick = |idxs: &[usize]| Manifest {
        dir: parent.dir.clone(),
        entries: idxs.iter().map(|&i| parent.entries[i].clone()).collect(),
    };
    Ok((pick(&first), pick(&second)))
}

/// Per-quadrant affine of the mosaic: x -> offset + x * scale.
#[derive(Debug, Clone, Copy)]
pub struct QuadrantAffine {
    pub offset_x: f64,
    pub offset_y: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

pub fn quadrant_affines(pivot_x: f64, pivot_y: f64) -> [QuadrantAffine; 4] {
    let mk = |ox, oy, sx, sy| QuadrantAffine {
        offset_x: ox,
        offset_y: oy,
        scale_x: sx,
        scale_y: sy,
    };
    [
        mk(0.0, 0.0, pivot_x, pivot_y),
        mk(pivot_x, 0.0, 1.0 - pivot_x, pivot_y),
        mk(0.0, pivot_y, pivot_x, 1.0 - pivot_y),
        mk(pivot_x, pivot_y, 1.0 - pivot_x, 1.0 - pivot_y),
    ]
}

/// Compose four scenes around a pivot drawn uniformly in [0.25, 0.75]^2.
/// Scene order is top-left, top-right, bottom-left, bottom-right.
pub fn mosaic(scenes: &[Scene; 4], seed: u64, size: usize) -> Scene {
    let mut rng = Rng::new(seed);
    let px = rng.uniform_range(0.25, 0.75);
    let py = rng.uniform_range(0.25, 0.75);
    mosaic_with_pivot(scenes, px, py, size, seed)
}

/// Deterministic mosaic with an explicit pivot (exposed for tests).
/// Each source is stretched to fill its quadrant; annotations follow the
/// same affine, are clipped to the quadrant, and are dropped when the
/// clipped area falls below 20% of the mapped area.
pub fn mosaic_with_pivot(
    scenes: &[Scene; 4],
    pivot_x: f64,
    pivot_y: f64,
    size: usize,
    seed: u64,
) -> Scene {
    let affines = quadrant_affines(pivot_x, pivot_y);
    let mut image = Tensor::zeros(&[size, size, 3]);
    for y in 0..size {
        let ny = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let nx = (x as f64 + 0.5) / size as f64;
            let q = match (nx < pivot_x, ny < pivot_y) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            let a = &affines[q];
            let src = &scenes[q].image;
            let (sh, sw) = (src.shape[0], src.shape[1]);
            let sx = ((nx - a.offset_x) / a.scale_x * sw as f64).floor() as isize;
            let sy = ((ny - a.offset_y) / a.scale_y * sh as f64).floor() as isize;
            let sx = sx.clamp(0, sw as isize - 1) as usize;
            let sy = sy.clamp(0, sh as isize - 1) as usize;
            for c in 0..3 {
                let at = image.idx3(y, x, c);
                image.data[at] = src.data[src.idx3(sy, sx, c)];
            }
        }
    }

    let mut annotations = Vec::new();
    for (q, scene) in scenes.iter().enumerate() {
        let a = &affines[q];
        for &(class, b) in &scene.annotations {
            let x1 = a.offset_x + b.x1() * a.scale_x;
            let x2 = a.offset_x + b.x2() * a.scale_x;
            let y1 = a.offset_y + b.y1() * a.scale_y;
            let y2 = a.offset_y + b.y2() * a.scale_y;
            let mapped_area = (x2 - x1) * (y2 - y1);
            let cx1 = x1.max(a.offset_x);
            let cx2 = x2.min(a.offset_x + a.scale_x);
            let cy1 = y1.max(a.offset_y);
            let cy2 = y2.min(a.offset_y + a.scale_y);
            if cx2 <= cx1 || cy2 <= cy1 {
                continue;
            }
            let clipped_area = (cx2 - cx1) * (cy2 - cy1);
            if clipped_area < 0.2 * mapped_area {
                continue;
            }
            annotations.push((
                class,
                BBox {
                    cx: (cx1 + cx2) / 2.0,
                    cy: (cy1 + cy2) / 2.0,
                    w: cx2 - cx1,
                    h: cy2 - cy1,
                },
            ));
        }
    }

    Scene {
        image,
        annotations,
        seed,
    }
}

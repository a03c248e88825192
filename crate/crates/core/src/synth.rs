//! Procedural two-domain scenes.
//!
//! A scene is a sky/ground split at a random horizon with boxes, discs and
//! thin vertical stripes painted on top in random z-order. Geometry depends
//! only on `(spec.seed, index)`; a [`DomainShift`] changes appearance after
//! rendering, so the source and target renderings of one index share their
//! label map exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::Domain;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "ground", "box", "disc", "stripe"];
pub const BACKGROUND: u8 = 0;
pub const GROUND: u8 = 1;
pub const BOX: u8 = 2;
pub const DISC: u8 = 3;
pub const STRIPE: u8 = 4;

/// Source-domain base colour of each class (RGB in [0,1]).
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.55, 0.70, 0.90],
    [0.40, 0.50, 0.25],
    [0.80, 0.25, 0.20],
    [0.85, 0.75, 0.20],
    [0.30, 0.30, 0.75],
];

const MAX_REJECTIONS: usize = 32;

/// Offsets separating the scene indices of the three splits.
pub const TARGET_INDEX_OFFSET: u64 = 1 << 32;
pub const VAL_INDEX_OFFSET: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        CountRange { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub boxes: CountRange,
    pub discs: CountRange,
    pub stripes: CountRange,
    /// Object extent range in pixels (box side, disc diameter, stripe length).
    pub size_min: usize,
    pub size_max: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            boxes: CountRange::new(1, 3),
            discs: CountRange::new(1, 3),
            stripes: CountRange::new(1, 2),
            size_min: 10,
            size_max: 20,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(s.into()));
        if self.height < 8 || self.width < 8 {
            return bad("scene must be at least 8x8");
        }
        if self.size_min == 0 || self.size_min > self.size_max || self.size_max > self.height.min(self.width) {
            return bad("object size range must be non-empty and fit the image");
        }
        for r in [self.boxes, self.discs, self.stripes] {
            if r.min > r.max {
                return bad("object count range must have min <= max");
            }
        }
        Ok(())
    }
}

/// Appearance change applied to a rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    /// Hue rotation per class, degrees.
    pub hue_degrees: [f64; NUM_CLASSES],
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Overlays a class-dependent stripe texture.
    pub texture: bool,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hue_degrees: [10.0, 15.0, 15.0, -15.0, 20.0],
            brightness: -0.05,
            contrast: 0.7,
            noise_sigma: 0.06,
            texture: true,
        }
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            hue_degrees: [0.0; NUM_CLASSES],
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            texture: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// One image with its label map and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3,H,W]`, values in [0,1].
    pub image: Tensor,
    pub labels: Option<LabelMap>,
    pub domain: Domain,
}

impl Sample {
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Horizontal mirror of image and labels.
    pub fn mirrored(&self) -> Sample {
        let s = self.image.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = self.image.data().to_vec();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Sample {
            image: Tensor::from_parts(vec![c, h, w], data),
            labels: self.labels.as_ref().map(LabelMap::mirrored),
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: isize, y0: isize, x1: isize, y1: isize },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => {
                let (x, y) = (x as isize, y as isize);
                x >= x0 && x < x1 && y >= y0 && y < y1
            }
            Shape::Disc { cx, cy, r } => {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Object {
    class: u8,
    shape: Shape,
    tint: [f64; 3],
}

struct Scene {
    horizon: usize,
    sky_tint: [f64; 3],
    ground_tint: [f64; 3],
    objects: Vec<Object>,
}

fn tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut t = [0.0; 3];
    for v in &mut t {
        *v = rng.gen_range(-0.06..0.06);
    }
    t
}

fn draw_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let horizon = rng.gen_range(h * 35 / 100..=h * 60 / 100);
    let sky_tint = tint(rng);
    let ground_tint = tint(rng);
    let mut objects = Vec::new();
    let size = |rng: &mut ChaCha8Rng| rng.gen_range(spec.size_min..=spec.size_max);

    for _ in 0..rng.gen_range(spec.boxes.min..=spec.boxes.max) {
        let (bw, bh) = (size(rng), size(rng));
        let x0 = rng.gen_range(0..=w - bw) as isize;
        let y0 = rng.gen_range(0..=h - bh) as isize;
        let shape = Shape::Rect {
            x0,
            y0,
            x1: x0 + bw as isize,
            y1: y0 + bh as isize,
        };
        objects.push(Object { class: BOX, shape, tint: tint(rng) });
    }
    for _ in 0..rng.gen_range(spec.discs.min..=spec.discs.max) {
        let r = size(rng) as f64 / 2.0;
        let cx = rng.gen_range(r..=w as f64 - r);
        let cy = rng.gen_range(r..=h as f64 - r);
        objects.push(Object {
            class: DISC,
            shape: Shape::Disc { cx, cy, r },
            tint: tint(rng),
        });
    }
    for _ in 0..rng.gen_range(spec.stripes.min..=spec.stripes.max) {
        let thickness = rng.gen_range(4..=6).min(w);
        let length = (size(rng) * 3 / 2).min(h);
        let x0 = rng.gen_range(0..=w - thickness) as isize;
        let y0 = rng.gen_range(0..=h - length) as isize;
        let shape = Shape::Rect {
            x0,
            y0,
            x1: x0 + thickness as isize,
            y1: y0 + length as isize,
        };
        objects.push(Object { class: STRIPE, shape, tint: tint(rng) });
    }
    objects.shuffle(rng);
    Scene {
        horizon,
        sky_tint,
        ground_tint,
        objects,
    }
}

/// Class label and source colour of every pixel, painted back to front.
fn rasterize(spec: &SceneSpec, scene: &Scene) -> (LabelMap, Vec<[f64; 3]>) {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    let mut colors = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if y < scene.horizon {
                // sky brightens towards the horizon
                let lift = 0.15 * y as f64 / scene.horizon as f64;
                labels[i] = BACKGROUND;
                colors[i] = add3(add3(PALETTE[0], scene.sky_tint), [lift; 3]);
            } else {
                labels[i] = GROUND;
                colors[i] = add3(PALETTE[1], scene.ground_tint);
            }
            for obj in &scene.objects {
                if obj.shape.contains(x, y) {
                    labels[i] = obj.class;
                    colors[i] = add3(PALETTE[obj.class as usize], obj.tint);
                }
            }
        }
    }
    (LabelMap::new(h, w, labels).expect("sized by construction"), colors)
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let [r, g, b] = rgb.map(|v| v.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return [r, g, b];
    }
    let mut hue = if max == r {
        60.0 * libm::fmod((g - b) / delta, 6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    hue = libm::fmod(hue + degrees, 360.0);
    if hue < 0.0 {
        hue += 360.0;
    }
    let sat = delta / max;
    let c = max * sat;
    let x = c * (1.0 - libm::fabs(libm::fmod(hue / 60.0, 2.0) - 1.0));
    let m = max - c;
    let (r1, g1, b1) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r1 + m, g1 + m, b1 + m]
}

fn texture_gain(class: u8, x: usize, y: usize) -> f64 {
    // class-dependent diagonal bands
    let period = 3 + class as usize;
    if (x + 2 * y + class as usize) % period == 0 {
        0.82
    } else {
        1.0
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

fn apply_shift(shift: &DomainShift, labels: &LabelMap, colors: &mut [[f64; 3]], noise: &mut ChaCha8Rng) {
    let w = labels.width();
    let neutral_tone = shift.contrast == 1.0 && shift.brightness == 0.0;
    for (i, rgb) in colors.iter_mut().enumerate() {
        let class = labels.labels()[i];
        let hue = shift.hue_degrees[class as usize];
        if hue != 0.0 {
            *rgb = rotate_hue(*rgb, hue);
        }
        if shift.texture {
            let gain = texture_gain(class, i % w, i / w);
            *rgb = rgb.map(|v| v * gain);
        }
        if !neutral_tone {
            *rgb = rgb.map(|v| (v - 0.5) * shift.contrast + 0.5 + shift.brightness);
        }
        if shift.noise_sigma > 0.0 {
            for v in rgb.iter_mut() {
                *v += shift.noise_sigma * gaussian(noise);
            }
        }
    }
}

fn guaranteed_classes(spec: &SceneSpec) -> Vec<u8> {
    let mut required = vec![GROUND];
    for (class, range) in [(BOX, spec.boxes), (DISC, spec.discs), (STRIPE, spec.stripes)] {
        if range.max > 0 {
            required.push(class);
        }
    }
    required
}

/// Renders scene `index` under `shift`. Labels are always attached.
pub fn render(spec: &SceneSpec, shift: &DomainShift, index: u64, domain: Domain) -> Sample {
    let mut geo = rng::indexed_stream(spec.seed, "scene", index);
    let required = guaranteed_classes(spec);
    let mut attempt = 0;
    let (labels, mut colors) = loop {
        let scene = draw_scene(spec, &mut geo);
        let (labels, colors) = rasterize(spec, &scene);
        let hist = labels.histogram(NUM_CLASSES);
        attempt += 1;
        if required.iter().all(|&c| hist[c as usize] > 0) || attempt >= MAX_REJECTIONS {
            break (labels, colors);
        }
    };
    if !shift.is_identity() {
        let mut noise = rng::indexed_stream(spec.seed, "noise", index);
        apply_shift(shift, &labels, &mut colors, &mut noise);
    }
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![0.0; 3 * h * w];
    for (i, rgb) in colors.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = rgb[c].clamp(0.0, 1.0);
        }
    }
    Sample {
        image: Tensor::from_parts(vec![3, h, w], data),
        labels: Some(labels),
        domain,
    }
}

/// Mirrors the sample horizontally with probability 0.5.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen_bool(0.5) {
        sample.mirrored()
    } else {
        sample.clone()
    }
}

/// Role of a generated split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Target,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::Target, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::Val => "val",
        }
    }

    pub fn index_offset(self) -> u64 {
        match self {
            Split::Source => 0,
            Split::Target => TARGET_INDEX_OFFSET,
            Split::Val => VAL_INDEX_OFFSET,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::Target | Split::Val => Domain::Target,
        }
    }

    /// Whether label maps are kept for this split.
    pub fn labelled(self) -> bool {
        !matches!(self, Split::Target)
    }
}

/// Renders the `i`-th sample of a split with its ground truth. Source images
/// use the identity appearance; target and validation images use `shift`.
pub fn render_split(spec: &SceneSpec, shift: &DomainShift, split: Split, i: usize) -> Sample {
    let appearance = match split {
        Split::Source => DomainShift::identity(),
        _ => shift.clone(),
    };
    render(spec, &appearance, split.index_offset() + i as u64, split.domain())
}

/// As [`render_split`], but target training samples carry no labels.
pub fn split_sample(spec: &SceneSpec, shift: &DomainShift, split: Split, i: usize) -> Sample {
    let sample = render_split(spec, shift, split, i);
    if split.labelled() {
        sample
    } else {
        sample.without_labels()
    }
}

pub fn generate_samples(spec: &SceneSpec, shift: &DomainShift, split: Split, count: usize) -> Vec<Sample> {
    (0..count).map(|i| split_sample(spec, shift, split, i)).collect()
}

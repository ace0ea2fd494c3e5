//! A fine-grained stand-in for real photo benchmarks.
//!
//! Every class is a shared "super-template" (a smooth multi-blob scene drawn
//! from a small pool, so many classes look alike globally) with one
//! class-unique signed detail glyph added at a class-fixed location. Instances
//! jitter the whole scene by a few pixels, scale its contrast, and add pixel
//! noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassImages, DatasetSplit};
use crate::error::{Error, Result};

const TEMPLATE_STREAM: u64 = 1 << 32;
const INSTANCE_STREAM: u64 = 2 << 32;
const SPLIT_STREAM: u64 = 3 << 32;
const BLOBS_PER_TEMPLATE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub templates: usize,
    pub glyph_size: usize,
    /// Peak-to-peak amplitude of the glyph pattern added on top of the template.
    pub glyph_contrast: f64,
    pub noise_sigma: f64,
    /// Maximum translation, in pixels, along each axis.
    pub jitter: usize,
    /// Fraction of classes assigned to the base (training) side.
    pub base_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 48,
            images_per_class: 30,
            channels: 3,
            height: 64,
            width: 64,
            templates: 8,
            glyph_size: 5,
            glyph_contrast: 0.2,
            noise_sigma: 0.1,
            jitter: 2,
            base_ratio: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.images_per_class == 0 || self.templates == 0 || self.glyph_size == 0 {
            return bad("image, template and glyph counts must be positive");
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive");
        }
        if self.glyph_size + 2 * self.jitter > self.height.min(self.width) {
            return bad("glyph does not fit inside the image after maximal jitter");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        if !(self.glyph_contrast.is_finite() && self.glyph_contrast > 0.0) {
            return bad("glyph contrast must be positive");
        }
        if !(self.base_ratio > 0.0 && self.base_ratio < 1.0) {
            return bad("base ratio must lie in (0, 1)");
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Where and what the class-unique detail is.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ClassLayout {
    pub template: usize,
    /// `(row, col)` of the glyph's top-left corner in the canonical render.
    pub origin: (usize, usize),
    /// `channels × glyph × glyph` signed offsets added to the template.
    pub glyph: Vec<f32>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn render_template(spec: &SyntheticSpec, t: usize) -> Vec<f32> {
    let mut rng = stream(spec.seed, TEMPLATE_STREAM + t as u64);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..BLOBS_PER_TEMPLATE)
        .map(|_| {
            let cy = rng.random_range(0.2 * h..0.8 * h);
            let cx = rng.random_range(0.2 * w..0.8 * w);
            let sigma = rng.random_range(0.1..0.22) * h.min(w);
            let colour = (0..spec.channels).map(|_| rng.random_range(0.15..0.6)).collect();
            (cy, cx, sigma, colour)
        })
        .collect();
    let mut img = vec![0f32; spec.pixels()];
    for c in 0..spec.channels {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = 0.1;
                for (cy, cx, sigma, colour) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += colour[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                img[(c * spec.height + y) * spec.width + x] = v as f32;
            }
        }
    }
    img
}

fn draw_layout(spec: &SyntheticSpec, class_id: u32) -> ClassLayout {
    let mut rng = stream(spec.seed, u64::from(class_id) + 1);
    let template = rng.random_range(0..spec.templates);
    let g = spec.glyph_size;
    let r = spec.jitter;
    let origin = (
        rng.random_range(r..=spec.height - g - r),
        rng.random_range(r..=spec.width - g - r),
    );
    let half = 0.5 * spec.glyph_contrast;
    let glyph = (0..spec.channels * g * g)
        .map(|_| if rng.random_bool(0.5) { half } else { -half } as f32)
        .collect();
    ClassLayout {
        template,
        origin,
        glyph,
    }
}

/// Layouts for classes `0..num_classes`; glyph patterns are made unique by
/// redrawing (from the class's own stream) any that repeat an earlier class.
pub(crate) fn class_layouts(spec: &SyntheticSpec) -> Vec<ClassLayout> {
    let mut layouts: Vec<ClassLayout> = Vec::with_capacity(spec.num_classes);
    for id in 0..spec.num_classes as u32 {
        let mut layout = draw_layout(spec, id);
        let mut attempt = 0u64;
        while layouts.iter().any(|l| l.glyph == layout.glyph) {
            attempt += 1;
            let mut rng = stream(spec.seed ^ attempt.rotate_left(17), u64::from(id) + 1);
            let half = 0.5 * spec.glyph_contrast as f32;
            for v in layout.glyph.iter_mut() {
                *v = rng.random_range(-half..half);
            }
        }
        layouts.push(layout);
    }
    layouts
}

fn paint(spec: &SyntheticSpec, layout: &ClassLayout, template: &[f32]) -> Vec<f32> {
    let mut img = template.to_vec();
    let g = spec.glyph_size;
    let (oy, ox) = layout.origin;
    for c in 0..spec.channels {
        for dy in 0..g {
            for dx in 0..g {
                img[(c * spec.height + oy + dy) * spec.width + ox + dx] += layout.glyph[(c * g + dy) * g + dx];
            }
        }
    }
    img
}

/// The noise-free, unjittered image of a class.
pub fn render_canonical(spec: &SyntheticSpec, class_id: u32) -> Result<Vec<f32>> {
    spec.validate()?;
    if class_id as usize >= spec.num_classes {
        return Err(Error::InvalidSpec(format!("class {class_id} out of range")));
    }
    let layout = &class_layouts(spec)[class_id as usize];
    Ok(paint(spec, layout, &render_template(spec, layout.template)))
}

/// Glyph bounding box `(row, col, size)` and template index of a class.
pub fn class_glyph_box(spec: &SyntheticSpec, class_id: u32) -> (usize, usize, usize, usize) {
    let layout = &class_layouts(spec)[class_id as usize];
    (layout.origin.0, layout.origin.1, spec.glyph_size, layout.template)
}

fn instance(spec: &SyntheticSpec, canonical: &[f32], rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f32> {
    let r = spec.jitter as i64;
    let dy = rng.random_range(-r..=r);
    let dx = rng.random_range(-r..=r);
    let contrast = rng.random_range(0.9..=1.1);
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut out = Vec::with_capacity(canonical.len());
    for c in 0..spec.channels {
        for y in 0..h {
            let sy = (y - dy).clamp(0, h - 1) as usize;
            for x in 0..w {
                let sx = (x - dx).clamp(0, w - 1) as usize;
                let v = f64::from(canonical[(c * spec.height + sy) * spec.width + sx]);
                out.push((v * contrast + noise.sample(rng)) as f32);
            }
        }
    }
    out
}

/// Builds the full labelled dataset and its base/novel partition.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let templates: Vec<Vec<f32>> = (0..spec.templates).map(|t| render_template(spec, t)).collect();
    let layouts = class_layouts(spec);
    let classes = layouts
        .iter()
        .enumerate()
        .map(|(id, layout)| {
            let canonical = paint(spec, layout, &templates[layout.template]);
            let mut rng = stream(spec.seed, INSTANCE_STREAM + id as u64);
            let mut pixels = Vec::with_capacity(spec.images_per_class * spec.pixels());
            for _ in 0..spec.images_per_class {
                pixels.extend(instance(spec, &canonical, &mut rng, &noise));
            }
            ClassImages {
                class_id: id as u32,
                pixels,
            }
        })
        .collect();
    let ids: Vec<u32> = (0..spec.num_classes as u32).collect();
    let (base_classes, novel_classes) = split_base_novel(&ids, spec.base_ratio, spec.seed)?;
    let split = DatasetSplit {
        image_shape: [spec.channels, spec.height, spec.width],
        images_per_class: spec.images_per_class,
        classes,
        base_classes,
        novel_classes,
        seed: spec.seed,
        spec: Some(spec.clone()),
    };
    split.validate()?;
    Ok(split)
}

/// Deterministic shuffled partition: the first `round(ratio · n)` shuffled
/// ids go to base, the rest to novel. Both sides come back sorted.
pub fn split_base_novel(class_ids: &[u32], ratio: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidSpec(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut ids = class_ids.to_vec();
    ids.shuffle(&mut stream(seed, SPLIT_STREAM));
    let n_base = (ratio * ids.len() as f64).round() as usize;
    let n_base = n_base.min(ids.len());
    if n_base == 0 || n_base == ids.len() {
        return Err(Error::DegeneratePartition {
            base: n_base,
            novel: ids.len() - n_base,
        });
    }
    let mut novel = ids.split_off(n_base);
    ids.sort_unstable();
    novel.sort_unstable();
    Ok((ids, novel))
}

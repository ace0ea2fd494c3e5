//! Synthetic fine-grained image classes, base/novel splits, and N-way K-shot
//! episode sampling.

mod episode;
mod io;
mod synthetic;

pub use episode::{sample_episode, Episode, EpisodeBatch, EpisodeSpec, ImageRef, Side};
pub use io::{export_dataset, import_dataset, DatasetManifest};
pub use synthetic::{class_glyph_box, generate_dataset, render_canonical, split_base_novel, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All images of one class, stored as contiguous `count × C × H × W` f32.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub class_id: u32,
    pub pixels: Vec<f32>,
}

/// A labelled image collection partitioned into disjoint base and novel
/// classes. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    /// `[C, H, W]` of every image.
    pub image_shape: [usize; 3],
    pub images_per_class: usize,
    pub classes: Vec<ClassImages>,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
    pub seed: u64,
    /// Generator settings, when the data came from [`generate_dataset`].
    pub spec: Option<SyntheticSpec>,
}

impl DatasetSplit {
    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn total_images(&self) -> usize {
        self.classes.len() * self.images_per_class
    }

    pub fn class(&self, class_id: u32) -> Option<&ClassImages> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn image(&self, r: ImageRef) -> &[f32] {
        let class = self.class(r.class_id).expect("image ref into known class");
        let n = self.image_len();
        &class.pixels[r.index * n..(r.index + 1) * n]
    }

    pub fn class_ids(&self, side: Side) -> &[u32] {
        match side {
            Side::Base => &self.base_classes,
            Side::Novel => &self.novel_classes,
        }
    }

    /// Stacks the referenced images into a `B × C × H × W` tensor.
    pub fn stack(&self, refs: &[ImageRef]) -> Tensor {
        let mut data = Vec::with_capacity(refs.len() * self.image_len());
        for &r in refs {
            data.extend(self.image(r).iter().map(|&v| f64::from(v)));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(vec![refs.len(), c, h, w], data).expect("stack shape")
    }

    /// Checks the split invariants: disjoint sides, every class on exactly
    /// one side, pixel buffers of the declared size.
    pub fn validate(&self) -> Result<()> {
        for id in &self.base_classes {
            if self.novel_classes.contains(id) {
                return Err(Error::InvalidSpec(format!("class {id} is both base and novel")));
            }
        }
        let per_class = self.images_per_class * self.image_len();
        for c in &self.classes {
            let sides =
                self.base_classes.contains(&c.class_id) as usize + self.novel_classes.contains(&c.class_id) as usize;
            if sides != 1 {
                return Err(Error::InvalidSpec(format!(
                    "class {} belongs to {sides} splits",
                    c.class_id
                )));
            }
            if c.pixels.len() != per_class {
                return Err(Error::InvalidSpec(format!(
                    "class {} has {} values, expected {per_class}",
                    c.class_id,
                    c.pixels.len()
                )));
            }
        }
        if self.base_classes.len() + self.novel_classes.len() != self.classes.len() {
            return Err(Error::InvalidSpec("split lists reference unknown classes".into()));
        }
        Ok(())
    }
}

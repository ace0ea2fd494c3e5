//! Dataset directory format: `manifest.json` plus one raw little-endian f32
//! file per class holding `count × C × H × W` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassImages, DatasetSplit, Side, SyntheticSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class_id: u32,
    pub split: Side,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub image_shape: [usize; 3],
    pub images_per_class: usize,
    pub dtype: String,
    pub seed: u64,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
    pub classes: Vec<ClassEntry>,
    pub spec: Option<SyntheticSpec>,
}

fn class_file(id: u32) -> String {
    format!("class_{id:05}.f32")
}

pub fn export_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    split.validate()?;
    fs::create_dir_all(dir)?;
    let mut classes = Vec::with_capacity(split.classes.len());
    for c in &split.classes {
        let side = if split.base_classes.contains(&c.class_id) {
            Side::Base
        } else {
            Side::Novel
        };
        let file = class_file(c.class_id);
        let bytes: Vec<u8> = c.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        classes.push(ClassEntry {
            class_id: c.class_id,
            split: side,
            file,
        });
    }
    let manifest = DatasetManifest {
        image_shape: split.image_shape,
        images_per_class: split.images_per_class,
        dtype: "f32".into(),
        seed: split.seed,
        base_classes: split.base_classes.clone(),
        novel_classes: split.novel_classes.clone(),
        classes,
        spec: split.spec.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.dtype != "f32" {
        return Err(Error::InvalidSpec(format!("unsupported dtype {}", manifest.dtype)));
    }
    let per_class = manifest.images_per_class * manifest.image_shape.iter().product::<usize>();
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for entry in &manifest.classes {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != per_class * 4 {
            return Err(Error::InvalidSpec(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                per_class * 4
            )));
        }
        let pixels = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        classes.push(ClassImages {
            class_id: entry.class_id,
            pixels,
        });
    }
    let split = DatasetSplit {
        image_shape: manifest.image_shape,
        images_per_class: manifest.images_per_class,
        classes,
        base_classes: manifest.base_classes,
        novel_classes: manifest.novel_classes,
        seed: manifest.seed,
        spec: manifest.spec,
    };
    split.validate()?;
    Ok(split)
}

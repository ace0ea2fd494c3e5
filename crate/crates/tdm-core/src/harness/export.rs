use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Episode};
use crate::error::Result;
use crate::model::Model;
use crate::tdm::{PoolMode, TdmSettings};
use crate::tensor::Tensor;

pub const WEIGHTS_FILE: &str = "channel_weights.csv";
pub const MAPS_FILE: &str = "channel_maps.csv";

/// One `(class, channel)` row of the weight export. Query-side weights are
/// averaged over the episode's queries of that class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub class_id: u32,
    pub channel: usize,
    pub w_intra: f64,
    pub w_inter: f64,
    pub w_support: f64,
    pub w_query: f64,
    pub w_task: f64,
}

/// One pixel of a per-class 2D map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub class_id: u32,
    /// `aggregated` (task-weighted channel sum of the prototype),
    /// `avg_pool` or `max_pool` (channel-pooled prototype).
    pub map: String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelExport {
    pub weights: Vec<WeightRow>,
    pub maps: Vec<MapRow>,
}

/// Eval-mode weights and maps for one episode.
pub fn channel_weights(
    model: &Model,
    tdm: &TdmSettings,
    dataset: &DatasetSplit,
    episode: &Episode,
) -> Result<ChannelExport> {
    let batch = episode.to_batch(dataset);
    let w = model.episode_weights(&batch, tdm)?;
    let spec = episode.spec;
    let (n, c) = (spec.n_way, w.w_support.shape()[1]);
    let ones = Tensor::ones(&[n, c]);
    let w_intra = w.w_intra.as_ref().unwrap_or(&ones);
    let w_inter = w.w_inter.as_ref().unwrap_or(&ones);

    let mut class_task = vec![vec![0.0; c]; n];
    let mut class_query = vec![vec![0.0; c]; n];
    let mut counts = vec![0usize; n];
    for (q, &label) in episode.query_labels.iter().enumerate() {
        counts[label] += 1;
        let wq = &w.w_query.data()[q * c..(q + 1) * c];
        let wt = &w.w_task.data()[(q * n + label) * c..(q * n + label + 1) * c];
        for ch in 0..c {
            class_query[label][ch] += wq[ch];
            class_task[label][ch] += wt[ch];
        }
    }
    for i in 0..n {
        let k = counts[i].max(1) as f64;
        class_query[i].iter_mut().for_each(|v| *v /= k);
        class_task[i].iter_mut().for_each(|v| *v /= k);
    }

    let mut weights = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            weights.push(WeightRow {
                class_id: episode.class_map[i],
                channel: ch,
                w_intra: w_intra.data()[i * c + ch],
                w_inter: w_inter.data()[i * c + ch],
                w_support: w.w_support.data()[i * c + ch],
                w_query: class_query[i][ch],
                w_task: class_task[i][ch],
            });
        }
    }

    let ps = w.prototypes.shape().to_vec();
    let (h, wd) = (ps[2], ps[3]);
    let hw = h * wd;
    let avg = Model::pooled_maps(&w.prototypes, PoolMode::Avg)?;
    let max = Model::pooled_maps(&w.prototypes, PoolMode::Max)?;
    let mut maps = Vec::with_capacity(3 * n * hw);
    for (i, task) in class_task.iter().enumerate().take(n) {
        let proto = &w.prototypes.data()[i * c * hw..(i + 1) * c * hw];
        let mut agg = vec![0.0; hw];
        for ch in 0..c {
            for (a, v) in agg.iter_mut().zip(&proto[ch * hw..(ch + 1) * hw]) {
                *a += task[ch] * v;
            }
        }
        for (name, values) in [
            ("aggregated", &agg[..]),
            ("avg_pool", &avg.data()[i * hw..(i + 1) * hw]),
            ("max_pool", &max.data()[i * hw..(i + 1) * hw]),
        ] {
            for (p, &value) in values.iter().enumerate() {
                maps.push(MapRow {
                    class_id: episode.class_map[i],
                    map: name.to_string(),
                    row: p / wd,
                    col: p % wd,
                    value,
                });
            }
        }
    }
    Ok(ChannelExport { weights, maps })
}

/// Writes [`WEIGHTS_FILE`] and [`MAPS_FILE`] under `dir` and returns their
/// paths.
pub fn export_channel_weights(
    model: &Model,
    tdm: &TdmSettings,
    dataset: &DatasetSplit,
    episode: &Episode,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let export = channel_weights(model, tdm, dataset, episode)?;
    std::fs::create_dir_all(dir)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let mpath = dir.join(MAPS_FILE);
    let mut w = csv::Writer::from_path(&wpath)?;
    for r in &export.weights {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut m = csv::Writer::from_path(&mpath)?;
    for r in &export.maps {
        m.serialize(r)?;
    }
    m.flush()?;
    Ok((wpath, mpath))
}

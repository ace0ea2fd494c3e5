use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSplit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Base,
    Novel,
}

/// N-way K-shot with U queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Result<Self> {
        let s = EpisodeSpec { n_way, k_shot, n_query };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.n_query < 1 {
            return Err(Error::Config(format!(
                "episode needs N >= 2, K >= 1, U >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.n_query
    }
}

/// One image: its global class and its position within that class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub class_id: u32,
    pub index: usize,
}

/// A sampled task. Support and query items are grouped by episode label
/// (all of label 0, then label 1, ...). `class_map[label]` is the global id.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<ImageRef>,
    pub support_labels: Vec<usize>,
    pub query: Vec<ImageRef>,
    pub query_labels: Vec<usize>,
    pub class_map: Vec<u32>,
}

/// Episode images materialized as tensors.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub spec: EpisodeSpec,
    /// `(N·K) × C × H × W`, class-major.
    pub support: Tensor,
    /// `(N·U) × C × H × W`, class-major.
    pub query: Tensor,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn to_batch(&self, split: &DatasetSplit) -> EpisodeBatch {
        EpisodeBatch {
            spec: self.spec,
            support: split.stack(&self.support),
            query: split.stack(&self.query),
            support_labels: self.support_labels.clone(),
            query_labels: self.query_labels.clone(),
        }
    }
}

/// Samples N classes without replacement from one side of the split, then
/// K + U distinct images per class: the first K become support, the rest
/// queries. Episode labels follow the order in which classes were drawn.
pub fn sample_episode<R: Rng + ?Sized>(
    split: &DatasetSplit,
    side: Side,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let pool = split.class_ids(side);
    if pool.len() < spec.n_way {
        return Err(Error::InsufficientClasses {
            needed: spec.n_way,
            available: pool.len(),
        });
    }
    let per_class = spec.k_shot + spec.n_query;
    if split.images_per_class < per_class {
        return Err(Error::InsufficientImages {
            class_id: pool[0],
            needed: per_class,
            available: split.images_per_class,
        });
    }
    let chosen = index::sample(rng, pool.len(), spec.n_way);
    let class_map: Vec<u32> = chosen.iter().map(|i| pool[i]).collect();
    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    for &class_id in &class_map {
        let picks = index::sample(rng, split.images_per_class, per_class);
        for (n, index) in picks.iter().enumerate() {
            let r = ImageRef { class_id, index };
            if n < spec.k_shot {
                support.push(r);
            } else {
                query.push(r);
            }
        }
    }
    Ok(Episode {
        spec: *spec,
        support_labels: (0..spec.n_way)
            .flat_map(|l| std::iter::repeat_n(l, spec.k_shot))
            .collect(),
        query_labels: (0..spec.n_way)
            .flat_map(|l| std::iter::repeat_n(l, spec.n_query))
            .collect(),
        support,
        query,
        class_map,
    })
}

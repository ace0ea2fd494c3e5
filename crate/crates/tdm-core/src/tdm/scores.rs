//! Prototypes, mean spatial features and channel representativeness scores.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Channel pooling used to build the spatial saliency map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Avg,
    Max,
}

/// `H × W` map pooled over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap(pub Tensor);

/// One non-negative score per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

/// `(N·K) × C × H × W` class-major support features → `N × C × H × W`
/// element-wise class means.
pub(crate) fn prototypes(g: &mut Graph, support: Var, n_way: usize, k_shot: usize) -> Result<Var> {
    let s = g.shape(support).to_vec();
    if s.len() != 4 || s[0] != n_way * k_shot {
        return Err(Error::shape(format!(
            "support batch {s:?} does not hold {n_way} x {k_shot} maps"
        )));
    }
    let grouped = g.reshape(support, &[n_way, k_shot, s[1], s[2], s[3]])?;
    g.mean_axis(grouped, 1)
}

/// `B × C × H × W` → `B × H × W`, mean or max over channels.
pub(crate) fn pool(g: &mut Graph, maps: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Avg => g.mean_axis(maps, 1),
        PoolMode::Max => g.max_axis(maps, 1),
    }
}

/// Per-channel mean squared deviation from each map's own pooled map:
/// `B × C × H × W`, `B × H × W` → `B × C`.
pub(crate) fn intra_scores(g: &mut Graph, maps: Var, pooled: Var) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 || g.shape(pooled) != [s[0], s[2], s[3]] {
        return Err(Error::shape(format!(
            "intra score: maps {s:?}, pooled {:?}",
            g.shape(pooled)
        )));
    }
    let spread = g.expand(pooled, 1, s[1])?;
    let sq = g.squared_difference(maps, spread)?;
    let flat = g.reshape(sq, &[s[0], s[1], s[2] * s[3]])?;
    g.mean_axis(flat, 2)
}

/// For each class `i` and channel `c`, the minimum over `j ≠ i` of the mean
/// squared deviation of prototype channel `(i, c)` from class `j`'s pooled
/// map: `N × C × H × W`, `N × H × W` → `N × C`.
pub(crate) fn inter_scores(g: &mut Graph, protos: Var, pooled: Var) -> Result<Var> {
    let s = g.shape(protos).to_vec();
    if s.len() != 4 || g.shape(pooled) != [s[0], s[2], s[3]] {
        return Err(Error::shape(format!(
            "inter score: prototypes {s:?}, pooled {:?}",
            g.shape(pooled)
        )));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if n < 2 {
        return Err(Error::SingleClass);
    }
    let p = g.reshape(protos, &[n, c, hw])?;
    let p = g.expand(p, 1, n)?; // [i, j, c, hw]
    let m = g.reshape(pooled, &[n, hw])?;
    let m = g.expand(m, 1, c)?; // [j, c, hw]
    let m = g.expand(m, 0, n)?; // [i, j, c, hw]
    let sq = g.squared_difference(p, m)?;
    let per_pair = g.mean_axis(sq, 3)?; // [i, j, c]
    let rows = g.reshape(per_pair, &[n * n, c])?;
    let off_diagonal: Vec<usize> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j))
        .collect();
    let others = g.select_rows(rows, &off_diagonal)?;
    let others = g.reshape(others, &[n, n - 1, c])?;
    g.min_axis(others, 1)
}

fn scores_from(g: &Graph, v: Var) -> Vec<ScoreVector> {
    let t = g.value(v);
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| ScoreVector(r.to_vec())).collect()
}

/// Element-wise mean of a class's support maps.
pub fn prototype(support_maps: &[FeatureMap]) -> Result<FeatureMap> {
    if support_maps.is_empty() {
        return Err(Error::EmptySupport);
    }
    let batch = FeatureMap::batch(support_maps)?;
    let mut g = Graph::new();
    let x = g.constant(batch);
    let p = prototypes(&mut g, x, 1, support_maps.len())?;
    let shape = g.shape(p)[1..].to_vec();
    FeatureMap::new(g.value(p).clone().reshape(shape)?)
}

pub fn spatial_pool(map: &FeatureMap, mode: PoolMode) -> SpatialMap {
    let mut g = Graph::new();
    let x = g.constant(map.tensor().clone().reshape(with_batch(map)).expect("rank 3"));
    let p = pool(&mut g, x, mode).expect("valid rank");
    SpatialMap(
        g.value(p)
            .clone()
            .reshape(vec![map.height(), map.width()])
            .expect("h x w"),
    )
}

fn with_batch(map: &FeatureMap) -> Vec<usize> {
    vec![1, map.channels(), map.height(), map.width()]
}

fn check_pooled(map: &FeatureMap, pooled: &SpatialMap) -> Result<()> {
    if pooled.0.shape() != [map.height(), map.width()] {
        return Err(Error::shape(format!(
            "pooled map {:?} for feature map {:?}",
            pooled.0.shape(),
            map.tensor().shape()
        )));
    }
    Ok(())
}

/// `(1/(H·W)) Σ_positions (f_c − pooled)²` for every channel `c`.
pub fn intra_score(map: &FeatureMap, pooled: &SpatialMap) -> Result<ScoreVector> {
    check_pooled(map, pooled)?;
    let mut g = Graph::new();
    let x = g.constant(map.tensor().clone().reshape(with_batch(map))?);
    let m = g.constant(pooled.0.clone().reshape(vec![1, map.height(), map.width()])?);
    let s = intra_scores(&mut g, x, m)?;
    Ok(scores_from(&g, s).remove(0))
}

/// Inter-class score of class `class_index` against every other class.
pub fn inter_score(prototypes: &[FeatureMap], pooled: &[SpatialMap], class_index: usize) -> Result<ScoreVector> {
    if prototypes.len() < 2 {
        return Err(Error::SingleClass);
    }
    if pooled.len() != prototypes.len() || class_index >= prototypes.len() {
        return Err(Error::shape(format!(
            "{} prototypes, {} pooled maps, class {class_index}",
            prototypes.len(),
            pooled.len()
        )));
    }
    for (p, m) in prototypes.iter().zip(pooled) {
        check_pooled(p, m)?;
    }
    let first = &prototypes[0];
    let mut g = Graph::new();
    let protos = g.constant(FeatureMap::batch(prototypes)?);
    let mut pooled_data = Vec::with_capacity(pooled.len() * first.height() * first.width());
    for m in pooled {
        pooled_data.extend_from_slice(m.0.data());
    }
    let m = g.constant(Tensor::new(
        vec![pooled.len(), first.height(), first.width()],
        pooled_data,
    )?);
    let s = inter_scores(&mut g, protos, m)?;
    Ok(scores_from(&g, s).swap_remove(class_index))
}

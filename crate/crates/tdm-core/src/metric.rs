//! Prototype classification head: distances, softmax over negative
//! distances, and the episodic cross-entropy.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Sum of squared differences divided by `H·W`.
    #[default]
    SquaredEuclidean,
    /// `1 − cos` between the flattened maps.
    Cosine,
}

/// Distance kind plus the logit temperature: `logit = −d / τ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub temperature: f64,
}

impl Default for Metric {
    fn default() -> Self {
        Metric {
            kind: MetricKind::SquaredEuclidean,
            temperature: 1.0,
        }
    }
}

impl Metric {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// Per-query class probabilities and argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    pub probs: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
}

impl EpisodePrediction {
    pub fn from_probs(probs: &Tensor) -> Self {
        let n = probs.shape()[1];
        let probs: Vec<Vec<f64>> = probs.data().chunks(n).map(<[f64]>::to_vec).collect();
        let predicted = probs
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        EpisodePrediction { probs, predicted }
    }

    /// Fraction of queries whose argmax equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

/// Distances between aligned map pairs: `a` and `b` are `Q × N × C × HW`,
/// the result is `Q × N`.
pub(crate) fn aligned_distances(g: &mut Graph, a: Var, b: Var, kind: MetricKind) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 4 || g.shape(b) != s {
        return Err(Error::shape(format!("distance operands {s:?} and {:?}", g.shape(b))));
    }
    let (q, n, hw) = (s[0], s[1], s[3]);
    let flat = [q, n, s[2] * hw];
    match kind {
        MetricKind::SquaredEuclidean => {
            let sq = g.squared_difference(a, b)?;
            let sq = g.reshape(sq, &flat)?;
            let total = g.sum_axis(sq, 2)?;
            Ok(g.scale(total, 1.0 / hw as f64))
        }
        MetricKind::Cosine => {
            let ab = g.mul(a, b)?;
            let ab = g.reshape(ab, &flat)?;
            let dot = g.sum_axis(ab, 2)?;
            let norm = |g: &mut Graph, x: Var| -> Result<Var> {
                let xx = g.mul(x, x)?;
                let xx = g.reshape(xx, &flat)?;
                let ss = g.sum_axis(xx, 2)?;
                if g.value(ss).data().contains(&0.0) {
                    return Err(Error::ZeroVector);
                }
                Ok(g.sqrt(ss))
            };
            let na = norm(g, a)?;
            let nb = norm(g, b)?;
            let denom = g.mul(na, nb)?;
            let cos = g.div(dot, denom)?;
            let neg = g.scale(cos, -1.0);
            Ok(g.add_scalar(neg, 1.0))
        }
    }
}

/// Logits `−d(w ⊙ P_i, w ⊙ F_q) / τ` for every query `q` and class `i`.
///
/// `protos` is `N × C × H × W`, `queries` is `Q × C × H × W`, and
/// `task_weights` (when present) is `Q × N × C`. Without weights this is the
/// plain prototype head.
pub(crate) fn episode_logits(
    g: &mut Graph,
    protos: Var,
    queries: Var,
    task_weights: Option<Var>,
    metric: &Metric,
) -> Result<Var> {
    let ps = g.shape(protos).to_vec();
    let qs = g.shape(queries).to_vec();
    if ps.len() != 4 || qs.len() != 4 || ps[1..] != qs[1..] {
        return Err(Error::shape(format!("prototypes {ps:?} vs queries {qs:?}")));
    }
    let (n, q, c, hw) = (ps[0], qs[0], ps[1], ps[2] * ps[3]);
    let p = g.reshape(protos, &[n, c, hw])?;
    let mut p = g.expand(p, 0, q)?;
    let f = g.reshape(queries, &[q, c, hw])?;
    let mut f = g.expand(f, 1, n)?;
    if let Some(w) = task_weights {
        p = g.scale_channels(p, w)?;
        f = g.scale_channels(f, w)?;
    }
    let d = aligned_distances(g, p, f, metric.kind)?;
    Ok(g.scale(d, -1.0 / metric.temperature))
}

/// Mean over queries of `−log p(true label)`, with probabilities clamped to
/// `[1e-12, 1 − 1e-12]`.
pub(crate) fn loss_graph(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let n = g.shape(probs)[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, n_way: n });
    }
    let clamped = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let logp = g.log(clamped);
    let picked = g.pick(logp, labels)?;
    let mean = g.mean_axis(picked, 0)?;
    Ok(g.scale(mean, -1.0))
}

/// Distance between two equally shaped maps.
pub fn pairwise_distance(a: &FeatureMap, b: &FeatureMap, kind: MetricKind) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let shape = vec![1, 1, a.channels(), a.height() * a.width()];
    let mut g = Graph::new();
    let x = g.constant(a.tensor().clone().reshape(shape.clone())?);
    let y = g.constant(b.tensor().clone().reshape(shape)?);
    let d = aligned_distances(&mut g, x, y, kind)?;
    Ok(g.value(d).item())
}

/// Classifies queries from already transformed maps:
/// `adaptive_queries[q][i]` is query `q` under class `i`'s task weight and
/// is compared against `adaptive_protos[i]`.
pub fn classify_episode(
    adaptive_protos: &[FeatureMap],
    adaptive_queries: &[Vec<FeatureMap>],
    metric: &Metric,
) -> Result<EpisodePrediction> {
    metric.validate()?;
    let n = adaptive_protos.len();
    if n == 0 || adaptive_queries.iter().any(|row| row.len() != n) {
        return Err(Error::shape("each query needs one map per class"));
    }
    let mut protos = Vec::with_capacity(adaptive_queries.len() * n);
    let mut queries = Vec::with_capacity(adaptive_queries.len() * n);
    for row in adaptive_queries {
        protos.extend(adaptive_protos.iter().cloned());
        queries.extend(row.iter().cloned());
    }
    let p = FeatureMap::batch(&protos)?;
    let s = p.shape().to_vec();
    let aligned = vec![adaptive_queries.len(), n, s[1], s[2] * s[3]];
    let mut g = Graph::new();
    let a = g.constant(p.reshape(aligned.clone())?);
    let b = g.constant(FeatureMap::batch(&queries)?.reshape(aligned)?);
    let d = aligned_distances(&mut g, a, b, metric.kind)?;
    let logits = g.scale(d, -1.0 / metric.temperature);
    let probs = g.softmax_axis(logits, 1)?;
    Ok(EpisodePrediction::from_probs(g.value(probs)))
}

/// Class probabilities `softmax(−d / τ)` from a `Q × N` distance matrix.
pub fn distance_probabilities(distances: &Tensor, temperature: f64) -> Result<Tensor> {
    if distances.rank() != 2 {
        return Err(Error::shape(format!(
            "distances must be Q x N, got {:?}",
            distances.shape()
        )));
    }
    Metric {
        kind: MetricKind::SquaredEuclidean,
        temperature,
    }
    .validate()?;
    let mut g = Graph::new();
    let d = g.constant(distances.clone());
    let logits = g.scale(d, -1.0 / temperature);
    let probs = g.softmax_axis(logits, 1)?;
    Ok(g.value(probs).clone())
}

/// Episodic cross-entropy of a prediction.
pub fn episode_loss(prediction: &EpisodePrediction, true_labels: &[usize]) -> Result<f64> {
    let n = prediction.probs.first().map_or(0, Vec::len);
    if prediction.probs.len() != true_labels.len() || n == 0 {
        return Err(Error::shape("one label per query required"));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![true_labels.len(), n], prediction.probs.concat())?);
    let l = loss_graph(&mut g, p, true_labels)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(c: usize, d: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(c, 1, d.len() / c, d.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_have_zero_distance() {
        let a = fm(2, &[0.5, -1.0, 2.0, 3.0]);
        for kind in [MetricKind::SquaredEuclidean, MetricKind::Cosine] {
            assert!(pairwise_distance(&a, &a, kind).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn hand_distances() {
        let d = pairwise_distance(&fm(1, &[2.0]), &fm(1, &[0.0]), MetricKind::SquaredEuclidean).unwrap();
        assert_eq!(d, 4.0);
        let d = pairwise_distance(&fm(1, &[1.0, 0.0]), &fm(1, &[0.0, 1.0]), MetricKind::Cosine).unwrap();
        assert_eq!(d, 1.0);
        let err = pairwise_distance(&fm(1, &[0.0, 0.0]), &fm(1, &[0.0, 1.0]), MetricKind::Cosine);
        assert!(matches!(err, Err(Error::ZeroVector)));
    }

    #[test]
    fn softmax_of_two_distances() {
        // distances 0 and 2 at tau = 1
        let protos = [fm(1, &[0.0]), fm(1, &[2.0f64.sqrt()])];
        let queries = vec![vec![fm(1, &[0.0]), fm(1, &[0.0])]];
        let p = classify_episode(&protos, &queries, &Metric::default()).unwrap();
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p.probs[0][0] - expect).abs() < 1e-12);
        assert!((p.probs[0][0] - 0.8808).abs() < 1e-4);
        assert!((p.probs[0][1] - 0.1192).abs() < 1e-4);
        assert_eq!(p.predicted, vec![0]);
    }

    #[test]
    fn equal_distances_are_uniform() {
        let protos = vec![fm(1, &[1.0]); 4];
        let queries = vec![vec![fm(1, &[3.0]); 4]];
        let p = classify_episode(&protos, &queries, &Metric::default()).unwrap();
        assert!(p.probs[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn loss_cases() {
        let pred = EpisodePrediction {
            probs: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            predicted: vec![0, 1],
        };
        assert!(episode_loss(&pred, &[0, 1]).unwrap() <= 1e-11);
        let uniform = EpisodePrediction {
            probs: vec![vec![0.2; 5]],
            predicted: vec![0],
        };
        assert!((episode_loss(&uniform, &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            episode_loss(&uniform, &[5]),
            Err(Error::LabelOutOfRange { label: 5, n_way: 5 })
        ));
    }
}

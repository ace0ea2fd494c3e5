use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fc::{FcBlockParams, FcVars};
use super::scores::{self, PoolMode, ScoreVector};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};
use crate::Mode;

/// The three FC blocks plus the blending constants.
#[derive(Clone, Debug, PartialEq)]
pub struct TdmParams {
    pub intra: FcBlockParams,
    pub inter: FcBlockParams,
    pub query: FcBlockParams,
    /// Weight of the intra branch in the support weight.
    pub alpha: f64,
    /// Weight of the support branch in the task weight.
    pub beta: f64,
    /// Half-width of the uniform training-time noise on task weights.
    pub noise_amplitude: f64,
}

/// Which modules run, and how channels are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TdmSettings {
    pub pooling: PoolMode,
    pub sam_enabled: bool,
    pub qam_enabled: bool,
}

impl Default for TdmSettings {
    fn default() -> Self {
        TdmSettings {
            pooling: PoolMode::Avg,
            sam_enabled: true,
            qam_enabled: true,
        }
    }
}

impl TdmSettings {
    pub fn active(&self) -> bool {
        self.sam_enabled || self.qam_enabled
    }
}

/// `(w_intra, w_inter, w_support, intra BN stats, inter BN stats)`.
type SupportGraph = (Var, Var, Var, Option<BatchStats>, Option<BatchStats>);

#[derive(Clone, Copy, Debug)]
pub(crate) struct TdmVars {
    intra: FcVars,
    inter: FcVars,
    query: FcVars,
}

/// Batch statistics from the intra, inter and query blocks.
#[derive(Clone, Debug, Default)]
pub struct TdmStats {
    pub intra: Option<BatchStats>,
    pub inter: Option<BatchStats>,
    pub query: Option<BatchStats>,
}

/// Graph handles for every weight produced for one episode.
#[derive(Clone, Debug)]
pub(crate) struct TdmGraph {
    /// `N × C`, present when SAM runs.
    pub w_intra: Option<Var>,
    pub w_inter: Option<Var>,
    /// `N × C`.
    pub w_support: Var,
    /// `Q × C`.
    pub w_query: Var,
    /// `Q × N × C`: the task weight of class `i` as seen by query `q`.
    pub w_task: Var,
    pub stats: TdmStats,
}

pub fn init_tdm(channels: usize, seed: u64, alpha: f64, beta: f64, noise_amplitude: f64) -> Result<TdmParams> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "alpha {alpha} and beta {beta} must lie in [0, 1]"
        )));
    }
    if !(noise_amplitude >= 0.0 && noise_amplitude.is_finite()) {
        return Err(Error::Config(format!("noise amplitude {noise_amplitude} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TdmParams {
        intra: FcBlockParams::init(channels, &mut rng),
        inter: FcBlockParams::init(channels, &mut rng),
        query: FcBlockParams::init(channels, &mut rng),
        alpha,
        beta,
        noise_amplitude,
    })
}

/// `a·x + (1 − a)·y`.
fn blend(g: &mut Graph, a: f64, x: Var, y: Var) -> Result<Var> {
    let xs = g.scale(x, a);
    let ys = g.scale(y, 1.0 - a);
    g.add(xs, ys)
}

impl TdmVars {
    pub(crate) fn all(&self) -> Vec<Var> {
        [self.intra, self.inter, self.query]
            .iter()
            .flat_map(FcVars::all)
            .collect()
    }
}

impl TdmParams {
    pub fn channels(&self) -> usize {
        self.intra.channels()
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> TdmVars {
        TdmVars {
            intra: self.intra.bind(g, requires_grad),
            inter: self.inter.bind(g, requires_grad),
            query: self.query.bind(g, requires_grad),
        }
    }

    pub fn apply_running_updates(&mut self, stats: &TdmStats, momentum: f64) {
        for (block, st) in [
            (&mut self.intra, &stats.intra),
            (&mut self.inter, &stats.inter),
            (&mut self.query, &stats.query),
        ] {
            if let Some(st) = st {
                block.norm.update_running(st, momentum);
            }
        }
    }

    /// Support weights `α·b_intra(R_intra) + (1 − α)·b_inter(R_inter)` from
    /// `N × C` score batches.
    pub(crate) fn support_graph(
        &self,
        g: &mut Graph,
        vars: &TdmVars,
        intra: Var,
        inter: Var,
        mode: Mode,
    ) -> Result<SupportGraph> {
        let (wi, si) = self.intra.forward(g, &vars.intra, intra, mode)?;
        let (wo, so) = self.inter.forward(g, &vars.inter, inter, mode)?;
        let ws = blend(g, self.alpha, wi, wo)?;
        Ok((wi, wo, ws, si, so))
    }

    /// Per-query weights from each query's own intra score.
    pub(crate) fn query_graph(
        &self,
        g: &mut Graph,
        vars: &TdmVars,
        queries: Var,
        pooling: PoolMode,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let pooled = scores::pool(g, queries, pooling)?;
        let r = scores::intra_scores(g, queries, pooled)?;
        self.query.forward(g, &vars.query, r, mode)
    }

    /// `Q × N × C` task weights `β·w_S[i] + (1 − β)·w_Q[q]`, plus uniform
    /// noise in `±noise_amplitude` when a noise stream is supplied.
    pub(crate) fn task_graph(
        &self,
        g: &mut Graph,
        w_support: Var,
        w_query: Var,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = g.shape(w_support)[0];
        let q = g.shape(w_query)[0];
        let ws = g.expand(w_support, 0, q)?;
        let wq = g.expand(w_query, 1, n)?;
        let wt = blend(g, self.beta, ws, wq)?;
        match noise {
            Some(rng) if self.noise_amplitude > 0.0 => {
                let shape = g.shape(wt).to_vec();
                let a = self.noise_amplitude;
                let data = (0..shape.iter().product()).map(|_| rng.random_range(-a..=a)).collect();
                let eps = g.constant(Tensor::new(shape, data)?);
                g.add(wt, eps)
            }
            _ => Ok(wt),
        }
    }

    /// Full weight computation for one episode. `protos` is `N × C × H × W`,
    /// `queries` is `Q × C × H × W` (raw, untransformed features). Disabled
    /// modules contribute all-ones weights; with both disabled the task
    /// weight is exactly all-ones and no noise is drawn.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        vars: &TdmVars,
        settings: &TdmSettings,
        protos: Var,
        queries: Var,
        mode: Mode,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<TdmGraph> {
        let (n, c) = (g.shape(protos)[0], g.shape(protos)[1]);
        let q = g.shape(queries)[0];
        if c != self.channels() || g.shape(queries)[1] != c {
            return Err(Error::shape(format!(
                "TDM blocks are sized for C = {}, features have C = {c}",
                self.channels()
            )));
        }
        let mut stats = TdmStats::default();
        let (w_intra, w_inter, w_support) = if settings.sam_enabled {
            let pooled = scores::pool(g, protos, settings.pooling)?;
            let intra = scores::intra_scores(g, protos, pooled)?;
            let inter = scores::inter_scores(g, protos, pooled)?;
            let (wi, wo, ws, si, so) = self.support_graph(g, vars, intra, inter, mode)?;
            stats.intra = si;
            stats.inter = so;
            (Some(wi), Some(wo), ws)
        } else {
            (None, None, g.constant(Tensor::ones(&[n, c])))
        };
        let w_query = if settings.qam_enabled {
            let (wq, sq) = self.query_graph(g, vars, queries, settings.pooling, mode)?;
            stats.query = sq;
            wq
        } else {
            g.constant(Tensor::ones(&[q, c]))
        };
        let w_task = if settings.active() {
            let noise = if mode.is_train() { noise } else { None };
            self.task_graph(g, w_support, w_query, noise)?
        } else {
            g.constant(Tensor::ones(&[q, n, c]))
        };
        Ok(TdmGraph {
            w_intra,
            w_inter,
            w_support,
            w_query,
            w_task,
            stats,
        })
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().expect("rank >= 1");
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn score_batch(scores: &[ScoreVector]) -> Result<Tensor> {
    let c = scores.first().map(|s| s.0.len()).ok_or(Error::SingleClass)?;
    let mut data = Vec::with_capacity(scores.len() * c);
    for s in scores {
        if s.0.len() != c {
            return Err(Error::shape("score vectors of different lengths"));
        }
        data.extend_from_slice(&s.0);
    }
    Tensor::new(vec![scores.len(), c], data)
}

/// Support weight per class, batched over the N classes.
pub fn support_weights(
    tdm: &TdmParams,
    intra: &[ScoreVector],
    inter: &[ScoreVector],
    mode: Mode,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = tdm.bind(&mut g, false);
    let i = g.constant(score_batch(intra)?);
    let o = g.constant(score_batch(inter)?);
    let (_, _, ws, _, _) = tdm.support_graph(&mut g, &vars, i, o, mode)?;
    Ok(rows(g.value(ws)))
}

/// Query weight for each map, batched over all queries.
pub fn query_weights(
    tdm: &TdmParams,
    query_maps: &[FeatureMap],
    pooling: PoolMode,
    mode: Mode,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = tdm.bind(&mut g, false);
    let x = g.constant(FeatureMap::batch(query_maps)?);
    let (wq, _) = tdm.query_graph(&mut g, &vars, x, pooling, mode)?;
    Ok(rows(g.value(wq)))
}

/// Task weight per class for a single query. Training mode adds noise drawn
/// from `rng`; evaluation mode ignores it.
pub fn task_weights(
    tdm: &TdmParams,
    w_support: &[Vec<f64>],
    w_query: &[f64],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let c = w_query.len();
    if w_support.iter().any(|w| w.len() != c) || w_support.is_empty() {
        return Err(Error::shape("support and query weights differ in length"));
    }
    let mut g = Graph::new();
    let ws = g.constant(Tensor::new(vec![w_support.len(), c], w_support.concat())?);
    let wq = g.constant(Tensor::new(vec![1, c], w_query.to_vec())?);
    let noise = mode.is_train().then_some(rng);
    let wt = tdm.task_graph(&mut g, ws, wq, noise)?;
    Ok(rows(g.value(wt)))
}

/// Channel-wise scaling of a feature map.
pub fn apply_weights(weight: &[f64], map: &FeatureMap) -> Result<FeatureMap> {
    if weight.len() != map.channels() {
        return Err(Error::shape(format!(
            "{} weights for {} channels",
            weight.len(),
            map.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(map.tensor().clone());
    let w = g.constant(Tensor::new(vec![weight.len()], weight.to_vec())?);
    let y = g.scale_channels(x, w)?;
    FeatureMap::new(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alpha: f64, beta: f64) -> TdmParams {
        let mut p = init_tdm(4, 11, alpha, beta, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.intra.randomize_output(&mut rng);
        p.inter.randomize_output(&mut rng);
        p.query.randomize_output(&mut rng);
        p
    }

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector(v.to_vec())
    }

    #[test]
    fn alpha_endpoints_select_one_branch() {
        let intra = [sv(&[0.1, 0.5, 0.2, 0.9]), sv(&[1.0, 0.0, 0.3, 0.4])];
        let inter = [sv(&[0.7, 0.2, 0.2, 0.1]), sv(&[0.0, 0.6, 0.8, 0.4])];
        let p1 = params(1.0, 0.5);
        let w = support_weights(&p1, &intra, &inter, Mode::Eval).unwrap();
        let only_intra = fc_rows(&p1.intra, &intra);
        assert_eq!(w, only_intra);
        let p0 = params(0.0, 0.5);
        let w = support_weights(&p0, &intra, &inter, Mode::Eval).unwrap();
        assert_eq!(w, fc_rows(&p0.inter, &inter));
    }

    fn fc_rows(block: &FcBlockParams, s: &[ScoreVector]) -> Vec<Vec<f64>> {
        rows(&super::super::fc::fc_block_forward(block, &score_batch(s).unwrap(), Mode::Eval).unwrap())
    }

    #[test]
    fn half_alpha_of_ones_is_ones() {
        let p = init_tdm(4, 0, 0.5, 0.5, 0.2).unwrap();
        let s = [sv(&[0.1, 0.5, 0.2, 0.9]), sv(&[1.0, 0.0, 0.3, 0.4])];
        let w = support_weights(&p, &s, &s, Mode::Eval).unwrap();
        assert!(w.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn task_weight_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = vec![0.3, 1.7, 1.0];
        for beta in [0.0, 0.25, 0.5, 1.0] {
            let p = init_tdm(3, 0, 0.5, beta, 0.2).unwrap();
            let t = task_weights(&p, &[w.clone(), w.clone()], &w, Mode::Eval, &mut rng).unwrap();
            for row in t {
                for (a, b) in row.iter().zip(&w) {
                    assert!((a - b).abs() <= 1e-15 * b.abs());
                }
            }
        }
        let p = init_tdm(3, 0, 0.5, 1.0, 0.2).unwrap();
        let ws = vec![vec![0.3, 1.2, 0.9], vec![1.9, 0.1, 1.0]];
        let t = task_weights(&p, &ws, &[0.5, 0.5, 0.5], Mode::Eval, &mut rng).unwrap();
        assert_eq!(t, ws);
    }

    #[test]
    fn training_noise_is_bounded_and_centred() {
        let p = init_tdm(100, 0, 0.5, 0.5, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ones = vec![1.0; 100];
        let mut deltas = Vec::new();
        for _ in 0..10 {
            let t = task_weights(&p, &vec![ones.clone(); 10], &ones, Mode::Train, &mut rng).unwrap();
            deltas.extend(t.iter().flatten().map(|v| v - 1.0));
        }
        assert_eq!(deltas.len(), 10_000);
        assert!(deltas.iter().all(|d| (-0.2..=0.2).contains(d)));
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn apply_weights_cases() {
        let m = FeatureMap::from_vec(2, 1, 1, vec![1.0, 4.0]).unwrap();
        assert_eq!(apply_weights(&[2.0, 0.5], &m).unwrap().tensor().data(), &[2.0, 2.0]);
        assert_eq!(apply_weights(&[1.0, 1.0], &m).unwrap(), m);
        assert!(apply_weights(&[0.0, 0.0], &m)
            .unwrap()
            .tensor()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(apply_weights(&[1.0], &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_init_query_weights_are_ones() {
        let p = init_tdm(3, 5, 0.5, 0.5, 0.2).unwrap();
        let q = FeatureMap::from_vec(3, 2, 2, (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        let w = query_weights(&p, &[q.clone(), q], PoolMode::Avg, Mode::Eval).unwrap();
        assert!(w.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn alpha_beta_range_checked() {
        assert!(init_tdm(4, 0, 1.5, 0.5, 0.2).is_err());
        assert!(init_tdm(4, 0, 0.5, -0.1, 0.2).is_err());
    }
}

//! The full episode pipeline: backbone, prototypes, TDM weights and the
//! metric head, wired into one differentiable graph.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_backbone, BackboneParams, BackboneVars, FeatureMap};
use crate::data::EpisodeBatch;
use crate::error::{Error, Result};
use crate::metric::{episode_logits, loss_graph, EpisodePrediction, Metric};
use crate::norm::BN_MOMENTUM;
use crate::tdm::{init_tdm, pool, prototypes, TdmGraph, TdmParams, TdmSettings, TdmStats, TdmVars};
use crate::tensor::{BatchStats, Graph, Tensor, Var};
use crate::Mode;

const TDM_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// How logits are formed from the raw features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Task-weighted prototypes and queries, per [`TdmSettings`].
    #[default]
    Tdm,
    /// Plain prototype classifier on raw features; TDM parameters unused.
    ProtoNet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelSettings {
    pub head: Head,
    pub tdm: TdmSettings,
    pub metric: Metric,
}

/// Whether a named tensor is trained or is a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Learnable,
    Buffer,
}

/// Backbone plus TDM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub tdm: TdmParams,
}

pub(crate) struct ModelVars {
    backbone: BackboneVars,
    tdm: TdmVars,
}

impl ModelVars {
    /// Learnable handles in [`Model::learnable`] order.
    pub(crate) fn learnable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.backbone.blocks {
            out.extend([b.kernel, b.norm.scale, b.norm.shift]);
        }
        out.extend(self.tdm.all());
        out
    }
}

/// Graph handles produced by one forward pass.
pub(crate) struct EpisodeGraph {
    /// `N × C × H × W`.
    pub protos: Var,
    pub tdm: Option<TdmGraph>,
    /// `Q × N`.
    pub probs: Var,
    pub loss: Var,
    pub backbone_stats: Vec<Option<BatchStats>>,
}

/// Batch statistics gathered in one training step.
#[derive(Clone, Debug, Default)]
pub struct RunningUpdates {
    pub backbone: Vec<Option<BatchStats>>,
    pub tdm: TdmStats,
}

/// Loss, gradients (in [`Model::learnable`] order) and batch statistics of
/// one training-mode pass.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub updates: RunningUpdates,
}

/// Eval-mode weights of one episode, as plain tensors.
#[derive(Clone, Debug)]
pub struct EpisodeWeights {
    /// `N × C`, absent when SAM is off.
    pub w_intra: Option<Tensor>,
    pub w_inter: Option<Tensor>,
    /// `N × C`.
    pub w_support: Tensor,
    /// `Q × C`.
    pub w_query: Tensor,
    /// `Q × N × C`.
    pub w_task: Tensor,
    /// Raw prototypes, `N × C × H × W`.
    pub prototypes: Tensor,
}

impl Model {
    /// Backbone from `seed`, TDM blocks from a derived seed, both with the
    /// identity-at-init TDM output layers.
    pub fn init(channel_plan: &[usize], seed: u64, alpha: f64, beta: f64, noise_amplitude: f64) -> Result<Model> {
        let backbone = init_backbone(channel_plan, seed)?;
        let tdm = init_tdm(
            backbone.out_channels(),
            seed.wrapping_add(TDM_SEED_OFFSET),
            alpha,
            beta,
            noise_amplitude,
        )?;
        Ok(Model { backbone, tdm })
    }

    /// Every tensor with its name and role. Learnable tensors appear in the
    /// order used by gradients and optimizers.
    pub fn tensors(&self) -> Vec<(String, TensorRole, &Tensor)> {
        let mut learn = Vec::new();
        let mut buf = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            learn.push((format!("backbone.{i}.kernel"), &b.kernel));
            learn.push((format!("backbone.{i}.norm.scale"), &b.norm.scale));
            learn.push((format!("backbone.{i}.norm.shift"), &b.norm.shift));
            buf.push((format!("backbone.{i}.norm.running_mean"), &b.norm.running_mean));
            buf.push((format!("backbone.{i}.norm.running_var"), &b.norm.running_var));
        }
        for (block, p) in [
            ("intra", &self.tdm.intra),
            ("inter", &self.tdm.inter),
            ("query", &self.tdm.query),
        ] {
            for (j, (name, t)) in p.tensors().into_iter().enumerate() {
                let entry = (format!("tdm.{block}.{name}"), t);
                if j < 6 {
                    learn.push(entry);
                } else {
                    buf.push(entry);
                }
            }
        }
        tag(learn, TensorRole::Learnable)
            .chain(tag(buf, TensorRole::Buffer))
            .collect()
    }

    /// Mutable counterpart of [`Model::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, TensorRole, &mut Tensor)> {
        let mut learn = Vec::new();
        let mut buf = Vec::new();
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            learn.push((format!("backbone.{i}.kernel"), &mut b.kernel));
            learn.push((format!("backbone.{i}.norm.scale"), &mut b.norm.scale));
            learn.push((format!("backbone.{i}.norm.shift"), &mut b.norm.shift));
            buf.push((format!("backbone.{i}.norm.running_mean"), &mut b.norm.running_mean));
            buf.push((format!("backbone.{i}.norm.running_var"), &mut b.norm.running_var));
        }
        for (block, p) in [
            ("intra", &mut self.tdm.intra),
            ("inter", &mut self.tdm.inter),
            ("query", &mut self.tdm.query),
        ] {
            for (j, (name, t)) in p.tensors_mut().into_iter().enumerate() {
                let entry = (format!("tdm.{block}.{name}"), t);
                if j < 6 {
                    learn.push(entry);
                } else {
                    buf.push(entry);
                }
            }
        }
        tag(learn, TensorRole::Learnable)
            .chain(tag(buf, TensorRole::Buffer))
            .collect()
    }

    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        self.tensors()
            .into_iter()
            .filter(|(_, r, _)| *r == TensorRole::Learnable)
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, r, _)| *r == TensorRole::Learnable)
            .map(|(_, _, t)| t)
            .collect()
    }

    /// A copy with the learnable tensors replaced, in [`Model::learnable`]
    /// order.
    pub fn with_learnable(&self, values: &[Tensor]) -> Result<Model> {
        let mut m = self.clone();
        let slots = m.learnable_mut();
        if slots.len() != values.len() {
            return Err(Error::shape(format!(
                "{} learnable tensors, {} values",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(format!("{:?} vs {:?}", slot.shape(), v.shape())));
            }
            *slot = v.clone();
        }
        Ok(m)
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.bind(g, requires_grad),
            tdm: self.tdm.bind(g, requires_grad),
        }
    }

    /// Builds the whole episode graph. Support and query images go through
    /// the backbone as one batch. `noise` is only consulted in training mode
    /// with an active TDM head.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        batch: &EpisodeBatch,
        settings: &ModelSettings,
        mode: Mode,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<EpisodeGraph> {
        settings.metric.validate()?;
        let spec = batch.spec;
        let (ns, nq) = (spec.support_len(), spec.query_len());
        if batch.support.shape()[0] != ns || batch.query.shape()[0] != nq || batch.query_labels.len() != nq {
            return Err(Error::shape(format!(
                "episode {spec:?} with {} support and {} query images",
                batch.support.shape()[0],
                batch.query.shape()[0]
            )));
        }
        if batch.support.shape()[1..] != batch.query.shape()[1..] {
            return Err(Error::shape("support and query images differ in shape"));
        }
        let mut shape = batch.support.shape().to_vec();
        shape[0] = ns + nq;
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(batch.support.data());
        data.extend_from_slice(batch.query.data());
        let images = g.constant(Tensor::new(shape, data)?);

        let (feats, backbone_stats) = self.backbone.forward(g, &vars.backbone, images, mode)?;
        let support_idx: Vec<usize> = (0..ns).collect();
        let query_idx: Vec<usize> = (ns..ns + nq).collect();
        let support = g.select_rows(feats, &support_idx)?;
        let queries = g.select_rows(feats, &query_idx)?;
        let protos = prototypes(g, support, spec.n_way, spec.k_shot)?;

        let (tdm, weights) = match settings.head {
            Head::ProtoNet => (None, None),
            Head::Tdm => {
                let t = self
                    .tdm
                    .forward(g, &vars.tdm, &settings.tdm, protos, queries, mode, noise)?;
                let w = t.w_task;
                (Some(t), Some(w))
            }
        };
        let logits = episode_logits(g, protos, queries, weights, &settings.metric)?;
        let probs = g.softmax_axis(logits, 1)?;
        let loss = loss_graph(g, probs, &batch.query_labels)?;
        Ok(EpisodeGraph {
            protos,
            tdm,
            probs,
            loss,
            backbone_stats,
        })
    }

    /// Eval-mode prediction and loss. Parameters are not touched.
    pub fn predict(&self, batch: &EpisodeBatch, settings: &ModelSettings) -> Result<(EpisodePrediction, f64)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, batch, settings, Mode::Eval, None)?;
        let loss = g.value(out.loss).item();
        Ok((EpisodePrediction::from_probs(g.value(out.probs)), loss))
    }

    /// Episode loss in the given mode without gradients.
    pub fn loss(
        &self,
        batch: &EpisodeBatch,
        settings: &ModelSettings,
        mode: Mode,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, batch, settings, mode, noise)?;
        Ok(g.value(out.loss).item())
    }

    /// Training-mode loss and gradients of every learnable tensor.
    pub fn gradients(
        &self,
        batch: &EpisodeBatch,
        settings: &ModelSettings,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<StepGradients> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let out = self.forward(&mut g, &vars, batch, settings, Mode::Train, noise)?;
        let grads = g.backward(out.loss)?;
        let grads = vars
            .learnable()
            .into_iter()
            .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        Ok(StepGradients {
            loss: g.value(out.loss).item(),
            grads,
            updates: RunningUpdates {
                backbone: out.backbone_stats,
                tdm: out.tdm.map(|t| t.stats).unwrap_or_default(),
            },
        })
    }

    /// Folds one step's batch statistics into the running statistics.
    pub fn apply_running_updates(&mut self, updates: &RunningUpdates) {
        self.backbone.apply_running_updates(&updates.backbone, BN_MOMENTUM);
        self.tdm.apply_running_updates(&updates.tdm, BN_MOMENTUM);
    }

    /// Raw feature maps of a `B × C × H × W` image batch in eval mode.
    pub fn features(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        Ok(crate::backbone::extract_features(&self.backbone, images, Mode::Eval)?.0)
    }

    /// Every eval-mode weight of one episode. Disabled modules show up as
    /// all-ones tensors.
    pub fn episode_weights(&self, batch: &EpisodeBatch, tdm: &TdmSettings) -> Result<EpisodeWeights> {
        let settings = ModelSettings {
            head: Head::Tdm,
            tdm: *tdm,
            metric: Metric::default(),
        };
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, batch, &settings, Mode::Eval, None)?;
        let t = out.tdm.expect("TDM head");
        let val = |v: Var| g.value(v).clone();
        Ok(EpisodeWeights {
            w_intra: t.w_intra.map(val),
            w_inter: t.w_inter.map(val),
            w_support: val(t.w_support),
            w_query: val(t.w_query),
            w_task: val(t.w_task),
            prototypes: val(out.protos),
        })
    }

    /// Channel-pooled maps (`N × H × W`) of a prototype batch.
    pub fn pooled_maps(prototypes: &Tensor, mode: crate::tdm::PoolMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(prototypes.clone());
        let m = pool(&mut g, p, mode)?;
        Ok(g.value(m).clone())
    }
}

fn tag<T>(items: Vec<(String, T)>, role: TensorRole) -> impl Iterator<Item = (String, TensorRole, T)> {
    items.into_iter().map(move |(n, t)| (n, role, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, sample_episode, EpisodeSpec, Side, SyntheticSpec};
    use rand::SeedableRng;

    fn tiny_batch(seed: u64) -> EpisodeBatch {
        let spec = SyntheticSpec {
            num_classes: 6,
            images_per_class: 4,
            height: 16,
            width: 16,
            ..SyntheticSpec::default()
        };
        let split = generate_dataset(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = sample_episode(&split, Side::Base, &EpisodeSpec::new(2, 1, 2).unwrap(), &mut rng).unwrap();
        ep.to_batch(&split)
    }

    #[test]
    fn names_are_unique_and_learnables_come_first() {
        let m = Model::init(&[3, 4, 4, 4, 8], 0, 0.5, 0.5, 0.2).unwrap();
        let t = m.tensors();
        let mut names: Vec<_> = t.iter().map(|(n, _, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), t.len());
        let first_buffer = t.iter().position(|(_, r, _)| *r == TensorRole::Buffer).unwrap();
        assert!(t[first_buffer..].iter().all(|(_, r, _)| *r == TensorRole::Buffer));
        // 4 blocks x 3 + 3 fc blocks x 6
        assert_eq!(first_buffer, 30);
    }

    #[test]
    fn tensors_and_tensors_mut_agree() {
        let mut m = Model::init(&[3, 4, 4, 4, 8], 1, 0.5, 0.5, 0.2).unwrap();
        let a: Vec<_> = m.tensors().into_iter().map(|(n, r, t)| (n, r, t.clone())).collect();
        let b: Vec<_> = m.tensors_mut().into_iter().map(|(n, r, t)| (n, r, t.clone())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_count_matches_learnables() {
        let m = Model::init(&[3, 4, 4, 4, 8], 2, 0.5, 0.5, 0.2).unwrap();
        let batch = tiny_batch(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let step = m.gradients(&batch, &ModelSettings::default(), Some(&mut rng)).unwrap();
        assert_eq!(step.grads.len(), m.learnable().len());
        for (g, (_, t)) in step.grads.iter().zip(m.learnable()) {
            assert_eq!(g.shape(), t.shape());
        }
        assert!(step.loss.is_finite());
    }

    #[test]
    fn identity_tdm_matches_protonet_exactly() {
        let m = Model::init(&[3, 4, 4, 4, 8], 3, 0.5, 0.5, 0.2).unwrap();
        let batch = tiny_batch(1);
        let tdm = ModelSettings::default();
        let proto = ModelSettings {
            head: Head::ProtoNet,
            ..tdm
        };
        assert_eq!(m.predict(&batch, &tdm).unwrap(), m.predict(&batch, &proto).unwrap());
    }

    #[test]
    fn with_learnable_round_trips() {
        let m = Model::init(&[3, 4, 4, 4, 8], 4, 0.5, 0.5, 0.2).unwrap();
        let vals: Vec<Tensor> = m.learnable().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(m.with_learnable(&vals).unwrap(), m);
        assert!(m.with_learnable(&vals[1..]).is_err());
    }
}

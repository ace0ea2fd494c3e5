//! Four-block convolutional feature extractor.
//!
//! Each block is `conv 3×3 (padding 1) → batch norm → ReLU → 2×2 max-pool`,
//! so an `H × W` input comes out at `H/16 × W/16`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::{uniform_tensor, BatchNormParams, BatchNormVars};
use crate::tensor::{BatchStats, Graph, Tensor, Var};
use crate::Mode;

pub const BLOCKS: usize = 4;
const KERNEL: usize = 3;

/// The desk-scale channel plan: 3 → 16 → 16 → 16 → 32.
pub const DEFAULT_PLAN: [usize; BLOCKS + 1] = [3, 16, 16, 16, 32];

/// A `C × H × W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map must be C x H x W, got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap(tensor))
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        FeatureMap::new(Tensor::new(vec![c, h, w], data)?)
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Splits a `B × C × H × W` tensor into `B` maps.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<FeatureMap>> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("expected B x C x H x W, got {s:?}")));
        }
        let n = s[1] * s[2] * s[3];
        batch
            .data()
            .chunks(n)
            .map(|d| FeatureMap::from_vec(s[1], s[2], s[3], d.to_vec()))
            .collect()
    }

    /// Stacks equally shaped maps into `B × C × H × W`.
    pub fn batch(maps: &[FeatureMap]) -> Result<Tensor> {
        let first = maps.first().ok_or(Error::EmptySupport)?;
        let shape = first.0.shape().to_vec();
        let mut data = Vec::with_capacity(maps.len() * first.0.len());
        for m in maps {
            if m.0.shape() != shape {
                return Err(Error::shape(format!("{:?} vs {shape:?}", m.0.shape())));
            }
            data.extend_from_slice(m.0.data());
        }
        let mut full = vec![maps.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `out × in × 3 × 3`.
    pub kernel: Tensor,
    pub norm: BatchNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub channel_plan: Vec<usize>,
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockVars {
    pub kernel: Var,
    pub norm: BatchNormVars,
}

#[derive(Clone, Debug)]
pub(crate) struct BackboneVars {
    pub blocks: Vec<BlockVars>,
}

pub fn validate_plan(plan: &[usize]) -> Result<()> {
    if plan.len() != BLOCKS + 1 {
        return Err(Error::InvalidPlan(format!(
            "expected {} entries (input + {BLOCKS} blocks), got {plan:?}",
            BLOCKS + 1
        )));
    }
    if plan.contains(&0) {
        return Err(Error::InvalidPlan(format!("zero-width stage in {plan:?}")));
    }
    Ok(())
}

/// Conv weights uniform in `±1/√fan_in` with `fan_in = in · 3 · 3`; batch
/// norm starts at scale 1, shift 0.
pub fn init_backbone(channel_plan: &[usize], seed: u64) -> Result<BackboneParams> {
    validate_plan(channel_plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = channel_plan
        .windows(2)
        .map(|io| {
            let (cin, cout) = (io[0], io[1]);
            let bound = 1.0 / ((cin * KERNEL * KERNEL) as f64).sqrt();
            ConvBlock {
                kernel: uniform_tensor(&mut rng, &[cout, cin, KERNEL, KERNEL], bound),
                norm: BatchNormParams::new(cout),
            }
        })
        .collect();
    Ok(BackboneParams {
        channel_plan: channel_plan.to_vec(),
        blocks,
    })
}

impl BackboneParams {
    pub fn out_channels(&self) -> usize {
        *self.channel_plan.last().expect("validated plan")
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> BackboneVars {
        BackboneVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    kernel: g.leaf(b.kernel.clone(), requires_grad),
                    norm: b.norm.bind(g, requires_grad),
                })
                .collect(),
        }
    }

    /// Graph-level forward over a `B × C_in × H × W` image batch. Returns the
    /// feature batch and, in training mode, each block's batch statistics.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<Option<BatchStats>>)> {
        let s = g.shape(images).to_vec();
        let div = 1 << BLOCKS;
        if s.len() != 4 || s[1] != self.channel_plan[0] || !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) {
            return Err(Error::shape(format!(
                "backbone expects B x {} x H x W with H, W divisible by {div}; got {s:?}",
                self.channel_plan[0]
            )));
        }
        let mut x = images;
        let mut stats = Vec::with_capacity(BLOCKS);
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            let conv = g.conv2d(x, bv.kernel, 1)?;
            let (pooled, st) = block.norm.forward_pooled(g, &bv.norm, conv, mode.is_train())?;
            stats.push(st);
            x = g.relu(pooled);
        }
        Ok((x, stats))
    }

    pub fn apply_running_updates(&mut self, stats: &[Option<BatchStats>], momentum: f64) {
        for (block, st) in self.blocks.iter_mut().zip(stats) {
            if let Some(st) = st {
                block.norm.update_running(st, momentum);
            }
        }
    }
}

/// Runs the extractor on an image batch. Training mode also returns the
/// per-block batch statistics; the parameters themselves are not touched.
pub fn extract_features(
    params: &BackboneParams,
    images: &Tensor,
    mode: Mode,
) -> Result<(Vec<FeatureMap>, Vec<Option<BatchStats>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let (out, stats) = params.forward(&mut g, &vars, x, mode)?;
    Ok((FeatureMap::unbatch(g.value(out))?, stats))
}

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BatchStats, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Learnable affine parameters and running statistics of one batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> BatchNormVars {
        BatchNormVars {
            scale: g.leaf(self.scale.clone(), requires_grad),
            shift: g.leaf(self.shift.clone(), requires_grad),
        }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        vars: &BatchNormVars,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        g.batch_norm(
            x,
            vars.scale,
            vars.shift,
            self.running_mean.data(),
            self.running_var.data(),
            train,
            BN_EPS,
        )
    }

    /// [`Self::forward`] followed by 2×2 max pooling, as one graph node.
    pub(crate) fn forward_pooled(
        &self,
        g: &mut Graph,
        vars: &BatchNormVars,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        g.batch_norm_maxpool2(
            x,
            vars.scale,
            vars.shift,
            self.running_mean.data(),
            self.running_var.data(),
            train,
            BN_EPS,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchNormVars {
    pub scale: Var,
    pub shift: Var,
}

/// Uniform draw in `[-bound, bound]` for every element.
pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

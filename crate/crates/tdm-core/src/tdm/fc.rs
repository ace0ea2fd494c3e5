use rand::Rng;

use crate::error::{Error, Result};
use crate::norm::{uniform_tensor, BatchNormParams, BatchNormVars};
use crate::tensor::{BatchStats, Graph, Tensor, Var};
use crate::Mode;

/// `linear(C → 2C) → batch norm → ReLU → linear(2C → C) → 1 + tanh`.
///
/// Weights are stored input-major (`in × out`) so a `B × C` batch multiplies
/// on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct FcBlockParams {
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub norm: BatchNormParams,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FcVars {
    hidden_weight: Var,
    hidden_bias: Var,
    norm: BatchNormVars,
    out_weight: Var,
    out_bias: Var,
}

impl FcVars {
    /// Learnable handles, in the order of [`FcBlockParams::tensors`].
    pub(crate) fn all(&self) -> [Var; 6] {
        [
            self.hidden_weight,
            self.hidden_bias,
            self.norm.scale,
            self.norm.shift,
            self.out_weight,
            self.out_bias,
        ]
    }
}

impl FcBlockParams {
    /// Hidden layer uniform in `±1/√C`; the output layer starts at zero so
    /// the block initially emits exactly 1 everywhere.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        FcBlockParams {
            hidden_weight: uniform_tensor(rng, &[channels, 2 * channels], bound),
            hidden_bias: uniform_tensor(rng, &[2 * channels], bound),
            norm: BatchNormParams::new(2 * channels),
            out_weight: Tensor::zeros(&[2 * channels, channels]),
            out_bias: Tensor::zeros(&[channels]),
        }
    }

    /// Replaces the zero output layer with small random values (`±1/√2C`).
    pub fn randomize_output<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let c = self.channels();
        let bound = 1.0 / ((2 * c) as f64).sqrt();
        self.out_weight = uniform_tensor(rng, &[2 * c, c], bound);
        self.out_bias = uniform_tensor(rng, &[c], bound);
    }

    pub fn channels(&self) -> usize {
        self.out_bias.len()
    }

    /// Every tensor, learnable ones first, in [`FcVars::all`] order.
    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("hidden.weight", &self.hidden_weight),
            ("hidden.bias", &self.hidden_bias),
            ("norm.scale", &self.norm.scale),
            ("norm.shift", &self.norm.shift),
            ("out.weight", &self.out_weight),
            ("out.bias", &self.out_bias),
            ("norm.running_mean", &self.norm.running_mean),
            ("norm.running_var", &self.norm.running_var),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("hidden.weight", &mut self.hidden_weight),
            ("hidden.bias", &mut self.hidden_bias),
            ("norm.scale", &mut self.norm.scale),
            ("norm.shift", &mut self.norm.shift),
            ("out.weight", &mut self.out_weight),
            ("out.bias", &mut self.out_bias),
            ("norm.running_mean", &mut self.norm.running_mean),
            ("norm.running_var", &mut self.norm.running_var),
        ]
    }

    pub(crate) fn bind(&self, g: &mut Graph, requires_grad: bool) -> FcVars {
        FcVars {
            hidden_weight: g.leaf(self.hidden_weight.clone(), requires_grad),
            hidden_bias: g.leaf(self.hidden_bias.clone(), requires_grad),
            norm: self.norm.bind(g, requires_grad),
            out_weight: g.leaf(self.out_weight.clone(), requires_grad),
            out_bias: g.leaf(self.out_bias.clone(), requires_grad),
        }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        vars: &FcVars,
        scores: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = g.shape(scores);
        if s.len() != 2 || s[1] != self.channels() {
            return Err(Error::shape(format!(
                "fc block for C = {} got scores {s:?}",
                self.channels()
            )));
        }
        let h = g.matmul(scores, vars.hidden_weight)?;
        let h = g.add_bias(h, vars.hidden_bias)?;
        let (h, stats) = self.norm.forward(g, &vars.norm, h, mode.is_train())?;
        let h = g.relu(h);
        let o = g.matmul(h, vars.out_weight)?;
        let o = g.add_bias(o, vars.out_bias)?;
        let o = g.tanh(o);
        Ok((g.add_scalar(o, 1.0), stats))
    }
}

/// Runs one block on a `B × C` score batch, returning `B × C` weights in
/// `(0, 2)`. Parameters are not modified.
pub fn fc_block_forward(params: &FcBlockParams, scores: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(scores.clone());
    let (y, _) = params.forward(&mut g, &vars, x, mode)?;
    Ok(g.value(y).clone())
}

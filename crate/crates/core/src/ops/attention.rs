//! Squeeze-and-excitation channel gating.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::{activation, global_avg_pool, linear, Activation};
use crate::tensor::Tensor;

pub const CA_REDUCTION: usize = 4;
/// Nonlinearity between the squeeze and excite projections.
pub const CA_HIDDEN_ACTIVATION: Activation = Activation::Gelu;

pub fn ca_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Weights of one gate: `w1: [C, C/r]`, `b1: [C/r]`, `w2: [C/r, C]`, `b2: [C]`.
#[derive(Clone, Debug)]
pub struct ChannelAttentionWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn channel_attention(x: &Tensor, weights: &ChannelAttentionWeights) -> Result<Tensor> {
    let pooled = global_avg_pool(x)?;
    let c = pooled.numel();
    let pooled = pooled.reshape(&[1, c])?;
    let hidden = activation(
        CA_HIDDEN_ACTIVATION,
        &linear(&pooled, &weights.w1, Some(&weights.b1))?,
    );
    let gate = activation(
        Activation::Sigmoid,
        &linear(&hidden, &weights.w2, Some(&weights.b2))?,
    );
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        px.iter_mut().zip(gate.data()).for_each(|(v, g)| *v *= g);
    }
    Ok(out)
}

/// Tape-side handles of one gate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Tape {
    pub fn channel_attention(&mut self, x: Var, w: ChannelAttentionVars) -> Result<Var> {
        let pooled = self.global_avg_pool(x)?;
        let c = self.value(pooled).numel();
        let pooled = self.reshape(pooled, &[1, c])?;
        let hidden = self.linear(pooled, w.w1, Some(w.b1))?;
        let hidden = self.activation(CA_HIDDEN_ACTIVATION, hidden)?;
        let gate = self.linear(hidden, w.w2, Some(w.b2))?;
        let gate = self.sigmoid(gate)?;
        let gate = self.reshape(gate, &[c])?;
        self.mul_channel(x, gate)
    }
}

//! Channel-then-spatial attention over a C x H x W feature map.
//!
//! Channel gates: sigmoid(MLP(avg-pool) + MLP(max-pool)), one MLP shared
//! between both branches (two layers, ReLU between, no hidden bias).
//! Spatial map: sigmoid(7x7 conv over [channelwise-avg, channelwise-max]),
//! padding 3 so the map matches the input extent.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tape::{GradTape, NodeId};
use crate::ops::{Activation, PoolMode};
use crate::tensor::{NnError, Tensor};

pub const SPATIAL_KERNEL: usize = 7;
pub const SPATIAL_PADDING: usize = 3;

/// Attention parameters for a C-channel feature map with reduction r.
#[derive(Debug, Clone)]
pub struct CbamParams {
    /// C/r x C
    pub mlp_w1: Tensor,
    /// C x C/r
    pub mlp_w2: Tensor,
    pub reduction: usize,
    /// 1 x 2 x 7 x 7
    pub spatial_kernel: Tensor,
    pub spatial_bias: f64,
}

impl CbamParams {
    pub fn validate(&self, channels: usize) -> Result<(), NnError> {
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(NnError::Shape(format!(
                "reduction {} must divide channel count {channels}",
                self.reduction
            )));
        }
        let hidden = channels / self.reduction;
        if self.mlp_w1.shape() != [hidden, channels] {
            return Err(NnError::Shape(format!(
                "mlp_w1 shape {:?}, expected [{hidden}, {channels}]",
                self.mlp_w1.shape()
            )));
        }
        if self.mlp_w2.shape() != [channels, hidden] {
            return Err(NnError::Shape(format!(
                "mlp_w2 shape {:?}, expected [{channels}, {hidden}]",
                self.mlp_w2.shape()
            )));
        }
        if self.spatial_kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
            return Err(NnError::Shape(format!(
                "spatial kernel shape {:?}, expected [1, 2, {SPATIAL_KERNEL}, {SPATIAL_KERNEL}]",
                self.spatial_kernel.shape()
            )));
        }
        Ok(())
    }
}

/// Tape node ids of CBAM parameters inside a larger model.
#[derive(Debug, Clone, Copy)]
pub struct CbamNodes {
    pub mlp_w1: NodeId,
    pub mlp_w2: NodeId,
    pub spatial_kernel: NodeId,
    pub spatial_bias: NodeId,
}

fn mlp_branch(
    tape: &mut GradTape,
    input: NodeId,
    nodes: &CbamNodes,
    hidden_bias: NodeId,
    out_bias: NodeId,
) -> Result<NodeId, NnError> {
    let h = tape.linear(input, nodes.mlp_w1, hidden_bias)?;
    let h = tape.activation(h, Activation::Relu)?;
    tape.linear(h, nodes.mlp_w2, out_bias)
}

/// Channel attention on the tape; returns (gated feature map, gate vector).
pub fn channel_attention_on_tape(
    tape: &mut GradTape,
    feat: NodeId,
    nodes: &CbamNodes,
) -> Result<(NodeId, NodeId), NnError> {
    let (c, _, _) = tape.value(feat).chw()?;
    let hidden = tape.value(nodes.mlp_w1).shape()[0];
    let hidden_bias = tape.leaf(Tensor::zeros(vec![hidden]))?;
    let out_bias = tape.leaf(Tensor::zeros(vec![c]))?;
    let avg = tape.pool(feat, PoolMode::GlobalAvg)?;
    let max = tape.pool(feat, PoolMode::GlobalMax)?;
    let a = mlp_branch(tape, avg, nodes, hidden_bias, out_bias)?;
    let m = mlp_branch(tape, max, nodes, hidden_bias, out_bias)?;
    let sum = tape.add(a, m)?;
    let gates = tape.activation(sum, Activation::Sigmoid)?;
    let gated = tape.scale_by_channel(feat, gates)?;
    Ok((gated, gates))
}

/// Spatial attention on the tape; returns (gated feature map, 1 x H x W map).
pub fn spatial_attention_on_tape(
    tape: &mut GradTape,
    feat: NodeId,
    nodes: &CbamNodes,
) -> Result<(NodeId, NodeId), NnError> {
    let avg = tape.pool(feat, PoolMode::ChannelwiseAvg)?;
    let max = tape.pool(feat, PoolMode::ChannelwiseMax)?;
    let stacked = tape.concat_channels(avg, max)?;
    let conv = tape.conv2d(stacked, nodes.spatial_kernel, nodes.spatial_bias, SPATIAL_PADDING, 1)?;
    let map = tape.activation(conv, Activation::Sigmoid)?;
    let gated = tape.scale_by_spatial(feat, map)?;
    Ok((gated, map))
}

/// Sequential channel-then-spatial attention on the tape.
pub fn apply_on_tape(
    tape: &mut GradTape,
    feat: NodeId,
    nodes: &CbamNodes,
) -> Result<CbamApplied, NnError> {
    let (gated_c, gates) = channel_attention_on_tape(tape, feat, nodes)?;
    let (gated_s, map) = spatial_attention_on_tape(tape, gated_c, nodes)?;
    Ok(CbamApplied { output: gated_s, channel_gates: gates, spatial_map: map })
}

#[derive(Debug, Clone, Copy)]
pub struct CbamApplied {
    pub output: NodeId,
    pub channel_gates: NodeId,
    pub spatial_map: NodeId,
}

fn fresh_nodes(tape: &mut GradTape, params: &CbamParams) -> Result<CbamNodes, NnError> {
    Ok(CbamNodes {
        mlp_w1: tape.leaf(params.mlp_w1.clone())?,
        mlp_w2: tape.leaf(params.mlp_w2.clone())?,
        spatial_kernel: tape.leaf(params.spatial_kernel.clone())?,
        spatial_bias: tape.leaf(Tensor::scalar(params.spatial_bias))?,
    })
}

/// Inference-only channel attention: (F', channel weights).
pub fn channel_attention(feat: &Tensor, params: &CbamParams) -> Result<(Tensor, Vec<f64>), NnError> {
    let (c, _, _) = feat.chw()?;
    params.validate(c)?;
    let mut tape = GradTape::new();
    let f = tape.leaf(feat.clone())?;
    let nodes = fresh_nodes(&mut tape, params)?;
    let (gated, gates) = channel_attention_on_tape(&mut tape, f, &nodes)?;
    Ok((tape.value(gated).clone(), tape.value(gates).data().to_vec()))
}

/// Inference-only spatial attention: (F'', 1 x H x W map).
pub fn spatial_attention(feat: &Tensor, params: &CbamParams) -> Result<(Tensor, Tensor), NnError> {
    let (c, _, _) = feat.chw()?;
    params.validate(c)?;
    let mut tape = GradTape::new();
    let f = tape.leaf(feat.clone())?;
    let nodes = fresh_nodes(&mut tape, params)?;
    let (gated, map) = spatial_attention_on_tape(&mut tape, f, &nodes)?;
    Ok((tape.value(gated).clone(), tape.value(map).clone()))
}

/// Inference-only full CBAM: (F'', channel weights, spatial map).
pub fn cbam_apply(
    feat: &Tensor,
    params: &CbamParams,
) -> Result<(Tensor, Vec<f64>, Tensor), NnError> {
    let (c, _, _) = feat.chw()?;
    params.validate(c)?;
    let mut tape = GradTape::new();
    let f = tape.leaf(feat.clone())?;
    let nodes = fresh_nodes(&mut tape, params)?;
    let applied = apply_on_tape(&mut tape, f, &nodes)?;
    Ok((
        tape.value(applied.output).clone(),
        tape.value(applied.channel_gates).data().to_vec(),
        tape.value(applied.spatial_map).clone(),
    ))
}

//! The three modality encoders and the channel-wise fusion.

use super::{
    EgoEncoderParams, ForwardCtx, ModelConfig, ModelInputs, PositionEncoderParams, Result,
    SkeletonEncoderParams,
};
use crate::features::SkeletonGraph;
use crate::tensor::{Mode, RunningStats, Tensor, Var};

/// Project each positional feature block to the channel width, concatenate,
/// and project back. Purely linear by design; the nonlinearity lives in the
/// graph blocks and the Transformer.
pub(super) fn positional_encoder(
    ctx: &mut ForwardCtx<'_>,
    inputs: &ModelInputs,
    params: &PositionEncoderParams,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    if let Some(l) = &params.pdm {
        let x = ctx.tape.constant(inputs.pdm.clone().expect("validated"))?;
        parts.push(ctx.linear("position.pdm", x, l)?);
    }
    if let Some(l) = &params.displacement {
        let x = ctx
            .tape
            .constant(inputs.displacement.clone().expect("validated"))?;
        parts.push(ctx.linear("position.displacement", x, l)?);
    }
    if let Some(l) = &params.velocity {
        let x = ctx
            .tape
            .constant(inputs.velocity.clone().expect("validated"))?;
        parts.push(ctx.linear("position.velocity", x, l)?);
    }
    let cat = ctx.tape.concat_last(&parts)?;
    ctx.linear("position.out", cat, &params.out)
}

/// Encode ego speed (or one-hot motion state) and acceleration streams.
pub(super) fn ego_encoder(
    ctx: &mut ForwardCtx<'_>,
    inputs: &ModelInputs,
    params: &EgoEncoderParams,
) -> Result<Var> {
    let s = ctx
        .tape
        .constant(inputs.ego_speed.clone().expect("validated"))?;
    let a = ctx
        .tape
        .constant(inputs.ego_accel.clone().expect("validated"))?;
    let se = ctx.linear("ego.speed", s, &params.speed)?;
    let ae = ctx.linear("ego.accel", a, &params.accel)?;
    let cat = ctx.tape.concat_last(&[se, ae])?;
    ctx.linear("ego.out", cat, &params.out)
}

/// Graph-convolutional skeleton encoder.
///
/// The input is batch-normalized per (joint, coordinate) channel over all
/// frames in the batch, then run through the stacked graph blocks: the first
/// block is `relu((E ⊙ Â) X W)`, later blocks add a per-node channel-mixing
/// residual of the previous feature map. The final feature map is flattened
/// per frame and projected to the channel width.
pub(super) fn skeleton_encoder(
    ctx: &mut ForwardCtx<'_>,
    inputs: &ModelInputs,
    params: &SkeletonEncoderParams,
    graph: &SkeletonGraph,
    config: &ModelConfig,
    bn_running: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let k = inputs.skeleton.clone().expect("validated");
    let (b, t, n) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let x = ctx.tape.constant(k)?;

    let flat = ctx.tape.reshape(x, vec![b * t, n * 3])?;
    let gamma = ctx.leaf("skeleton.input_norm.gamma", &params.input_norm.gamma)?;
    let beta = ctx.leaf("skeleton.input_norm.beta", &params.input_norm.beta)?;
    let normed = ctx
        .tape
        .batch_norm(flat, gamma, beta, bn_running, 0.1, 1e-5, mode)?;
    let mut h = ctx.tape.reshape(normed, vec![b * t, n, 3])?;

    let adjacency = Tensor::new(vec![n, n], graph.normalized.clone()).expect("square");
    for (i, block) in params.blocks.iter().enumerate() {
        let adj = ctx.tape.constant(adjacency.clone())?;
        let masked = match &block.edge_mask {
            Some(e) => {
                let mask = ctx.leaf(format!("skeleton.gcn{i}.edge_mask"), e)?;
                ctx.tape.hadamard(mask, adj)?
            }
            None => adj,
        };
        let agg = ctx.tape.matmul_bcast_left(masked, h)?;
        let w = ctx.leaf(format!("skeleton.gcn{i}.weight"), &block.weight)?;
        let lin = ctx.tape.linear(agg, w)?;
        let pre = match &block.channel_mix {
            Some(mix) => {
                let res = ctx.linear(format!("skeleton.gcn{i}.channel_mix"), h, mix)?;
                ctx.tape.add(lin, res)?
            }
            None => lin,
        };
        h = ctx.tape.relu(pre)?;
    }

    let flat = ctx.tape.reshape(h, vec![b, t, n * config.gcn_hidden])?;
    ctx.linear("skeleton.out", flat, &params.out)
}

/// Concatenate the active encoder outputs along channels and project back to
/// the shared width.
pub(super) fn fuse(
    ctx: &mut ForwardCtx<'_>,
    branches: &[Var],
    fusion: &super::Linear,
) -> Result<Var> {
    let cat = ctx.tape.concat_last(branches)?;
    ctx.linear("fusion", cat, fusion)
}

//! Temporal Transformer encoder: sinusoidal positional encoding plus stacked
//! post-norm self-attention layers.

use rand_chacha::ChaCha8Rng;

use super::{EncoderLayerParams, ForwardCtx, ModelConfig, Result};
use crate::tensor::{Mode, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Classic interleaved sine/cosine positional encoding, `[positions, dim]`:
/// `pe[t, 2i] = sin(t / 10000^(2i/dim))`, `pe[t, 2i+1] = cos(t / 10000^(2i/dim))`.
pub fn sinusoidal_positional_encoding(positions: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![positions, dim]);
    for t in 0..positions {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            pe.data_mut()[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Reshape `[b, t, c]` into per-head layout `[b, heads, t, c/heads]`.
fn split_heads(
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    b: usize,
    t: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let r = ctx.tape.reshape(x, vec![b, t, heads, dh])?;
    Ok(ctx.tape.swap_axes(r, 1, 2)?)
}

fn attention(
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    params: &EncoderLayerParams,
    prefix: &str,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    capture: bool,
) -> Result<(Var, Option<Tensor>)> {
    let shape = ctx.tape.value(x).shape().to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let heads = config.attention_heads;
    let dh = c / heads;

    let q = ctx.linear(format!("{prefix}.attention.query"), x, &params.attention.query)?;
    let k = ctx.linear(format!("{prefix}.attention.key"), x, &params.attention.key)?;
    let v = ctx.linear(format!("{prefix}.attention.value"), x, &params.attention.value)?;
    let qh = split_heads(ctx, q, b, t, heads, dh)?;
    let kh = split_heads(ctx, k, b, t, heads, dh)?;
    let vh = split_heads(ctx, v, b, t, heads, dh)?;

    let kt = ctx.tape.transpose_last2(kh)?;
    let raw = ctx.tape.bmm(qh, kt)?;
    let scores = ctx.tape.scale(raw, 1.0 / (dh as f64).sqrt())?;
    let probs = ctx.tape.softmax_last(scores)?;
    let captured = capture.then(|| ctx.tape.value(probs).clone());
    let dropped = ctx.tape.dropout(probs, config.dropout, mode, rng)?;

    let merged = ctx.tape.bmm(dropped, vh)?;
    let merged = ctx.tape.swap_axes(merged, 1, 2)?;
    let flat = ctx.tape.reshape(merged, vec![b, t, c])?;
    let out = ctx.linear(
        format!("{prefix}.attention.output"),
        flat,
        &params.attention.output,
    )?;
    Ok((out, captured))
}

/// Run the stacked encoder. Returns the encoded sequence and, when `capture`
/// is set, the per-layer attention probabilities.
pub(super) fn transformer_encode(
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    layers: &[EncoderLayerParams],
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    capture: bool,
) -> Result<(Var, Option<Vec<Tensor>>)> {
    let shape = ctx.tape.value(x).shape().to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let mut h = if config.sinusoidal_pe {
        let pe = sinusoidal_positional_encoding(t, c);
        let mut tiled = Tensor::zeros(vec![b, t, c]);
        for chunk in tiled.data_mut().chunks_mut(t * c) {
            chunk.copy_from_slice(pe.data());
        }
        let pev = ctx.tape.constant(tiled)?;
        ctx.tape.add(x, pev)?
    } else {
        x
    };

    let mut maps = capture.then(Vec::new);
    for (i, layer) in layers.iter().enumerate() {
        let prefix = format!("transformer.{i}");
        let (attn_out, captured) = attention(ctx, h, layer, &prefix, config, mode, rng, capture)?;
        if let (Some(maps), Some(m)) = (maps.as_mut(), captured) {
            maps.push(m);
        }
        let res = ctx.tape.add(h, attn_out)?;
        let g1 = ctx.leaf(format!("{prefix}.norm1.gamma"), &layer.norm1.gamma)?;
        let b1 = ctx.leaf(format!("{prefix}.norm1.beta"), &layer.norm1.beta)?;
        h = ctx.tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let ff_in = ctx.linear(format!("{prefix}.ff1"), h, &layer.ff1)?;
        let act = ctx.tape.relu(ff_in)?;
        let act = ctx.tape.dropout(act, config.dropout, mode, rng)?;
        let ff_out = ctx.linear(format!("{prefix}.ff2"), act, &layer.ff2)?;
        let res = ctx.tape.add(h, ff_out)?;
        let g2 = ctx.leaf(format!("{prefix}.norm2.gamma"), &layer.norm2.gamma)?;
        let b2 = ctx.leaf(format!("{prefix}.norm2.beta"), &layer.norm2.beta)?;
        h = ctx.tape.layer_norm(res, g2, b2, LAYER_NORM_EPS)?;
    }
    Ok((h, maps))
}

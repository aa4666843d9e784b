//! Forward passes, recorded on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::tensor::IdTensor;

use super::params::{LayerParams, PsdpParams, StackedParams};
use super::{ModelConfig, ModelError, LAYER_NORM_EPS};

/// Lower-triangular attention pattern: position `i` may attend to `j ≤ i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

pub fn causal_mask(size: usize) -> Result<AttentionMask, ModelError> {
    if size == 0 {
        return Err(ModelError::InvalidConfig("mask size must be at least 1".into()));
    }
    let allowed = (0..size * size).map(|k| k % size <= k / size).collect();
    Ok(AttentionMask { size, allowed })
}

/// `[B,T,E] -> [B,H,T,D]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize, head_size: usize) -> Result<Var, ModelError> {
    let s = tape.value(x).shape().to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, head_size])?;
    Ok(tape.swap_axes_12(r)?)
}

/// `[B,H,T,D] -> [B,T,E]`
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let s = tape.value(x).shape().to_vec();
    let swapped = tape.swap_axes_12(x)?;
    Ok(tape.reshape(swapped, &[s[0], s[2], s[1] * s[3]])?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Masked multi-head scaled dot-product self-attention.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    p: &LayerParams<Var>,
    cfg: &ModelConfig,
    mask: &AttentionMask,
) -> Result<Var, ModelError> {
    let (h, d) = (cfg.num_heads, cfg.head_size);
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let q = split_heads(tape, q, h, d)?;
    let k = split_heads(tape, k, h, d)?;
    let v = split_heads(tape, v, h, d)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.mask(scores, mask.as_slice())?;
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.batch_matmul(weights, v, false)?;
    let ctx = merge_heads(tape, ctx)?;
    linear(tape, ctx, p.wo, p.bo)
}

/// Post-norm decoder layer without dropout:
/// `a = LN₁(x + MHA(x))`, `out = LN₂(a + W₂·gelu(W₁·a + b₁) + b₂)`.
pub fn decoder_layer_forward(
    tape: &mut Tape,
    x: Var,
    p: &LayerParams<Var>,
    cfg: &ModelConfig,
    mask: &AttentionMask,
) -> Result<Var, ModelError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_size || shape[1] != mask.size() {
        return Err(ModelError::Shape(format!(
            "decoder layer expects [B, {}, {}], got {shape:?}",
            mask.size(),
            cfg.embed_size
        )));
    }
    let attn = self_attention(tape, x, p, cfg, mask)?;
    let res = tape.add(x, attn)?;
    let a = tape.layer_norm(res, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;
    let hidden = linear(tape, a, p.w1, p.b1)?;
    let hidden = tape.gelu(hidden);
    let ffn = linear(tape, hidden, p.w2, p.b2)?;
    let res = tape.add(a, ffn)?;
    Ok(tape.layer_norm(res, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)?)
}

fn check_len(ids: &IdTensor, cfg: &ModelConfig) -> Result<(), ModelError> {
    if ids.seq_len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.seq_len(),
            max: cfg.max_seq_len,
        });
    }
    Ok(())
}

/// Token embedding plus learned position embedding.
fn embed(tape: &mut Tape, ids: &IdTensor, token: Var, position: Var) -> Result<Var, ModelError> {
    let (b, t) = (ids.batch(), ids.seq_len());
    let positions = IdTensor::new(b, t, (0..b).flat_map(|_| 0..t).collect())?;
    let tok = tape.embedding(token, ids)?;
    let pos = tape.embedding(position, &positions)?;
    Ok(tape.add(tok, pos)?)
}

/// Applies one shared layer `n` times.
fn shared_decoder(
    tape: &mut Tape,
    x: Var,
    p: &LayerParams<Var>,
    cfg: &ModelConfig,
    mask: &AttentionMask,
) -> Result<Var, ModelError> {
    let mut h = x;
    for _ in 0..cfg.num_layers {
        h = decoder_layer_forward(tape, h, p, cfg, mask)?;
    }
    Ok(h)
}

/// Both decoders read the same embedded input; their outputs are fused as
/// `LN(concat(o_A, o_B)·W_p + b_p + (o_A + o_B)/2)` and projected onto the
/// tied token embedding.
pub fn psdp_forward(
    tape: &mut Tape,
    ids: &IdTensor,
    p: &PsdpParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    check_len(ids, cfg)?;
    let mask = causal_mask(ids.seq_len())?;
    let x0 = embed(tape, ids, p.token_embedding, p.position_embedding)?;
    let out_a = shared_decoder(tape, x0, &p.decoder_a, cfg, &mask)?;
    let out_b = shared_decoder(tape, x0, &p.decoder_b, cfg, &mask)?;
    let fused = tape.concat_last(out_a, out_b)?;
    let projected = linear(tape, fused, p.mapping_weight, p.mapping_bias)?;
    let sum = tape.add(out_a, out_b)?;
    let avg = tape.scale(sum, 0.5);
    let pre_norm = tape.add(projected, avg)?;
    let h = tape.layer_norm(pre_norm, p.final_gamma, p.final_beta, LAYER_NORM_EPS)?;
    Ok(tape.matmul_nt(h, p.token_embedding)?)
}

/// Independent layers in sequence, tied head on the last layer's output.
pub fn stacked_forward(
    tape: &mut Tape,
    ids: &IdTensor,
    p: &StackedParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    check_len(ids, cfg)?;
    let mask = causal_mask(ids.seq_len())?;
    let mut h = embed(tape, ids, p.token_embedding, p.position_embedding)?;
    for layer in &p.layers {
        h = decoder_layer_forward(tape, h, layer, cfg, &mask)?;
    }
    Ok(tape.matmul_nt(h, p.token_embedding)?)
}

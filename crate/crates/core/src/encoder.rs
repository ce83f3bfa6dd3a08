//! Self-attention encoder over the flattened feature grid.
//!
//! Sequence tensors inside the transformer are stored token-major (T×C), the
//! transpose of the C×T layout used for feature maps. Attention scores for a
//! head are therefore held as a T_query×T_key matrix with softmax along the
//! key axis (the last one).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, Init, LayerNorm, Linear};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ffn_hidden: 256,
        }
    }
}

impl EncoderConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Splits a T×C matrix into `heads` column groups of width C/heads.
pub fn split_heads<'t>(x: Var<'t>, heads: usize) -> Result<Vec<Var<'t>>> {
    let c = x.shape()[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim("split_heads", format!("{c} channels into {heads} heads")));
    }
    let d = c / heads;
    (0..heads).map(|h| x.narrow(1, h * d, d)).collect()
}

pub fn merge_heads<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    Var::concat(parts, 1)
}

/// Scaled dot-product attention over `heads` groups.
///
/// `bias(h)` may supply an additive Tq×Tk logit term for head `h` (causal
/// mask, log spatial weight map). Returns the merged Tq×C output and the
/// per-head attention matrices.
pub fn multi_head_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    mut bias: impl FnMut(usize) -> Result<Option<Var<'t>>>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let (qs, ks, vs) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let d = q.shape()[1] / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut logits = qs[h].matmul(ks[h].transpose()?)?.scale(scale);
        if let Some(b) = bias(h)? {
            logits = logits.add(b)?;
        }
        let attn = logits.softmax(1)?;
        outs.push(attn.matmul(vs[h])?);
        weights.push(attn);
    }
    Ok((merge_heads(&outs)?, weights))
}

/// Query/key/value/output projections of one attention sublayer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, width: usize) -> Self {
        init.scope(name, |init| AttentionParams {
            q: Linear::new(init, "q", width, width),
            k: Linear::new(init, "k", width, width),
            v: Linear::new(init, "v", width, width),
            out: Linear::new(init, "out", width, width),
        })
    }
}

/// Multi-head self-attention over a T×C sequence.
pub fn self_attention<'t>(
    p: &Bound<'t>,
    params: &AttentionParams,
    x: Var<'t>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let q = params.q.forward(p, x)?;
    let k = params.k.forward(p, x)?;
    let v = params.v.forward(p, x)?;
    let (merged, weights) = multi_head_attention(q, k, v, heads, |_| Ok(mask))?;
    Ok((params.out.forward(p, merged)?, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: &EncoderConfig) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(init, "norm1", config.width),
            attn: AttentionParams::new(init, "attn", config.width),
            norm2: LayerNorm::new(init, "norm2", config.width),
            ffn: FeedForward::new(init, "ffn", config.width, config.ffn_hidden),
        }
    }

    /// Pre-norm residual block: x + SelfAttn(LN(x)), then + FFN(LN(·)).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (a, _) = self_attention(p, &self.attn, self.norm1.forward(p, x)?, heads, None)?;
        let x = x.add(a)?;
        let f = self.ffn.forward(p, self.norm2.forward(p, x)?)?;
        x.add(f)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = init.scope("encoder", |init| {
            (0..config.layers)
                .map(|l| init.scope(l, |init| EncoderBlock::new(init, config)))
                .collect()
        });
        Ok(Encoder {
            config: config.clone(),
            blocks,
        })
    }

    /// Spatial relation features: applies every block to a T×C sequence.
    pub fn encode<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.config.width {
            return Err(Error::dim(
                "encode",
                format!("expected T×{}, got {shape:?}", self.config.width),
            ));
        }
        self.blocks
            .iter()
            .try_fold(tokens, |x, block| block.forward(p, x, self.config.heads))
    }
}

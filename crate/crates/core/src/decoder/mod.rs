//! Sequence decoder: causal self-attention over manipulation tokens, SECA
//! cross-attention onto the encoder memory, and the per-step classifier.

pub mod seca;
pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use seca::{
    build_weight_map, causal_mask, log_maps, predict_center_scale, seca_cross_attention, Geometry, GeometryParams,
    MapBias, SecaMode, SpatialWeightMap,
};
pub use vocab::{LabelSequence, TokenSequence, Vocabulary};

use crate::encoder::{self_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{Bound, FeedForward, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Tensor, Var, NEG_SENTINEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub lambda: f32,
    pub seca: SecaMode,
    pub autoregressive: bool,
    /// Longest label sequence; the decoder sees at most `max_len + 1` inputs.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            ffn_hidden: 256,
            lambda: 4.0,
            seca: SecaMode::MultiHead,
            autoregressive: true,
            max_len: crate::MAX_SEQ_LEN,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.layers == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder needs at least one layer and one step".into()));
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

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: AttentionParams,
    pub norm2: LayerNorm,
    pub cross_attn: AttentionParams,
    pub geometry: Option<GeometryParams>,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, config: &DecoderConfig) -> Result<Self> {
        let c = config.width;
        Ok(DecoderBlock {
            norm1: LayerNorm::new(init, "norm1", c),
            self_attn: AttentionParams::new(init, "self_attn", c),
            norm2: LayerNorm::new(init, "norm2", c),
            cross_attn: AttentionParams::new(init, "cross_attn", c),
            geometry: match config.seca {
                SecaMode::Off => None,
                mode => Some(GeometryParams::new(init, "geometry", c, config.heads, mode)?),
            },
            norm3: LayerNorm::new(init, "norm3", c),
            ffn: FeedForward::new(init, "ffn", c, config.ffn_hidden),
        })
    }
}

/// Diagnostics of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerTrace<'t> {
    pub geometry: Option<Geometry<'t>>,
    pub cross_weights: Vec<Var<'t>>,
}

pub struct DecoderOutput<'t> {
    /// T×V logits with SOS/PAD/NM masked.
    pub logits: Var<'t>,
    pub layers: Vec<LayerTrace<'t>>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    masked_tokens: Vec<usize>,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub memory_norm: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: &DecoderConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let v = vocab.size();
        let c = config.width;
        init.scope("decoder", |init| {
            let token_embed = init.normal("token_embed", &[v, c], 1.0, false);
            let pos_embed = init.normal("pos_embed", &[config.max_len + 1, c], 0.1, false);
            let memory_norm = LayerNorm::new(init, "memory_norm", c);
            let blocks = (0..config.layers)
                .map(|l| init.scope(l, |init| DecoderBlock::new(init, config)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Decoder {
                config: config.clone(),
                vocab_size: v,
                masked_tokens: vec![vocab.sos(), vocab.pad(), vocab.nm()],
                token_embed,
                pos_embed,
                memory_norm,
                blocks,
                final_norm: LayerNorm::new(init, "final_norm", c),
                classifier: Linear::new(init, "classifier", c, v),
            })
        })
    }

    /// Additive output mask making SOS, PAD and NM unpredictable.
    pub fn output_mask(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.vocab_size]);
        for &id in &self.masked_tokens {
            m.data_mut()[id] = NEG_SENTINEL;
        }
        m
    }

    pub fn embed<'t>(&self, p: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        if ids.is_empty() || ids.len() > self.config.max_len + 1 {
            return Err(Error::Contract(format!(
                "decoder input of length {} (allowed 1..={})",
                ids.len(),
                self.config.max_len + 1
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let tokens = p.get(self.token_embed).gather_rows(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        tokens.add(p.get(self.pos_embed).gather_rows(&positions)?)
    }

    /// Runs the decoder stack on embedded inputs `x` (T×C) against encoder
    /// memory (H·W×C) laid out on an H×W grid.
    pub fn forward_embedded<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        memory: Var<'t>,
        grid: (usize, usize),
    ) -> Result<DecoderOutput<'t>> {
        let cfg = &self.config;
        let t = x.shape()[0];
        if memory.shape() != [grid.0 * grid.1, cfg.width] {
            return Err(Error::dim(
                "decoder",
                format!("memory {:?} does not match grid {grid:?} × {}", memory.shape(), cfg.width),
            ));
        }
        let memory = self.memory_norm.forward(p, memory)?;
        let mask = cfg.autoregressive.then(|| p.tape.constant(causal_mask(t)));
        let mut x = x;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, _) = self_attention(p, &block.self_attn, block.norm1.forward(p, x)?, cfg.heads, mask)?;
            x = x.add(a)?;
            let h = block.norm2.forward(p, x)?;
            let (geometry, maps) = match &block.geometry {
                Some(g) => {
                    let geo = predict_center_scale(p, g, h, cfg.heads, cfg.seca)?;
                    let maps = log_maps(&geo, grid, cfg.lambda, cfg.seca)?;
                    (Some(geo), maps)
                }
                None => (None, MapBias::None),
            };
            let (a, cross_weights) = seca_cross_attention(p, &block.cross_attn, h, memory, cfg.heads, &maps)?;
            x = x.add(a)?;
            let f = block.ffn.forward(p, block.norm3.forward(p, x)?)?;
            x = x.add(f)?;
            layers.push(LayerTrace {
                geometry,
                cross_weights,
            });
        }
        let logits = self
            .classifier
            .forward(p, self.final_norm.forward(p, x)?)?
            .add(p.tape.constant(self.output_mask()))?;
        Ok(DecoderOutput { logits, layers })
    }

    /// Teacher-forced pass over a full input prefix.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        ids: &[usize],
        memory: Var<'t>,
        grid: (usize, usize),
    ) -> Result<DecoderOutput<'t>> {
        let x = self.embed(p, ids)?;
        self.forward_embedded(p, x, memory, grid)
    }

    /// Logits for the token following `prefix`, which must start with SOS
    /// and contain only labels after it.
    pub fn decode_step<'t>(
        &self,
        p: &Bound<'t>,
        vocab: &Vocabulary,
        prefix: &[usize],
        memory: Var<'t>,
        grid: (usize, usize),
    ) -> Result<Tensor> {
        if prefix.first() != Some(&vocab.sos()) || prefix[1..].iter().any(|&id| !vocab.is_label(id)) {
            return Err(Error::Contract(format!("malformed decoder prefix {prefix:?}")));
        }
        let out = self.forward(p, prefix, memory, grid)?;
        let logits = out.logits.narrow(0, prefix.len() - 1, 1)?.value();
        logits.reshape(&[self.vocab_size])
    }
}

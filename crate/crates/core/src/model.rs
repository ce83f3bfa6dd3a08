//! The two detectors: the encoder-decoder sequence model and the fixed-length
//! multi-classifier baseline, both on the same CNN backbone.

use serde::{Deserialize, Serialize};

use crate::backbone::{add_positional_encoding, flatten_spatial, Backbone, BackboneConfig};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput, LabelSequence, SecaMode, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Init, Linear, ParamStore};
use crate::rng;
use crate::synth::Image;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "seqfakeformer")]
    SeqFakeFormer,
    MultiCls,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seqfakeformer" => Ok(ModelKind::SeqFakeFormer),
            "multi_cls" => Ok(ModelKind::MultiCls),
            _ => Err(Error::Config(format!("unknown model {s:?} (seqfakeformer, multi_cls)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::SeqFakeFormer => "seqfakeformer",
            ModelKind::MultiCls => "multi_cls",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SeqFakeFormer,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced widths used for the CPU benchmark runs.
    pub fn compact(kind: ModelKind) -> Self {
        let width = 32;
        Self {
            kind,
            backbone: BackboneConfig {
                stem_channels: 8,
                stage_channels: vec![8, 16, width],
                blocks_per_stage: 1,
                ..BackboneConfig::default()
            },
            encoder: EncoderConfig {
                layers: 1,
                heads: 4,
                width,
                ffn_hidden: 64,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 4,
                width,
                ffn_hidden: 64,
                ..DecoderConfig::default()
            },
        }
    }

    pub fn with_ablation(mut self, seca: SecaMode, autoregressive: bool) -> Self {
        self.decoder.seca = seca;
        self.decoder.autoregressive = autoregressive;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.kind == ModelKind::SeqFakeFormer {
            self.encoder.validate()?;
            self.decoder.validate()?;
            let c = self.backbone.out_channels();
            if self.encoder.width != c || self.decoder.width != c {
                return Err(Error::Config(format!(
                    "backbone emits {c} channels but encoder/decoder widths are {}/{}",
                    self.encoder.width, self.decoder.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Sequence { encoder: Encoder, decoder: Decoder },
    /// One linear classifier per sequence position over labels ∪ {NM}.
    MultiCls { branches: Vec<Linear> },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
}

/// Maps 8-bit RGB to a 3×H×W tensor in [−1, 1].
pub fn image_tensor(image: &Image) -> Tensor {
    let (h, w) = (image.height, image.width);
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        image.pixels[3 * p + c] as f32 / 127.5 - 1.0
    })
}

impl Model {
    pub fn new(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::derive(seed, 0x6d6f64656c);
        let mut init = Init::new(&mut params, &mut r, Group::Transformer);
        let backbone = Backbone::new(&mut init, &config.backbone)?;
        let head = match config.kind {
            ModelKind::SeqFakeFormer => Head::Sequence {
                encoder: Encoder::new(&mut init, &config.encoder)?,
                decoder: Decoder::new(&mut init, &config.decoder, vocab)?,
            },
            ModelKind::MultiCls => {
                let c = config.backbone.out_channels();
                let classes = vocab.label_count() + 1;
                let branches = init.scope("multi_cls", |init| {
                    (0..config.decoder.max_len)
                        .map(|k| Linear::new(init, &format!("branch{k}"), c, classes))
                        .collect()
                });
                Head::MultiCls { branches }
            }
        };
        Ok(Model {
            config: config.clone(),
            vocab: vocab.clone(),
            params,
            backbone,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn max_len(&self) -> usize {
        self.config.decoder.max_len
    }

    /// Backbone, positional encoding, flattening and encoder: the spatial
    /// relation features as an (H·W)×C matrix plus the grid size.
    pub fn memory<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<(Var<'t>, (usize, usize))> {
        let Head::Sequence { encoder, .. } = &self.head else {
            return Err(Error::Config("the multi-classifier has no encoder".into()));
        };
        let f = self.backbone.extract_features(p, image)?;
        let grid = (f.height, f.width);
        let tokens = flatten_spatial(add_positional_encoding(f)?)?.transpose()?;
        Ok((encoder.encode(p, tokens)?, grid))
    }

    pub fn decoder(&self) -> Result<&Decoder> {
        match &self.head {
            Head::Sequence { decoder, .. } => Ok(decoder),
            Head::MultiCls { .. } => Err(Error::Config("the multi-classifier has no decoder".into())),
        }
    }

    /// Teacher-forced decoder pass for `labels`.
    pub fn sequence_forward<'t>(
        &self,
        p: &Bound<'t>,
        image: Var<'t>,
        labels: &LabelSequence,
    ) -> Result<(DecoderOutput<'t>, Vec<Option<usize>>)> {
        let tokens = self.vocab.tokenize(labels, self.max_len())?;
        let (memory, grid) = self.memory(p, image)?;
        let out = self.decoder()?.forward(p, tokens.inputs(), memory, grid)?;
        Ok((out, tokens.targets()))
    }

    /// max_len×(L+1) logits; the last class is NM.
    pub fn multi_cls_logits<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let Head::MultiCls { branches } = &self.head else {
            return Err(Error::Config("not a multi-classifier".into()));
        };
        let f = self.backbone.extract_features(p, image)?;
        let pooled = flatten_spatial(f)?.mean_axis(1)?.reshape(&[1, f.channels])?;
        let rows = branches
            .iter()
            .map(|b| b.forward(p, pooled))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&rows, 0)
    }

    /// Per-position class targets for the multi-classifier, NM-padded.
    pub fn multi_cls_targets(&self, labels: &LabelSequence) -> Result<Vec<Option<usize>>> {
        if labels.len() > self.max_len() {
            return Err(Error::Contract(format!("{} labels exceed {}", labels.len(), self.max_len())));
        }
        let nm = self.vocab.label_count();
        let mut t = labels
            .iter()
            .map(|l| self.vocab.id(l).map(Some))
            .collect::<Result<Vec<_>>>()?;
        t.resize(self.max_len(), Some(nm));
        Ok(t)
    }

    /// Training loss for one image: mean cross-entropy over supervised
    /// positions.
    pub fn loss<'t>(&self, p: &Bound<'t>, image: Var<'t>, labels: &LabelSequence) -> Result<Var<'t>> {
        match self.kind() {
            ModelKind::SeqFakeFormer => {
                let (out, targets) = self.sequence_forward(p, image, labels)?;
                crate::train::sequence_loss(out.logits, &targets)
            }
            ModelKind::MultiCls => {
                let targets = self.multi_cls_targets(labels)?;
                self.multi_cls_logits(p, image)?.cross_entropy(&targets)
            }
        }
    }
}

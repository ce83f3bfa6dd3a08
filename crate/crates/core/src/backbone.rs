//! Small residual CNN and the fixed 2-D sinusoidal positional encoding.
//!
//! A 3×3 stride-2 stem followed by three residual stages maps a 64×64 RGB
//! image to a 64×8×8 feature grid. There is no normalization layer: each
//! residual branch starts at half the He scale so activations stay bounded
//! at initialization, and no batch statistics are involved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Init, ParamId};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 1],
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }

    /// Spatial size of the output grid, following the stride schedule of
    /// 3×3 pad-1 convolutions.
    pub fn out_size(&self) -> (usize, usize) {
        let step = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        let mut hw = (step(self.input_height, 2), step(self.input_width, 2));
        for &s in &self.stage_strides {
            hw = (step(hw.0, s), step(hw.1, s));
        }
        hw
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() || self.stage_channels.is_empty() {
            return Err(Error::Config("one stride per backbone stage required".into()));
        }
        if self.blocks_per_stage == 0 || self.stage_strides.contains(&0) {
            return Err(Error::Config("backbone stages need ≥1 block and positive strides".into()));
        }
        let (h, w) = self.out_size();
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("backbone output grid {h}×{w} is degenerate")));
        }
        Ok(())
    }
}

/// C×H×W feature grid.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'t> {
    pub tensor: Var<'t>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<'t> FeatureMap<'t> {
    pub fn new(tensor: Var<'t>) -> Result<Self> {
        let &[channels, height, width] = &tensor.shape()[..] else {
            return Err(Error::dim("feature_map", format!("expected C×H×W, got {:?}", tensor.shape())));
        };
        if height < 2 || width < 2 {
            return Err(Error::dim("feature_map", format!("grid {height}×{width} smaller than 2×2")));
        }
        Ok(Self {
            tensor,
            channels,
            height,
            width,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// He-normal kernel scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let fan_in = c_in * k * k;
        init.scope(name, |init| Conv {
            w: init.normal("w", &[c_out, c_in, k, k], gain * (2.0 / fan_in as f32).sqrt(), true),
            b: init.constant("b", &[c_out], 0.0, false),
            stride,
            pad: k / 2,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResidualBlock {
    fn new<R: Rng>(init: &mut Init<'_, R>, c_in: usize, c_out: usize, stride: usize) -> Self {
        ResidualBlock {
            conv1: Conv::new(init, "conv1", c_in, c_out, 3, stride, 1.0),
            conv2: Conv::new(init, "conv2", c_out, c_out, 3, 1, 0.5),
            shortcut: (stride != 1 || c_in != c_out).then(|| Conv::new(init, "down", c_in, c_out, 1, stride, 0.5)),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(p, x)?.relu();
        let h = self.conv2.forward(p, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(p, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let saved = init.group;
        init.group = Group::Backbone;
        let built = init.scope("backbone", |init| {
            let stem = Conv::new(init, "stem", 3, config.stem_channels, 3, 2, 1.0);
            let mut blocks = Vec::new();
            let mut c_in = config.stem_channels;
            for (s, (&c_out, &stride)) in config.stage_channels.iter().zip(&config.stage_strides).enumerate() {
                for b in 0..config.blocks_per_stage {
                    let block_stride = if b == 0 { stride } else { 1 };
                    let block = init.scope(format!("stage{s}.{b}"), |init| {
                        ResidualBlock::new(init, c_in, c_out, block_stride)
                    });
                    blocks.push(block);
                    c_in = c_out;
                }
            }
            Backbone {
                config: config.clone(),
                stem,
                blocks,
            }
        });
        init.group = saved;
        Ok(built)
    }

    /// Runs the CNN on a 3×H'×W' image and returns the C×H×W feature grid.
    pub fn extract_features<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<FeatureMap<'t>> {
        let shape = image.shape();
        let expected = [3, self.config.input_height, self.config.input_width];
        if shape != expected {
            return Err(Error::Config(format!("image shape {shape:?}, backbone expects {expected:?}")));
        }
        let mut x = self.stem.forward(p, image)?.relu();
        for block in &self.blocks {
            x = block.forward(p, x)?;
        }
        FeatureMap::new(x)
    }

    /// Kernel and bias of the final block's second convolution; zeroing
    /// them turns the last residual branch off.
    pub fn final_branch_params(&self) -> Vec<ParamId> {
        self.blocks
            .last()
            .map(|b| vec![b.conv2.w, b.conv2.b])
            .unwrap_or_default()
    }
}

/// Fixed 2-D sinusoidal table of shape C×H×W. The first C/2 channels encode
/// the row index, the last C/2 the column index, each with the usual
/// geometric frequency ladder and alternating sin/cos.
pub fn positional_encoding(channels: usize, height: usize, width: usize) -> Result<Tensor> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even channel count, got {channels}")));
    }
    let half = channels / 2;
    let value = |j: usize, pos: usize| {
        let freq = 1.0 / 10_000f32.powf((2 * (j / 2)) as f32 / half as f32);
        let angle = pos as f32 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Ok(Tensor::from_fn(&[channels, height, width], |i| {
        let c = i / (height * width);
        let h = (i / width) % height;
        let w = i % width;
        if c < half {
            value(c, h)
        } else {
            value(c - half, w)
        }
    }))
}

/// f_pos = f_ori + P.
pub fn add_positional_encoding<'t>(f: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
    let table = positional_encoding(f.channels, f.height, f.width)?;
    let tensor = f.tensor.add(f.tensor.tape().constant(table))?;
    Ok(FeatureMap { tensor, ..f })
}

/// Reshapes C×H×W to C×(H·W); grid cell (h, w) becomes sequence index h·W + w.
pub fn flatten_spatial<'t>(f: FeatureMap<'t>) -> Result<Var<'t>> {
    f.tensor.reshape(&[f.channels, f.height * f.width])
}

pub fn unflatten_spatial<'t>(x: Var<'t>, height: usize, width: usize) -> Result<FeatureMap<'t>> {
    let c = x.shape()[0];
    FeatureMap::new(x.reshape(&[c, height, width])?)
}

pub fn sequence_index(h: usize, w: usize, width: usize) -> usize {
    h * width + w
}
